"""Command-line driver: pretraining, depth rendering, reconstruction
dumps, frozen-encoder probes, and the gradient-check harness.

Exit codes: 0 success, 1 failed gradient check, 2 configuration or
input error, 3 training aborted on a non-finite loss.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import no_grad
from .checkpoint import load_checkpoint
from .config import Config, preset_or_file
from .data import make_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    ContractViolation,
    TrainingAborted,
)
from .geometry import PointCloud, read_off, read_xyz, write_xyz
from .gradcheck import GRADCHECK_TOLERANCE, run_gradcheck
from .model import MultiviewMae, build_pretrain_plan, loss_from_plan
from .pipeline import (
    few_shot_eval,
    linear_probe,
    load_pretrained,
    pretrain,
    summarize_accuracy,
)
from .projection import CameraPose, rasterize_depth, write_pgm
from .rng import Rng

EXIT_OK = 0
EXIT_GRADCHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NAN_ABORT = 3

_GRADCHECK_WARN_SCALARS = 50_000


def _fail(message: str, code: int = EXIT_CONFIG) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_cloud(path: str) -> PointCloud:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"input cloud not found: {p}")
    return read_off(p) if p.suffix.lower() == ".off" else read_xyz(p)


# --- run manifests -------------------------------------------------------


def _manifest_path(out_dir: Path) -> Path:
    return out_dir / "manifest.json"


def _claim_out_dir(out_dir: Path, force: bool) -> None:
    if _manifest_path(out_dir).exists() and not force:
        raise ConfigError(
            f"{out_dir} already holds a run manifest; pass --force to reuse it"
        )
    out_dir.mkdir(parents=True, exist_ok=True)


def _write_manifest(
    out_dir: Path,
    command: str,
    config_path: str | None,
    config_hash: str | None,
    seed: int | None,
    started: float,
    finished: float | None,
) -> None:
    manifest = {
        "command": command,
        "config_path": config_path,
        "config_hash": config_hash,
        "seed": seed,
        "tool_version": __version__,
        "out_dir": str(out_dir),
        "started_at": started,
        "finished_at": finished,
    }
    _manifest_path(out_dir).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


# --- subcommands ----------------------------------------------------------


def cmd_pretrain(args) -> int:
    try:
        cfg = preset_or_file(args.config)
    except ConfigError as exc:
        return _fail(str(exc))
    out_dir = Path(args.out)
    try:
        _claim_out_dir(out_dir, args.force)
    except ConfigError as exc:
        return _fail(str(exc))
    started = time.time()
    _write_manifest(
        out_dir, "pretrain", args.config, cfg.config_hash(), args.seed, started, None
    )
    try:
        clouds, _ = make_dataset(cfg.data)
        result = pretrain(
            cfg,
            clouds,
            out_dir,
            run_seed=args.seed,
            epochs=args.epochs,
            resume_from=args.resume,
        )
    except TrainingAborted as exc:
        print(f"aborted at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NAN_ABORT
    except (ConfigError, CheckpointError, ContractViolation) as exc:
        return _fail(str(exc))
    _write_manifest(
        out_dir, "pretrain", args.config, cfg.config_hash(), args.seed, started, time.time()
    )
    print(
        f"pretrained {result.steps_run}/{result.total_steps} steps; "
        f"final checkpoint {result.checkpoint_path}"
    )
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        cloud = _load_cloud(args.input)
        parts = [float(x) for x in args.pose.split(",")]
        if len(parts) != 4:
            raise ConfigError(f'pose must be "az,el,radius,fov", got {args.pose!r}')
        h_txt, _, w_txt = args.size.partition("x")
        height, width = int(h_txt), int(w_txt)
        pose = CameraPose(
            azimuth_deg=parts[0],
            elevation_deg=parts[1],
            radius=parts[2],
            fov_deg=parts[3],
        )
    except (ConfigError, ContractViolation, ValueError) as exc:
        return _fail(str(exc))
    out = Path(args.out)
    if out.exists() and not args.force:
        return _fail(f"{out} exists; pass --force to overwrite")
    depth = rasterize_depth(cloud.points, pose, height, width)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out, depth.values)
    print(
        f"wrote {out} ({height}x{width}, "
        f"{int((depth.values > 0).sum())} occupied pixels)"
    )
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    try:
        model, ckpt = load_pretrained(args.checkpoint)
        cloud = _load_cloud(args.input)
    except (CheckpointError, ConfigError, ContractViolation) as exc:
        return _fail(str(exc))
    cfg = ckpt.config
    views = args.views if args.views is not None else cfg.model.K
    if not 1 <= views <= cfg.model.V:
        return _fail(f"views {views} outside [1, V={cfg.model.V}]")
    model_cfg = dataclasses.replace(cfg.model, K=views)
    out_dir = Path(args.out)
    try:
        _claim_out_dir(out_dir, args.force)
    except ConfigError as exc:
        return _fail(str(exc))
    started = time.time()
    _write_manifest(
        out_dir, "reconstruct", args.checkpoint, cfg.config_hash(), args.seed, started, None
    )

    plan = build_pretrain_plan(cloud, model_cfg, Rng(args.seed).derive("reconstruct"))
    with no_grad():
        model.cfg = model_cfg
        _, recon, diag = loss_from_plan(model, plan)

    visible_abs = plan.patches.absolute()[plan.mask.visible_idx].reshape(-1, 3)
    write_xyz(out_dir / "masked_input.xyz", PointCloud(visible_abs))
    centers = plan.patches.centers[plan.mask.masked_idx]
    predicted_abs = (recon.predicted_patches.data + centers[:, None, :]).reshape(-1, 3)
    write_xyz(out_dir / "reconstructed.xyz", PointCloud(predicted_abs))
    for v in range(views):
        write_pgm(out_dir / f"gt_view{v}.pgm", plan.target_images[v])
        write_pgm(
            out_dir / f"pred_view{v}.pgm",
            np.clip(recon.predicted_images[v].data, 0.0, 1.0),
        )
    _write_manifest(
        out_dir, "reconstruct", args.checkpoint, cfg.config_hash(), args.seed, started, time.time()
    )
    print(
        f"wrote 2 clouds and {2 * views} depth images to {out_dir} "
        f"(l3d={diag['l3d']:.6f}, l2d={diag['l2d']:.6f})"
    )
    return EXIT_OK


def _report_dict(report) -> dict:
    out = {
        "accuracy": report.accuracy,
        "confusion": report.confusion.tolist(),
        "seeds": report.seeds,
    }
    if report.n_way is not None:
        out["n_way"] = report.n_way
        out["m_shot"] = report.m_shot
    return out


def cmd_probe(args) -> int:
    try:
        model, ckpt = load_pretrained(args.checkpoint)
    except (CheckpointError, ConfigError) as exc:
        return _fail(str(exc))
    clouds, labels = make_dataset(ckpt.config.data)
    rng = Rng(args.seed)
    try:
        if args.mode == "linear":
            report = linear_probe(model, clouds, labels, rng.derive("probe"))
            payload = {"mode": "linear", **_report_dict(report)}
        else:
            reports = few_shot_eval(
                model,
                clouds,
                labels,
                n_way=args.n_way,
                m_shot=args.m_shot,
                trials=args.trials,
                rng=rng.derive("fewshot"),
            )
            mean, std = summarize_accuracy(reports)
            payload = {
                "mode": "fewshot",
                "n_way": args.n_way,
                "m_shot": args.m_shot,
                "trials": args.trials,
                "mean": mean,
                "std": std,
                "reports": [_report_dict(r) for r in reports],
            }
    except ContractViolation as exc:
        return _fail(str(exc))
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        cfg = preset_or_file(args.config)
    except ConfigError as exc:
        return _fail(str(exc))
    scalars = _estimate_scalars(cfg)
    if scalars > _GRADCHECK_WARN_SCALARS:
        print(
            f"warning: {scalars} scalars to perturb; this will be slow",
            file=sys.stderr,
        )
    try:
        result = run_gradcheck(cfg, args.seed, corrupt_param=args.corrupt_param)
    except ContractViolation as exc:
        return _fail(str(exc))
    status = "PASS" if result.passed else "FAIL"
    print(
        f"{status}: worst {result.worst_name} "
        f"rel_err {result.worst_error:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e}); "
        f"{result.n_scalars} scalars in {result.n_parameters} parameters, "
        f"{result.seconds:.1f}s"
    )
    return EXIT_OK if result.passed else EXIT_GRADCHECK_FAILED


def _estimate_scalars(cfg: Config) -> int:
    model = MultiviewMae(cfg.model, Rng(0).derive("init"))
    return sum(p.data.size for p in model.params.values())


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvmae",
        description=(
            "Masked point-cloud pretraining with joint multi-view depth "
            "reconstruction, plus frozen-encoder evaluation."
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run masked multi-view pretraining")
    p.add_argument("--config", required=True, help="preset name or JSON path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    p.set_defaults(run=cmd_pretrain)

    p = sub.add_parser("render", help="rasterize one depth image to PGM")
    p.add_argument("--input", required=True, help="XYZ or OFF cloud")
    p.add_argument("--pose", default="0,30,2.2,50", help='"az,el,radius,fov"')
    p.add_argument("--size", default="224x224", help="HxW pixels")
    p.add_argument("--out", required=True, help="output PGM path")
    p.add_argument("--force", action="store_true")
    p.set_defaults(run=cmd_render)

    p = sub.add_parser("reconstruct", help="dump masked input and reconstructions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="XYZ or OFF cloud")
    p.add_argument("--views", type=int, default=None, help="views to reconstruct")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(run=cmd_reconstruct)

    p = sub.add_parser("probe", help="evaluate the frozen encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("linear", "fewshot"), default="linear")
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--m-shot", type=int, default=10)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--config", default="tiny", help="preset name or JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-param", default=None, help=argparse.SUPPRESS)
    p.set_defaults(run=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.run(args)


if __name__ == "__main__":
    sys.exit(main())
