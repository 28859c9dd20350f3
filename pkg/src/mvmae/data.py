"""Synthetic shape corpus: analytic surfaces sampled into point clouds.

Five shape families stand in for a mesh dataset. Every cloud is uniform
surface sampling followed by unit-sphere normalization, so downstream
code sees the same scale regardless of the family's native dimensions.
Dataset assembly derives one rng stream per instance, making the corpus
a pure function of the dataset seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import DataConfig
from .errors import ContractViolation
from .geometry import PointCloud, normalize_unit_sphere
from .rng import Rng

SHAPE_KINDS = ("sphere", "cube", "torus", "cylinder", "cone")


@dataclass(frozen=True)
class SyntheticShape:
    kind: str
    n_points: int
    seed: int
    params: dict = field(default_factory=dict)


def _sample_sphere(rng: Rng, n: int, params: dict) -> np.ndarray:
    radius = params.get("radius", 1.0)
    # antithetic pairs: for even n the sample centroid is exactly zero, so
    # unit-sphere normalization preserves every point's norm
    half = (n + 1) // 2
    v = rng.normal(0.0, 1.0, (half, 3))
    v = radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    return np.concatenate([v, -v], axis=0)[:n]


def _sample_cube(rng: Rng, n: int, params: dict) -> np.ndarray:
    side = params.get("side", 2.0)
    half = side / 2.0
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-half, half, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2  # which coordinate is pinned
    sign = np.where(face % 2 == 0, half, -half)
    for a in range(3):
        rows = axis == a
        others = [i for i in range(3) if i != a]
        pts[rows, a] = sign[rows]
        pts[np.ix_(rows, others)] = uv[rows]
    return pts


def _sample_torus(rng: Rng, n: int, params: dict) -> np.ndarray:
    ring = params.get("ring_radius", 1.0)
    tube = params.get("tube_radius", 0.3)
    pts = np.empty((n, 3))
    done = 0
    while done < n:
        batch = 2 * (n - done) + 16
        theta = rng.uniform(0.0, 2.0 * math.pi, batch)
        # area element scales with ring + tube*cos(theta): rejection keeps
        # sampling uniform over the surface rather than over parameters
        keep = rng.uniform(0.0, 1.0, batch) < (ring + tube * np.cos(theta)) / (
            ring + tube
        )
        theta = theta[keep][: n - done]
        phi = rng.uniform(0.0, 2.0 * math.pi, len(theta))
        ring_dist = ring + tube * np.cos(theta)
        pts[done : done + len(theta), 0] = ring_dist * np.cos(phi)
        pts[done : done + len(theta), 1] = ring_dist * np.sin(phi)
        pts[done : done + len(theta), 2] = tube * np.sin(theta)
        done += len(theta)
    return pts


def _disk(rng: Rng, n: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)


def _sample_cylinder(rng: Rng, n: int, params: dict) -> np.ndarray:
    radius = params.get("radius", 0.5)
    height = params.get("height", 1.5)
    side_area = 2.0 * math.pi * radius * height
    cap_area = math.pi * radius**2
    total = side_area + 2.0 * cap_area
    u = rng.uniform(0.0, total, n)
    pts = np.empty((n, 3))
    on_side = u < side_area
    phi = rng.uniform(0.0, 2.0 * math.pi, int(on_side.sum()))
    pts[on_side, 0] = radius * np.cos(phi)
    pts[on_side, 1] = radius * np.sin(phi)
    pts[on_side, 2] = rng.uniform(-height / 2.0, height / 2.0, int(on_side.sum()))
    n_caps = int((~on_side).sum())
    disk = _disk(rng, n_caps, radius)
    top = u[~on_side] < side_area + cap_area
    pts[~on_side, 0] = disk[:, 0]
    pts[~on_side, 1] = disk[:, 1]
    pts[~on_side, 2] = np.where(top, height / 2.0, -height / 2.0)
    return pts


def _sample_cone(rng: Rng, n: int, params: dict) -> np.ndarray:
    radius = params.get("radius", 0.7)
    height = params.get("height", 1.4)
    lateral_area = math.pi * radius * math.hypot(radius, height)
    base_area = math.pi * radius**2
    u = rng.uniform(0.0, lateral_area + base_area, n)
    pts = np.empty((n, 3))
    on_lateral = u < lateral_area
    n_lat = int(on_lateral.sum())
    # area grows linearly with distance from the apex, hence sqrt
    s = np.sqrt(rng.uniform(0.0, 1.0, n_lat))
    phi = rng.uniform(0.0, 2.0 * math.pi, n_lat)
    pts[on_lateral, 0] = s * radius * np.cos(phi)
    pts[on_lateral, 1] = s * radius * np.sin(phi)
    pts[on_lateral, 2] = height * (1.0 - s)
    disk = _disk(rng, n - n_lat, radius)
    pts[~on_lateral, 0] = disk[:, 0]
    pts[~on_lateral, 1] = disk[:, 1]
    pts[~on_lateral, 2] = 0.0
    return pts


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "torus": _sample_torus,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
}


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def generate_shape(shape: SyntheticShape) -> PointCloud:
    """Uniform surface sample of the analytic shape, unit-sphere normalized.

    params may carry an "orientation" unit quaternion; the sampled surface
    is rigidly rotated by it before normalization, so corpus instances do
    not share a canonical axis alignment.
    """
    if shape.kind not in _SAMPLERS:
        raise ContractViolation(f"unknown shape kind {shape.kind!r}")
    if shape.n_points < 8:
        raise ContractViolation(f"n_points {shape.n_points} below 8")
    rng = Rng(shape.seed).derive("shape", shape.kind)
    pts = _SAMPLERS[shape.kind](rng, shape.n_points, shape.params)
    jitter = shape.params.get("jitter", 0.0)
    if jitter > 0.0:
        pts = pts + rng.normal(0.0, jitter, pts.shape)
    orientation = shape.params.get("orientation")
    if orientation is not None:
        pts = pts @ quaternion_to_matrix(np.asarray(orientation)).T
    cloud = PointCloud(pts, label=None, source_id=f"{shape.kind}:{shape.seed}")
    return normalize_unit_sphere(cloud)


def _random_orientation(rng: Rng) -> tuple[float, float, float, float]:
    """Uniform rotation: normalized 4-d Gaussian is uniform on the
    quaternion sphere."""
    q = rng.normal(0.0, 1.0, 4)
    q = q / np.linalg.norm(q)
    return tuple(float(v) for v in q)


def _instance_params(kind: str, rng: Rng) -> dict:
    """Per-instance dimension draw; families with a free aspect ratio vary
    so class identity is not a pure scale artifact, and every instance is
    rotated to a random attitude so it is not an axis-alignment artifact
    either."""
    base = {
        "jitter": float(rng.uniform(0.0, 0.03)),
        "orientation": _random_orientation(rng.derive("orientation")),
    }
    if kind == "torus":
        return {
            "ring_radius": 1.0,
            "tube_radius": float(rng.uniform(0.15, 0.45)),
            **base,
        }
    if kind == "cylinder":
        return {"radius": 0.5, "height": float(rng.uniform(0.5, 2.5)), **base}
    if kind == "cone":
        return {"radius": 0.7, "height": float(rng.uniform(0.56, 1.75)), **base}
    return base


def make_dataset(cfg: DataConfig) -> tuple[list[PointCloud], np.ndarray]:
    """The labeled corpus: kind index is the class label."""
    if cfg.n_classes > len(SHAPE_KINDS):
        raise ContractViolation(
            f"at most {len(SHAPE_KINDS)} classes available, got {cfg.n_classes}"
        )
    root = Rng(cfg.dataset_seed)
    clouds: list[PointCloud] = []
    labels = np.empty(cfg.n_classes * cfg.instances_per_class, dtype=np.int64)
    for class_idx, kind in enumerate(SHAPE_KINDS[: cfg.n_classes]):
        for j in range(cfg.instances_per_class):
            item = root.derive("item", kind, j)
            shape = SyntheticShape(
                kind=kind,
                n_points=cfg.n_points,
                seed=item.derive("sample").seed,
                params=_instance_params(kind, item.derive("params")),
            )
            cloud = generate_shape(shape)
            position = class_idx * cfg.instances_per_class + j
            clouds.append(
                PointCloud(cloud.points, label=class_idx, source_id=cloud.source_id)
            )
            labels[position] = class_idx
    return clouds, labels
