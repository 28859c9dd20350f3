"""Point-cloud containers, normalization, sampling, grouping, augmentation,
and the XYZ/OFF readers."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .rng import Rng

__all__ = [
    "PointCloud",
    "Rng",
    "normalize_unit_sphere",
    "farthest_point_sampling",
    "knn",
    "augment",
    "rotate_z",
    "read_xyz",
    "write_xyz",
    "read_off",
]


@dataclass
class PointCloud:
    """N x 3 coordinates, dimensionless; normalized clouds live in the unit
    sphere with centroid at the origin."""

    points: np.ndarray
    label: int | None = None
    source_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ContractViolation(f"points must be N x 3, got {self.points.shape}")
        if len(self.points) < 1:
            raise ContractViolation("point cloud must contain at least one point")

    def __len__(self) -> int:
        return len(self.points)


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center at the origin and scale so the farthest point has norm 1.

    A degenerate cloud whose points are all identical collapses to
    all-zeros rather than dividing by zero.
    """
    centered = cloud.points - cloud.points.mean(axis=0)
    radius = float(np.linalg.norm(centered, axis=1).max())
    if radius < 1e-30:
        return replace(cloud, points=np.zeros_like(centered))
    return replace(cloud, points=centered / radius)


def farthest_point_sampling(
    points: np.ndarray, n_samples: int, start_index: int = 0
) -> np.ndarray:
    """Greedy max-min subset selection, ties broken by lowest index.

    Returns indices in selection order. The start index defaults to 0 so
    patching is deterministic without threading an rng through.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= n_samples <= n:
        raise ContractViolation(f"n_samples {n_samples} outside [1, {n}]")
    if not 0 <= start_index < n:
        raise ContractViolation(f"start_index {start_index} outside [0, {n})")
    chosen = np.empty(n_samples, dtype=np.int64)
    chosen[0] = start_index
    min_d2 = np.sum((points - points[start_index]) ** 2, axis=1)
    # chosen entries get -1 so duplicates of a selected point can't win
    min_d2[start_index] = -1.0
    for i in range(1, n_samples):
        nxt = int(np.argmax(min_d2))  # argmax takes the first max: lowest index
        chosen[i] = nxt
        d2 = np.sum((points - points[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[nxt] = -1.0
    return chosen


def knn(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points per center, ascending by distance,
    ties by lowest index."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if k > len(points):
        raise ContractViolation(f"k {k} exceeds point count {len(points)}")
    d2 = np.sum((centers[:, None, :] - points[None, :, :]) ** 2, axis=2)
    # stable sort on distance keeps index order within exact ties
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return points @ rot.T


def scale_and_rotate_z(points: np.ndarray, scale: float, angle: float) -> np.ndarray:
    return rotate_z(points * scale, angle)


def augment(cloud: PointCloud, rng: Rng) -> PointCloud:
    """Pretraining augmentation: uniform scale in [0.8, 1.2], then a uniform
    rotation about the gravity (z) axis. Draw order is scale, then angle."""
    s = float(rng.uniform(0.8, 1.2))
    theta = float(rng.uniform(0.0, 2.0 * math.pi))
    return replace(cloud, points=scale_and_rotate_z(cloud.points, s, theta))


def read_xyz(path: str | Path) -> PointCloud:
    """One "x y z" triple per line; blank lines ignored."""
    rows = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 3:
            raise ContractViolation(f"bad XYZ line in {path}: {line!r}")
        rows.append([float(parts[0]), float(parts[1]), float(parts[2])])
    if not rows:
        raise ContractViolation(f"no points in {path}")
    return PointCloud(np.array(rows), source_id=str(path))


def write_xyz(path: str | Path, cloud: PointCloud) -> None:
    # repr of a builtin float is the shortest string that round-trips exactly
    lines = [
        f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in cloud.points
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_off(path: str | Path) -> PointCloud:
    """OFF mesh vertices; faces are ignored. Tolerates the count header
    glued to the OFF tag (the common ModelNet quirk)."""
    tokens: list[str] = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens:
        raise ContractViolation(f"empty OFF file: {path}")
    head = tokens[0]
    if head.upper().startswith("OFF"):
        rest = head[3:]
        tokens = ([rest] if rest else []) + tokens[1:]
    if len(tokens) < 3:
        raise ContractViolation(f"truncated OFF header: {path}")
    n_vertices = int(tokens[0])
    coords = tokens[3 : 3 + 3 * n_vertices]
    if len(coords) < 3 * n_vertices or n_vertices < 1:
        raise ContractViolation(f"OFF vertex section truncated: {path}")
    pts = np.array([float(c) for c in coords]).reshape(n_vertices, 3)
    return PointCloud(pts, source_id=str(path))


def load_cloud(path: str | Path) -> PointCloud:
    """Dispatch on extension: .off is a mesh header, everything else XYZ."""
    p = Path(path)
    if p.suffix.lower() == ".off":
        return read_off(p)
    return read_xyz(p)
