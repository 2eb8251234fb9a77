"""Point-cloud environments and the Chamfer similarity measure.

An environment is a small 2-D point set: index 0 holds the gNB position,
the remaining points are scatterers. Distances are in meters, Chamfer
values in squared meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments outside its domain."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered set of 2-D points describing one environment.

    Parameters
    ----------
    points : array_like, shape (n, 2)
        Point coordinates in meters. Row 0 is the gNB by convention.
    label : str
        Environment identifier.
    """

    points: np.ndarray
    label: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 2:
            pts = pts.reshape(1, 2)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvalidInputError(f"points must have shape (n, 2), got {pts.shape}")
        if pts.shape[0] == 0:
            raise InvalidInputError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.points, other.points)

    @property
    def gnb(self) -> np.ndarray:
        return self.points[0]

    @property
    def scatterers(self) -> np.ndarray:
        return self.points[1:]

    def relabel(self, label: str) -> "PointCloud":
        return PointCloud(self.points, label)


def _squared_distances(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = p[:, None, :] - q[None, :, :]
    return diff[..., 0] ** 2 + diff[..., 1] ** 2


def chamfer_distance(P: PointCloud, Q: PointCloud) -> float:
    """Symmetric Chamfer distance between two clouds, in m^2.

    Mean squared nearest-neighbour distance from ``P`` to ``Q`` plus the same
    quantity from ``Q`` to ``P``. Nearest neighbours are found by exhaustive
    search; the sums use ``math.fsum`` so the result does not depend on the
    order of points inside either cloud.
    """
    if len(P) == 0 or len(Q) == 0:
        raise InvalidInputError("chamfer distance needs non-empty clouds")
    sq = _squared_distances(P.points, Q.points)
    forward = math.fsum(sq.min(axis=1)) / sq.shape[0]
    backward = math.fsum(sq.min(axis=0)) / sq.shape[1]
    return forward + backward


def perturb_cloud(P: PointCloud, radius: float, seed: int, label: str | None = None) -> PointCloud:
    """Displace every point by an independent uniform draw from a disc.

    Samples come from the bounding square of the disc and are rejected until
    they land inside it. The gNB point is perturbed as well.
    """
    if not radius >= 0:
        raise InvalidInputError(f"radius must be non-negative, got {radius}")
    new_label = P.label if label is None else label
    if radius == 0:
        return PointCloud(P.points.copy(), new_label)
    rng = np.random.default_rng(seed)
    offsets = np.empty_like(P.points)
    for i in range(len(P)):
        while True:
            d = rng.uniform(-radius, radius, size=2)
            if d[0] * d[0] + d[1] * d[1] <= radius * radius:
                offsets[i] = d
                break
    return PointCloud(P.points + offsets, new_label)


def save_cloud(cloud: PointCloud, path) -> None:
    """Write ``env <label>`` followed by one ``x y`` line per point."""
    lines = [f"env {cloud.label}"]
    lines += [f"{x!r} {y!r}" for x, y in cloud.points.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_cloud(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("env"):
        raise InvalidInputError(f"{path}: missing 'env <label>' header")
    label = text[0][3:].strip()
    pts = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise InvalidInputError(f"{path}:{lineno}: expected 'x y'")
        pts.append((float(parts[0]), float(parts[1])))
    return PointCloud(np.array(pts).reshape(-1, 2), label)
