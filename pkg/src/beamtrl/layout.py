"""Pairwise Chamfer distance maps and their Kamada-Kawai embedding."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import InvalidInputError, PointCloud, chamfer_distance


@dataclass(frozen=True, eq=False)
class DistanceMap:
    labels: tuple
    d: np.ndarray

    def __post_init__(self):
        labels = tuple(self.labels)
        d = np.array(self.d, dtype=np.float64)
        n = len(labels)
        if len(set(labels)) != n:
            raise InvalidInputError("distance map labels must be unique")
        if d.shape != (n, n):
            raise InvalidInputError(f"matrix shape {d.shape} does not match {n} labels")
        if not np.array_equal(d, d.T) or np.any(np.diag(d) != 0) or np.any(d < 0):
            raise InvalidInputError("distance matrix must be symmetric, non-negative, zero-diagonal")
        d.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "d", d)

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DistanceMap):
            return NotImplemented
        return self.labels == other.labels and np.array_equal(self.d, other.d)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise InvalidInputError(f"unknown environment {label!r}") from None

    def distance(self, a: str, b: str) -> float:
        return float(self.d[self.index(a), self.index(b)])


@dataclass
class LayoutParams:
    iterations: int = 2000
    step_size: float = 1.0
    tolerance: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidInputError("iterations must be >= 1")
        if not self.tolerance > 0 or not self.step_size > 0:
            raise InvalidInputError("tolerance and step_size must be positive")


@dataclass
class Layout:
    labels: tuple
    positions: np.ndarray
    residual_energy: float
    energy_history: list = field(default_factory=list)


def build_distance_map(clouds: Sequence[PointCloud]) -> DistanceMap:
    if len(clouds) == 0:
        raise InvalidInputError("need at least one cloud")
    labels = [c.label for c in clouds]
    if len(set(labels)) != len(labels):
        raise InvalidInputError("cloud labels must be unique")
    n = len(clouds)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = chamfer_distance(clouds[i], clouds[j])
    return DistanceMap(tuple(labels), d)


def _pairs(dmap: DistanceMap):
    i, j = np.triu_indices(len(dmap), k=1)
    target = dmap.d[i, j]
    keep = target > 0
    return i[keep], j[keep], target[keep]


def stress_energy(positions, dmap: DistanceMap) -> float:
    """Kamada-Kawai stress with target length d_ij and spring weight 1/d_ij^2.

    Each unordered pair is counted once. Pairs at distance zero are skipped
    because their weight is undefined.
    """
    x = np.asarray(positions, dtype=np.float64)
    if x.shape != (len(dmap), 2):
        raise InvalidInputError(f"positions shape {x.shape} does not match {len(dmap)} nodes")
    i, j, target = _pairs(dmap)
    r = np.linalg.norm(x[i] - x[j], axis=1)
    return float(np.sum((r - target) ** 2 / target**2))


def _energy_and_grad(x, i, j, target):
    delta = x[i] - x[j]
    r = np.sqrt(np.sum(delta**2, axis=1))
    resid = r - target
    energy = float(np.sum(resid**2 / target**2))
    coef = 2.0 * resid / target**2 / np.maximum(r, 1e-12)
    pair_grad = coef[:, None] * delta
    grad = np.zeros_like(x)
    np.add.at(grad, i, pair_grad)
    np.add.at(grad, j, -pair_grad)
    return energy, grad


def _zero_distance_groups(dmap: DistanceMap) -> np.ndarray:
    # identical environments share one layout node
    n = len(dmap)
    group = np.arange(n)
    for a in range(n):
        for b in range(a):
            if dmap.d[a, b] == 0:
                group[a] = group[b]
                break
    _, compact = np.unique(group, return_inverse=True)
    return compact


def kamada_kawai(dmap: DistanceMap, params: LayoutParams | None = None) -> Layout:
    """Embed a distance map in the plane by minimizing the stress energy.

    Starts from a seeded circle of radius ``max(d) / 2`` and runs gradient
    descent with a backtracking step: a step is only accepted if it lowers the
    energy, otherwise the step size is halved. Environments at Chamfer
    distance zero are placed on the same point.
    """
    params = params or LayoutParams()
    n = len(dmap)
    if n == 1:
        return Layout(dmap.labels, np.zeros((1, 2)), 0.0, [0.0])

    group = _zero_distance_groups(dmap)
    m = int(group.max()) + 1
    rng = np.random.default_rng(params.seed)
    radius = dmap.d.max() / 2 or 1.0
    angles = 2 * np.pi * (np.arange(m) + rng.uniform(-0.25, 0.25, m)) / m + rng.uniform(0, 2 * np.pi)
    y = radius * np.column_stack([np.cos(angles), np.sin(angles)])

    i, j, target = _pairs(dmap)

    def evaluate(y):
        energy, gx = _energy_and_grad(y[group], i, j, target)
        gy = np.zeros_like(y)
        np.add.at(gy, group, gx)
        return energy, gy

    energy, grad = evaluate(y)
    history = [energy]
    step = params.step_size
    for _ in range(params.iterations):
        if energy == 0.0:
            break
        for _ in range(60):
            trial = y - step * grad
            trial_energy, trial_grad = evaluate(trial)
            if trial_energy < energy:
                break
            step *= 0.5
        else:
            break
        improvement = energy - trial_energy
        y, energy, grad = trial, trial_energy, trial_grad
        history.append(energy)
        step *= 1.5
        if improvement < params.tolerance:
            break

    x = y[group]
    return Layout(dmap.labels, x, stress_energy(x, dmap), history)


def nearest_environment(dmap: DistanceMap, query: str) -> str:
    """Label with the smallest Chamfer distance to ``query``.

    Ties go to the lexicographically smallest label. Only the distance matrix
    is consulted, never layout coordinates.
    """
    if len(dmap) < 2:
        raise InvalidInputError("need at least two environments")
    q = dmap.index(query)
    candidates = [(dmap.d[q, k], label) for k, label in enumerate(dmap.labels) if k != q]
    return min(candidates)[1]


def save_distance_map(dmap: DistanceMap, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(dmap.labels)
        for row in dmap.d.tolist():
            w.writerow([repr(v) for v in row])


def load_distance_map(path) -> DistanceMap:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidInputError(f"{path}: empty distance map")
    return DistanceMap(tuple(rows[0]), np.array([[float(v) for v in r] for r in rows[1:]]).reshape(len(rows[0]), -1))


def save_layout(layout: Layout, path, with_energy: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["label", "x", "y"] + (["residual_energy"] if with_energy else [])
        w.writerow(header)
        for label, (x, y) in zip(layout.labels, layout.positions.tolist()):
            row = [label, f"{x:.9f}", f"{y:.9f}"]
            if with_energy:
                row.append(f"{layout.residual_energy:.9e}")
            w.writerow(row)
