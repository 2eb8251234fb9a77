"""Synthetic beam-selection environments.

A gNB sits inside a square; the UE moves along the square's perimeter. The
received power of each transmit beam at each UE location is precomputed from
a line-of-sight path plus one single-bounce path per scatterer, and the
beam-selection MDP is played over that table.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .geometry import InvalidInputError, PointCloud, load_cloud, perturb_cloud, save_cloud

N_BEAMS_DEFAULT = 4
EXCLUSION_RADIUS = 0.5


@dataclass
class EnvSpec:
    square_side: float = 6.0
    n_scatterers: int = 5
    n_train_locations: int = 200
    n_test_locations: int = 100
    beam_angles: tuple = (0.0, 90.0, 180.0, 270.0)
    beam_sigma: float = 30.0
    reflection_gain: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.beam_angles = tuple(float(a) for a in self.beam_angles)
        if not self.square_side > 0:
            raise InvalidInputError("square_side must be positive")
        if len(set(self.beam_angles)) != len(self.beam_angles):
            raise InvalidInputError("beam angles must be distinct")
        if any(not 0 <= a < 360 for a in self.beam_angles):
            raise InvalidInputError("beam angles must lie in [0, 360)")
        if self.n_train_locations < 1 or self.n_scatterers < 0 or self.n_test_locations < 0:
            raise InvalidInputError("location and scatterer counts out of range")

    @property
    def half_side(self) -> float:
        return self.square_side / 2

    @classmethod
    def from_mapping(cls, values: dict) -> "EnvSpec":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in types:
                continue
            if key == "beam_angles":
                if isinstance(raw, str):
                    raw = [a for a in raw.replace(",", " ").split()]
                kwargs[key] = tuple(float(a) for a in raw)
            elif key in ("n_scatterers", "n_train_locations", "n_test_locations", "seed"):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)

    def to_config(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "beam_angles":
                value = ",".join(repr(a) for a in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def read_config(path) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def wrap_degrees(delta):
    """Absolute angular difference folded into [0, 180]."""
    d = np.mod(np.asarray(delta, dtype=np.float64), 360.0)
    return np.minimum(d, 360.0 - d)


def beam_gain(offset_deg, sigma_deg: float):
    offset = wrap_degrees(offset_deg)
    return np.exp(-(offset**2) / (2.0 * sigma_deg**2))


def _bearing(src, dst) -> float:
    return float(np.degrees(np.arctan2(dst[1] - src[1], dst[0] - src[0])))


def received_power(cloud: PointCloud, beam_angle: float, ue, beam_sigma: float = 30.0,
                   reflection_gain: float = 0.3) -> float:
    """Linear received power for one beam at one UE position."""
    ue = np.asarray(ue, dtype=np.float64)
    gnb = cloud.gnb
    d_los = float(np.hypot(*(ue - gnb)))
    if d_los == 0.0:
        raise InvalidInputError("UE position coincides with the gNB")
    power = float(beam_gain(_bearing(gnb, ue) - beam_angle, beam_sigma)) / d_los**2
    for s in cloud.scatterers:
        hop = float(np.hypot(*(s - gnb))) + float(np.hypot(*(ue - s)))
        gain = float(beam_gain(_bearing(gnb, s) - beam_angle, beam_sigma))
        power += reflection_gain * gain / hop**2
    return power


def compute_rsrp(cloud: PointCloud, beam_angle: float, ue, beam_sigma: float = 30.0,
                 reflection_gain: float = 0.3) -> float:
    """RSRP in dB of ``beam_angle`` at ``ue``.

    Power is the beam gain toward the UE over the squared LOS distance, plus
    for every scatterer ``reflection_gain`` times the beam gain toward the
    scatterer over the squared two-hop path length. Beam gain is a Gaussian
    in the wrapped boresight offset with width ``beam_sigma`` degrees.
    """
    return 10.0 * np.log10(received_power(cloud, beam_angle, ue, beam_sigma, reflection_gain))


def perimeter_point(s, half_side: float) -> np.ndarray:
    """Map arc length ``s`` to a point on the square perimeter.

    Arc length 0 is the middle of the eastern side; the loop runs
    counter-clockwise and has length ``8 * half_side``.
    """
    h = half_side
    side = 2 * h
    s = np.mod(np.asarray(s, dtype=np.float64), 4 * side)
    # shift so that 0 lands on the south-east corner
    t = np.mod(s + h, 4 * side)
    seg = np.minimum((t // side).astype(int), 3)
    u = t - seg * side
    x = np.select([seg == 0, seg == 1, seg == 2, seg == 3], [h + 0 * u, h - u, -h + 0 * u, -h + u])
    y = np.select([seg == 0, seg == 1, seg == 2, seg == 3], [-h + u, h + 0 * u, h - u, -h + 0 * u])
    return np.column_stack([x, y])


@dataclass(eq=False)
class BeamEnvironment:
    """MDP substrate: geometry, UE locations and their per-beam RSRP.

    ``rsrp_table`` covers the training path rows first, then the test
    locations. ``rsrp_norm`` is the min-max normalization of the whole table.
    """

    spec: EnvSpec
    cloud: PointCloud
    train_path: np.ndarray
    test_locations: np.ndarray
    rsrp_table: np.ndarray
    rsrp_norm: np.ndarray = field(init=False)
    locations: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.locations = np.vstack([self.train_path, self.test_locations])
        lo, hi = self.rsrp_table.min(), self.rsrp_table.max()
        if hi > lo:
            self.rsrp_norm = (self.rsrp_table - lo) / (hi - lo)
        else:
            self.rsrp_norm = np.ones_like(self.rsrp_table)

    @property
    def label(self) -> str:
        return self.cloud.label

    @property
    def n_beams(self) -> int:
        return len(self.spec.beam_angles)

    @property
    def n_train(self) -> int:
        return len(self.train_path)

    @property
    def test_indices(self) -> np.ndarray:
        return np.arange(self.n_train, self.n_train + len(self.test_locations))

    @property
    def train_indices(self) -> np.ndarray:
        return np.arange(self.n_train)


def rsrp_table_for(cloud: PointCloud, locations, spec: EnvSpec) -> np.ndarray:
    table = np.empty((len(locations), len(spec.beam_angles)))
    for i, ue in enumerate(locations):
        for b, angle in enumerate(spec.beam_angles):
            table[i, b] = compute_rsrp(cloud, angle, ue, spec.beam_sigma, spec.reflection_gain)
    return table


def build_environment(spec: EnvSpec, cloud: PointCloud, train_path, test_locations) -> BeamEnvironment:
    train_path = np.asarray(train_path, dtype=np.float64).reshape(-1, 2)
    test_locations = np.asarray(test_locations, dtype=np.float64).reshape(-1, 2)
    locations = np.vstack([train_path, test_locations])
    return BeamEnvironment(spec, cloud, train_path, test_locations, rsrp_table_for(cloud, locations, spec))


def generate_environment(spec: EnvSpec, label: str = "A") -> BeamEnvironment:
    """Draw a random environment from ``spec.seed``.

    The gNB is at the origin, scatterers are uniform inside the square but
    outside a 0.5 m disc around the gNB, the training path is a sorted set
    of random perimeter positions forming one loop, and test locations are
    uniform on the perimeter.
    """
    rng = np.random.default_rng(spec.seed)
    h = spec.half_side
    scatterers = []
    while len(scatterers) < spec.n_scatterers:
        p = rng.uniform(-h, h, size=2)
        if np.hypot(*p) > EXCLUSION_RADIUS:
            scatterers.append(p)
    cloud = PointCloud(np.vstack([np.zeros((1, 2))] + [np.reshape(s, (1, 2)) for s in scatterers]), label)
    loop = 8 * h
    train_s = np.sort(rng.uniform(0, loop, spec.n_train_locations))
    test_s = rng.uniform(0, loop, spec.n_test_locations)
    return build_environment(spec, cloud, perimeter_point(train_s, h), perimeter_point(test_s, h))


def derive_environment(base: BeamEnvironment, radius: float, seed: int, label: str) -> BeamEnvironment:
    """Perturb ``base``'s gNB and scatterers, keeping its UE locations."""
    cloud = perturb_cloud(base.cloud, radius, seed, label)
    return build_environment(base.spec, cloud, base.train_path, base.test_locations)


def best_beam(env: BeamEnvironment, location_index: int) -> int:
    """Index of the strongest beam at a location; ties go to the lowest index."""
    if not 0 <= location_index < len(env.rsrp_table):
        raise InvalidInputError(f"location index {location_index} out of range")
    return int(np.argmax(env.rsrp_table[location_index]))


@dataclass(frozen=True)
class Observation:
    ue_xy: tuple
    beam_onehot: tuple

    def as_array(self, dtype=np.float32) -> np.ndarray:
        return np.array(self.ue_xy + self.beam_onehot, dtype=dtype)


@dataclass(frozen=True)
class StepOutcome:
    next_obs: Observation
    reward: float
    done: bool
    rsrp_ratio: float


class EpisodeDoneError(RuntimeError):
    """Raised when stepping an episode that has already finished."""


def step_reward(env: BeamEnvironment, location: int, action: int, previous: int) -> float:
    angles = env.spec.beam_angles
    penalty = float(wrap_degrees(angles[action] - angles[previous])) / 90.0
    return 0.9 * float(env.rsrp_norm[location, action]) - 0.1 * penalty


def rsrp_ratio(env: BeamEnvironment, location: int, action: int) -> float:
    """Received power of the chosen beam over that of the best beam, in linear units."""
    row = env.rsrp_table[location]
    return float(10.0 ** ((row[action] - row.max()) / 10.0))


class Episode:
    """One pass over an ordered list of location indices.

    The observation at each step is the position of the location where the
    next beam must be chosen, together with the beam currently in use.
    """

    def __init__(self, env: BeamEnvironment, locations=None):
        self.env = env
        self.locations = np.asarray(env.train_indices if locations is None else locations, dtype=int)
        if len(self.locations) == 0:
            raise InvalidInputError("episode needs at least one location")
        self.position = 0
        self.beam = 0
        self.done = True

    def _observe(self, position: int, beam: int) -> Observation:
        h = self.env.spec.half_side
        xy = self.env.locations[self.locations[position]] / h
        onehot = [0.0] * self.env.n_beams
        onehot[beam] = 1.0
        return Observation((float(xy[0]), float(xy[1])), tuple(onehot))

    def reset(self, initial_beam: int = 0) -> Observation:
        if not 0 <= initial_beam < self.env.n_beams:
            raise InvalidInputError(f"beam index {initial_beam} out of range")
        self.position = 0
        self.beam = initial_beam
        self.done = False
        return self._observe(0, initial_beam)

    def step(self, action: int) -> StepOutcome:
        if self.done:
            raise EpisodeDoneError("step() called on a finished episode; call reset()")
        if not 0 <= action < self.env.n_beams:
            raise InvalidInputError(f"beam index {action} out of range")
        loc = int(self.locations[self.position])
        reward = step_reward(self.env, loc, action, self.beam)
        ratio = rsrp_ratio(self.env, loc, action)
        self.beam = action
        self.position += 1
        self.done = self.position == len(self.locations)
        next_position = self.position - 1 if self.done else self.position
        return StepOutcome(self._observe(next_position, action), reward, self.done, ratio)


def test_order(env: BeamEnvironment) -> np.ndarray:
    """Test location indices sorted by perimeter arc length."""
    xy = env.test_locations
    # bearing from the square's centre orders perimeter points by arc length
    ang = np.mod(np.arctan2(xy[:, 1], xy[:, 0]), 2 * np.pi)
    return env.test_indices[np.argsort(ang, kind="stable")]


def save_environment(env: BeamEnvironment, directory) -> None:
    """Write ``cloud.txt``, ``path.csv``, ``test.csv``, ``rsrp_table.csv`` and ``spec.cfg``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_cloud(env.cloud, directory / "cloud.txt")
    for name, pts in (("path.csv", env.train_path), ("test.csv", env.test_locations)):
        with open(directory / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y"])
            w.writerows([[repr(x), repr(y)] for x, y in pts.tolist()])
    with open(directory / "rsrp_table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"beam_{a:g}" for a in env.spec.beam_angles])
        w.writerows([[f"{v:.6f}" for v in row] for row in env.rsrp_table.tolist()])
    (directory / "spec.cfg").write_text(env.spec.to_config())


def load_environment(directory) -> BeamEnvironment:
    """Rebuild an environment from a directory written by :func:`save_environment`.

    The RSRP table is recomputed from the geometry rather than read back, so
    the loaded environment is bit-identical to the one that was saved.
    """
    directory = Path(directory)
    if not (directory / "cloud.txt").exists():
        raise InvalidInputError(f"{directory}: not an environment directory")
    spec = EnvSpec.from_mapping(read_config(directory / "spec.cfg"))
    cloud = load_cloud(directory / "cloud.txt")

    def read_points(name):
        with open(directory / name, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return np.array([[float(x), float(y)] for x, y in rows]).reshape(-1, 2)

    return build_environment(spec, cloud, read_points("path.csv"), read_points("test.csv"))
