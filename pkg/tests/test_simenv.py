import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamtrl.geometry import InvalidInputError, PointCloud, chamfer_distance, perturb_cloud
from beamtrl.simenv import (
    BeamEnvironment,
    EnvSpec,
    Episode,
    EpisodeDoneError,
    best_beam,
    build_environment,
    compute_rsrp,
    derive_environment,
    generate_environment,
    load_environment,
    perimeter_point,
    read_config,
    rsrp_ratio,
    save_environment,
    step_reward,
    test_order as bearing_order,
    wrap_degrees,
)

from conftest import cloud

GNB_ONLY = cloud((0, 0), label="bare")


def rsrp_oracle(points, beam, ue, sigma=30.0, refl=0.3):
    """Independent scalar evaluation of the two-path power sum."""
    gx, gy = points[0]

    def gain(dx, dy):
        off = (math.degrees(math.atan2(dy, dx)) - beam) % 360.0
        off = min(off, 360.0 - off)
        return math.exp(-off * off / (2 * sigma * sigma))

    p = gain(ue[0] - gx, ue[1] - gy) / ((ue[0] - gx) ** 2 + (ue[1] - gy) ** 2)
    for sx, sy in points[1:]:
        hop = math.dist((gx, gy), (sx, sy)) + math.dist((sx, sy), ue)
        p += refl * gain(sx - gx, sy - gy) / hop**2
    return 10 * math.log10(p)


def tiny_env(table):
    """Environment with a hand-written RSRP table, one train location per row."""
    table = np.asarray(table, dtype=float)
    n = len(table)
    spec = EnvSpec(n_train_locations=n, n_test_locations=0, n_scatterers=0)
    path = perimeter_point(np.linspace(0, 20, n), spec.half_side)
    return BeamEnvironment(spec, GNB_ONLY, path, np.zeros((0, 2)), table)


def test_boresight_unit_distance_is_zero_db():
    assert compute_rsrp(GNB_ONLY, 0.0, (1.0, 0.0)) == pytest.approx(0.0, abs=1e-12)


def test_boresight_three_metres():
    assert compute_rsrp(GNB_ONLY, 0.0, (3.0, 0.0)) == pytest.approx(10 * math.log10(1 / 9), abs=1e-12)
    assert compute_rsrp(GNB_ONLY, 90.0, (0.0, 3.0)) == pytest.approx(-9.5424, abs=1e-4)


def test_scatterer_adds_power():
    with_s = cloud((0, 0), (1, 1))
    for ue in [(3, 0), (0, -3), (-3, 2)]:
        for beam in (0, 90, 180, 270):
            assert compute_rsrp(with_s, beam, ue) > compute_rsrp(GNB_ONLY, beam, ue)


def test_ue_on_gnb_rejected():
    with pytest.raises(InvalidInputError):
        compute_rsrp(GNB_ONLY, 0.0, (0.0, 0.0))


def test_rsrp_matches_scalar_oracle():
    env = generate_environment(EnvSpec(n_train_locations=10, n_test_locations=5, seed=11))
    pts = env.cloud.points.tolist()
    for row, ue in enumerate(env.locations):
        for b, angle in enumerate(env.spec.beam_angles):
            assert env.rsrp_table[row, b] == pytest.approx(rsrp_oracle(pts, angle, ue), abs=1e-10)


@given(st.floats(0.1, 50), st.floats(0.1, 50))
def test_rsrp_monotone_in_los_distance(d1, d2):
    near, far = sorted((d1, d2))
    assert compute_rsrp(GNB_ONLY, 0.0, (near, 0.0)) >= compute_rsrp(GNB_ONLY, 0.0, (far, 0.0))


def test_wrap_degrees():
    assert wrap_degrees(0) == 0
    assert wrap_degrees(270) == 90
    assert wrap_degrees(-180) == 180
    assert wrap_degrees(450) == 90


def test_perimeter_point_origin_and_loop():
    h = 3.0
    np.testing.assert_allclose(perimeter_point([0.0, 3.0, 9.0, 15.0, 21.0, 24.0], h),
                               [[3, 0], [3, 3], [-3, 3], [-3, -3], [3, -3], [3, 0]], atol=1e-12)


@given(st.floats(0, 200))
def test_perimeter_point_on_square(s):
    x, y = perimeter_point(s, 3.0)[0]
    assert max(abs(x), abs(y)) == pytest.approx(3.0, abs=1e-9)


def test_generate_environment_layout():
    spec = EnvSpec(seed=5)
    env = generate_environment(spec)
    assert env.cloud.points.shape == (6, 2)
    np.testing.assert_array_equal(env.cloud.gnb, [0, 0])
    assert np.all(np.abs(env.cloud.scatterers) <= 3)
    assert np.all(np.hypot(*env.cloud.scatterers.T) > 0.5)
    assert len(env.train_path) == 200 and len(env.test_locations) == 100
    for xy in np.vstack([env.train_path, env.test_locations]):
        assert np.max(np.abs(xy)) == pytest.approx(3.0, abs=1e-9)
    # path is a single counter-clockwise loop
    ang = np.unwrap(np.arctan2(env.train_path[:, 1], env.train_path[:, 0]))
    assert np.all(np.diff(ang) >= 0)
    assert ang[-1] - ang[0] < 2 * np.pi


def test_no_scatterers_gives_gnb_only():
    env = generate_environment(EnvSpec(n_scatterers=0, n_train_locations=5, n_test_locations=5))
    assert len(env.cloud) == 1


def test_generation_is_deterministic():
    a = generate_environment(EnvSpec(seed=9))
    b = generate_environment(EnvSpec(seed=9))
    assert a.cloud == b.cloud
    for attr in ("train_path", "test_locations", "rsrp_table", "rsrp_norm"):
        assert getattr(a, attr).tobytes() == getattr(b, attr).tobytes()
    assert generate_environment(EnvSpec(seed=10)).cloud != a.cloud


def test_rsrp_norm_spans_unit_interval(small_env):
    assert small_env.rsrp_norm.min() == 0.0
    assert small_env.rsrp_norm.max() == 1.0


def test_b_closer_than_c_over_20_seeds():
    for seed in range(20):
        a = generate_environment(EnvSpec(seed=seed, n_train_locations=4, n_test_locations=0))
        b = derive_environment(a, 0.25, seed + 1000, "B")
        c = derive_environment(a, 2.0, seed + 2000, "C")
        np.testing.assert_array_equal(b.train_path, a.train_path)
        assert chamfer_distance(a.cloud, b.cloud) < chamfer_distance(a.cloud, c.cloud)


def test_best_beam_east_midpoint():
    spec = EnvSpec(n_scatterers=0, n_train_locations=1, n_test_locations=0)
    env = build_environment(spec, GNB_ONLY, [(3.0, 0.0)], [])
    assert best_beam(env, 0) == 0


def test_best_beam_tie_and_range():
    env = tiny_env([[1, 1, 1, 1], [0, 2, 2, 1]])
    assert best_beam(env, 0) == 0
    assert best_beam(env, 1) == 1
    with pytest.raises(InvalidInputError):
        best_beam(env, 2)


def test_best_beam_is_linear_scan(small_env):
    for i, row in enumerate(small_env.rsrp_table):
        best = 0
        for b in range(len(row)):
            if row[b] > row[best]:
                best = b
        assert best_beam(small_env, i) == best


def test_reset_observation():
    spec = EnvSpec(n_scatterers=0, n_train_locations=3, n_test_locations=0)
    env = build_environment(spec, GNB_ONLY, [(3.0, 1.5), (0, 3.0), (-3, 0)], [])
    ep = Episode(env)
    obs = ep.reset(2)
    assert obs.beam_onehot == (0, 0, 1, 0)
    assert obs.ue_xy == (1.0, 0.5)
    assert ep.reset(2) == obs
    with pytest.raises(InvalidInputError):
        ep.reset(4)


def test_reward_examples():
    env = tiny_env([[0, 10, 0, 0], [0, 5, 10, 0], [10, 5, 0, 0]])
    # row 0 normalizes to (0, 1, 0, 0); row 1 beam 1 is 0.5
    assert step_reward(env, 0, 1, 1) == pytest.approx(0.9)
    assert step_reward(env, 1, 1, 0) == pytest.approx(0.35)
    assert step_reward(env, 0, 0, 2) == pytest.approx(-0.2)
    assert step_reward(env, 0, 1, 3) == pytest.approx(0.9 - 0.2)


def test_rsrp_ratio_is_linear_power():
    env = tiny_env([[0.0, -3.0, -10.0, -20.0]])
    assert rsrp_ratio(env, 0, 0) == 1.0
    assert rsrp_ratio(env, 0, 2) == pytest.approx(0.1)
    assert rsrp_ratio(env, 0, 3) == pytest.approx(0.01)


def test_episode_runs_full_path(small_env):
    ep = Episode(small_env)
    ep.reset(0)
    rng = np.random.default_rng(0)
    outcomes = []
    while not ep.done:
        outcomes.append(ep.step(int(rng.integers(4))))
    assert len(outcomes) == small_env.n_train
    assert [o.done for o in outcomes] == [False] * (small_env.n_train - 1) + [True]
    with pytest.raises(EpisodeDoneError):
        ep.step(0)


@settings(max_examples=50)
@given(st.lists(st.integers(0, 3), min_size=40, max_size=40), st.integers(0, 3))
def test_reward_and_ratio_bounds(small_env, actions, start):
    ep = Episode(small_env)
    ep.reset(start)
    for a in actions:
        out = ep.step(a)
        assert -0.2 <= out.reward <= 0.9
        assert 0.0 <= out.rsrp_ratio <= 1.0
        loc = ep.locations[ep.position - 1]
        is_best = small_env.rsrp_table[loc, a] == small_env.rsrp_table[loc].max()
        assert (out.rsrp_ratio == 1.0) == is_best
        assert sum(out.next_obs.beam_onehot) == 1.0


def test_bearing_order_covers_test_set(small_env):
    order = bearing_order(small_env)
    assert sorted(order.tolist()) == small_env.test_indices.tolist()


def test_environment_directory_round_trip(tmp_path, small_env):
    save_environment(small_env, tmp_path / "env")
    names = sorted(p.name for p in (tmp_path / "env").iterdir())
    assert {"path.csv", "rsrp_table.csv", "cloud.txt"} <= set(names)
    back = load_environment(tmp_path / "env")
    assert back.cloud == small_env.cloud
    np.testing.assert_array_equal(back.train_path, small_env.train_path)
    np.testing.assert_array_equal(back.rsrp_table, small_env.rsrp_table)
    rows = (tmp_path / "env" / "rsrp_table.csv").read_text().splitlines()
    assert len(rows) - 1 == len(small_env.locations)
    assert all(len(v.split(".")[1]) == 6 for v in rows[1].split(",")[-4:])


def test_read_config(tmp_path):
    p = tmp_path / "env.cfg"
    p.write_text("# comment\nsquare-side = 8\nseed = 4  # trailing\n\nbeam_angles = 0, 120, 240\n")
    spec = EnvSpec.from_mapping(read_config(p))
    assert spec.square_side == 8 and spec.seed == 4
    assert tuple(spec.beam_angles) == (0, 120, 240)


@pytest.mark.parametrize("bad", [{"square_side": 0}, {"beam_angles": (0, 0, 90)}, {"beam_angles": (0, 360)}])
def test_invalid_spec(bad):
    with pytest.raises(InvalidInputError):
        EnvSpec(**bad)


def test_perturbed_gnb_moves_with_cloud():
    base = PointCloud(np.array([[0.0, 0.0], [1.0, 1.0]]), "A")
    moved = perturb_cloud(base, 0.25, 1)
    assert not np.array_equal(moved.gnb, base.gnb)
