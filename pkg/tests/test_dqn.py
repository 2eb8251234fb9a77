import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamtrl.dqn import (
    Arch,
    CorruptModelError,
    QNetwork,
    ReplayBuffer,
    TrainConfig,
    TrainHistory,
    Trainer,
    deserialize_weights,
    evaluate,
    evaluate_policy,
    fine_tune,
    forward,
    forward_batch,
    init_network,
    macop_count,
    reward_line,
    serialize_weights,
    td_loss_and_grads,
    td_targets,
    train,
)
from beamtrl.geometry import InvalidInputError
from beamtrl.simenv import best_beam


def quick_cfg(**kw):
    base = dict(episodes_max=6, batch_size=8, replay_capacity=500, target_sync_every=25, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def zero_net(arch=Arch()):
    return QNetwork(arch, [np.zeros((i, o), np.float32) for i, o in arch.layers],
                    [np.zeros(o, np.float32) for _, o in arch.layers])


def tiny_net(seed, arch=Arch(3, (5, 4), 2)):
    rng = np.random.default_rng(seed)
    return QNetwork(arch, [rng.normal(size=(i, o)) for i, o in arch.layers],
                    [rng.normal(scale=0.5, size=o) for _, o in arch.layers])


def test_default_parameter_count():
    assert Arch().n_params == 6 * 64 + 64 + 64 * 64 + 64 + 64 * 4 + 4 == 4868
    assert Arch().forward_macs == 4736


def test_init_is_seeded_glorot():
    a, b = init_network(Arch(), 4), init_network(Arch(), 4)
    assert a.equals(b)
    assert not a.equals(init_network(Arch(), 5))
    for (i, o), w, bias in zip(Arch().layers, a.weights, a.biases):
        assert w.dtype == np.float32
        assert np.abs(w).max() <= np.sqrt(6 / (i + o))
        assert not bias.any()


def test_forward_zero_and_bias_only():
    net = zero_net()
    np.testing.assert_array_equal(forward(net, np.ones(6)), np.zeros(4))
    net.biases[2][:] = [1, 2, 3, 4]
    np.testing.assert_array_equal(forward(net, np.ones(6)), [1, 2, 3, 4])


def test_forward_hand_worked_single_unit():
    arch = Arch(1, (1, 1), 1)
    f = np.float32
    net = QNetwork(arch, [np.array([[2.0]], f), np.array([[3.0]], f), np.array([[-1.5]], f)],
                   [np.array([-1.0], f), np.array([0.5], f), np.array([0.25], f)])
    # relu(1.5*2 - 1) = 2; relu(2*3 + 0.5) = 6.5; 6.5*-1.5 + 0.25 = -9.5
    assert forward(net, np.array([1.5]))[0] == pytest.approx(-9.5, abs=1e-6)
    # negative pre-activation is clipped: relu(-0.5*2 - 1) = 0 -> relu(0.5) -> -0.5
    assert forward(net, np.array([-0.5]))[0] == pytest.approx(-0.5, abs=1e-6)


def test_forward_rejects_wrong_width():
    with pytest.raises(InvalidInputError):
        forward(zero_net(), np.ones(5))


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_central_differences(seed):
    net = tiny_net(seed)
    rng = np.random.default_rng(100 + seed)
    obs = rng.normal(size=(7, 3))
    actions = rng.integers(0, 2, size=7)
    targets = rng.normal(size=7)
    _, grads = td_loss_and_grads(net, obs, actions, targets)
    h = 1e-3
    for p, g in zip(net.params, grads):
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + h
            up = td_loss_and_grads(net, obs, actions, targets)[0]
            p[idx] = keep - h
            down = td_loss_and_grads(net, obs, actions, targets)[0]
            p[idx] = keep
            num[idx] = (up - down) / (2 * h)
        rel = np.linalg.norm(g - num) / max(np.linalg.norm(g) + np.linalg.norm(num), 1e-12)
        assert rel < 1e-4


def test_td_targets_zero_bootstrap_at_terminal():
    net = zero_net()
    net.biases[2][:] = [0, 5, 1, 2]
    y = td_targets(net, np.array([1.0, 1.0]), np.zeros((2, 6), np.float32), np.array([0.0, 1.0]), 0.5)
    np.testing.assert_allclose(y, [1 + 0.5 * 5, 1.0])


def test_replay_buffer_fifo():
    buf = ReplayBuffer(3, 1)
    for k in range(5):
        buf.add([k], k, float(k), [k + 1], False)
        assert len(buf) <= 3
    order = buf.ordered_indices()
    assert buf.actions[order].tolist() == [2, 3, 4]
    assert buf.total_added == 5


@given(st.integers(1, 20), st.integers(0, 60))
def test_replay_buffer_keeps_latest(capacity, n):
    buf = ReplayBuffer(capacity, 2)
    for k in range(n):
        buf.add([k, k], k, 0.0, [k, k], False)
    assert len(buf) == min(n, capacity)
    assert buf.actions[buf.ordered_indices()].tolist() == list(range(max(0, n - capacity), n))


def test_target_equals_online_after_each_sync(small_env):
    cfg = quick_cfg(target_sync_every=7)
    trainer = Trainer(small_env, cfg, init_network(Arch(), 0))
    trainer.episode.reset(0)
    obs = trainer.episode._observe(0, 0).as_array()
    for _ in range(30):
        out = trainer.episode.step(trainer.act(obs, 0.5))
        trainer.buffer.add(obs, 0, out.reward, out.next_obs.as_array(), out.done)
        trainer.steps += 1
        trainer.learn()
        if trainer.steps % 7 == 0:
            assert trainer.target.equals(trainer.net)
        obs = out.next_obs.as_array()
    assert trainer.syncs == 30 // 7


def test_zero_episodes_returns_init(small_env):
    init = init_network(Arch(), 3)
    net, hist = train(small_env, quick_cfg(episodes_max=0), init)
    assert net.equals(init) and len(hist) == 0
    net, hist = fine_tune(init, small_env, quick_cfg(episodes_max=0))
    assert net.equals(init) and len(hist) == 0


def test_training_is_deterministic(small_env, tmp_path):
    init = init_network(Arch(), 3)
    a, ha = train(small_env, quick_cfg(), init)
    b, hb = train(small_env, quick_cfg(), init)
    assert a.equals(b)
    ha.to_csv(tmp_path / "a.csv")
    hb.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert init.equals(init_network(Arch(), 3))  # init untouched


def test_history_invariants(small_env, tmp_path):
    cfg = quick_cfg(episodes_max=8)
    _, hist = train(small_env, cfg, init_network(Arch(), 3))
    assert len(hist) == 8
    assert np.all(np.diff(hist.cumulative_mac) > 0)
    assert hist.cumulative_mac[-1] == macop_count(Arch(), 8 * small_env.n_train, cfg.batch_size)
    assert hist.epsilon == [cfg.epsilon(k) for k in range(8)]
    hist.to_csv(tmp_path / "h.csv")
    head = (tmp_path / "h.csv").read_text().splitlines()[0]
    assert head.startswith("episode,total_reward,rsrp_ratio,epsilon,cumulative_mac")


def test_stops_at_reward_line(small_env):
    cfg = quick_cfg(episodes_max=30)
    _, hist = train(small_env, cfg, init_network(Arch(), 3), reward_line=-1e9)
    assert len(hist) == 1


def test_trailing_mean_and_line():
    h = TrainHistory(total_reward=[0] * 6, greedy_reward=[1, 3, 5, 7, 9, 11])
    np.testing.assert_allclose(h.trailing_mean(), [1, 2, 3, 4, 5, 7])
    assert h.best_trailing_mean() == 7
    assert reward_line(h, 0.5) == 3.5
    assert h.episodes_to_line(4) == 4
    assert h.episodes_to_line(100) is None


def test_epsilon_schedule():
    cfg = TrainConfig()
    assert cfg.epsilon(0) == 1.0
    assert cfg.epsilon(1) == pytest.approx(0.97)
    assert cfg.epsilon(10_000) == 0.05
    with pytest.raises(InvalidInputError):
        TrainConfig(epsilon_start=0.1, epsilon_end=0.2)
    with pytest.raises(InvalidInputError):
        TrainConfig(gamma=1.5)


def test_fine_tune_lowers_exploration(small_env):
    _, hist = fine_tune(init_network(Arch(), 0), small_env, quick_cfg(episodes_max=3))
    assert hist.epsilon[0] == pytest.approx(0.2)


def test_fine_tune_arch_mismatch(small_env):
    with pytest.raises(InvalidInputError):
        fine_tune(init_network(Arch(5, (8, 8), 3), 0), small_env, quick_cfg())


def test_fine_tune_on_own_environment_not_slower(small_env):
    cfg = quick_cfg(episodes_max=40)
    net, ref = train(small_env, cfg, init_network(Arch(), 2))
    line = reward_line(ref, 0.95)
    _, scratch = train(small_env, cfg, init_network(Arch(), 2), reward_line=line)
    _, ft = fine_tune(net, small_env, cfg, reward_line=line)
    assert len(ft) <= len(scratch)


def test_macop_examples():
    assert macop_count(Arch(), 1, 0) == 4736
    assert macop_count(Arch(), 0, 32) == 0
    per_episode = 200
    assert macop_count(Arch(), 160 * per_episode, 32) == 16 * macop_count(Arch(), 10 * per_episode, 32)


def test_evaluate_oracle_is_one(small_env):
    order_ratio = evaluate_policy(lambda obs: 0, small_env)
    assert order_ratio < 1.0

    by_xy = {tuple(np.round(small_env.locations[i] / 3, 12)): best_beam(small_env, i) for i in small_env.test_indices}

    def oracle(obs):
        return by_xy[tuple(np.round(obs.ue_xy, 12))]

    assert evaluate_policy(oracle, small_env) == 1.0


def test_evaluate_affine_invariance(small_env):
    net = init_network(Arch(), 8)
    base = evaluate(net, small_env)
    scaled = net.copy()
    scaled.weights[2] *= np.float32(2.0)
    scaled.biases[2] = scaled.biases[2] * np.float32(2.0) + np.float32(3.0)
    assert evaluate(scaled, small_env) == base
    assert 0.0 <= base <= 1.0


def test_evaluate_rejects_empty(small_env):
    with pytest.raises(InvalidInputError):
        evaluate(init_network(Arch(), 0), small_env, locations=[])


def test_blob_size_and_layout():
    net = init_network(Arch(), 0)
    blob = serialize_weights(net)
    assert len(blob) == 4 + 4 + 12 + 4868 * 4 == 19492
    assert struct.unpack_from("<4sIIII", blob) == (b"BQN1", 1, 6, 64, 64)
    first = np.frombuffer(blob, "<f4", count=64, offset=20)
    np.testing.assert_array_equal(first, net.weights[0][0])


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9))
def test_blob_round_trip_bit_exact(seed, i, h1, h2, o):
    net = init_network(Arch(i, (h1, h2), o), seed)
    net.biases[1][:] = np.random.default_rng(seed).normal(size=h2).astype(np.float32)
    back = deserialize_weights(serialize_weights(net))
    assert back.arch == net.arch
    for a, b in zip(net.params, back.params):
        assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b[:-3],
    lambda b: b[:10],
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 2) + b[8:],
    lambda b: b[:8] + struct.pack("<I", 0) + b[12:],
    lambda b: b[:-4] + struct.pack("<f", float("nan")),
])
def test_corrupt_blobs_rejected(mutate):
    with pytest.raises(CorruptModelError):
        deserialize_weights(mutate(serialize_weights(init_network(Arch(), 0))))


def test_forward_batch_matches_single(small_env):
    net = init_network(Arch(), 1)
    x = np.random.default_rng(0).normal(size=(5, 6)).astype(np.float32)
    q, _ = forward_batch(net, x)
    for row, xi in zip(q, x):
        np.testing.assert_allclose(row, forward(net, xi), rtol=1e-5, atol=1e-6)
