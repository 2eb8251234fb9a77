"""Numpy deep Q-network for beam selection.

The Q-function is a three-layer perceptron (two ReLU hidden layers, linear
output) stored in float32. Training is textbook DQN: epsilon-greedy
rollouts, a FIFO replay buffer, plain SGD on the squared TD error and a
periodically synchronized target network.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import InvalidInputError
from .simenv import BeamEnvironment, Episode, test_order

MAGIC = b"BQN1"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIII")
FINETUNE_EPSILON = 0.2
TRAILING_WINDOW = 5


class CorruptModelError(ValueError):
    """Raised when a weight blob cannot be decoded."""


@dataclass(frozen=True)
class Arch:
    input_dim: int = 6
    hidden: tuple = (64, 64)
    output_dim: int = 4

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) != 2:
            raise InvalidInputError("the Q-network has exactly two hidden layers")
        if min(self.input_dim, self.output_dim, *self.hidden) < 1:
            raise InvalidInputError("all layer widths must be >= 1")

    @classmethod
    def for_env(cls, env: BeamEnvironment, hidden=(64, 64)) -> "Arch":
        return cls(2 + env.n_beams, hidden, env.n_beams)

    @property
    def layers(self) -> list:
        sizes = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layers)

    @property
    def forward_macs(self) -> int:
        return sum(i * o for i, o in self.layers)


@dataclass(eq=False)
class QNetwork:
    """Weights are stored as ``(fan_in, fan_out)`` so a layer is ``x @ W + b``."""

    arch: Arch
    weights: list
    biases: list

    def __post_init__(self):
        for (i, o), w, b in zip(self.arch.layers, self.weights, self.biases, strict=True):
            if w.shape != (i, o) or b.shape != (o,):
                raise InvalidInputError(f"parameter shapes {w.shape}, {b.shape} do not match layer {i}->{o}")

    @property
    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self) -> "QNetwork":
        return QNetwork(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "QNetwork":
        return QNetwork(self.arch, [w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward_batch(self, x)[0]

    def equals(self, other: "QNetwork") -> bool:
        return self.arch == other.arch and all(
            a.dtype == b.dtype and np.array_equal(a, b) for a, b in zip(self.params, other.params)
        )

    def digest(self) -> str:
        return hashlib.sha256(serialize_weights(self)).hexdigest()


def init_network(arch: Arch, seed: int) -> QNetwork:
    """Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for i, o in arch.layers:
        limit = np.sqrt(6.0 / (i + o))
        weights.append(rng.uniform(-limit, limit, size=(i, o)).astype(np.float32))
        biases.append(np.zeros(o, dtype=np.float32))
    return QNetwork(arch, weights, biases)


def forward_batch(net: QNetwork, x: np.ndarray):
    """Q-values for a batch of observations, plus the hidden activations."""
    x = np.atleast_2d(x)
    if x.shape[1] != net.arch.input_dim:
        raise InvalidInputError(f"observation width {x.shape[1]} != network input {net.arch.input_dim}")
    w1, w2, w3 = net.weights
    b1, b2, b3 = net.biases
    h1 = np.maximum(x @ w1 + b1, 0)
    h2 = np.maximum(h1 @ w2 + b2, 0)
    return h2 @ w3 + b3, (x, h1, h2)


def forward(net: QNetwork, obs) -> np.ndarray:
    x = obs.as_array(net.dtype) if hasattr(obs, "as_array") else np.asarray(obs, dtype=net.dtype)
    if x.ndim != 1:
        raise InvalidInputError("forward() takes a single observation; use forward_batch for batches")
    return forward_batch(net, x)[0][0]


def td_targets(target_net: QNetwork, rewards, next_obs, dones, gamma: float) -> np.ndarray:
    q_next = forward_batch(target_net, next_obs)[0]
    dtype = target_net.dtype
    return rewards.astype(dtype) + dtype.type(gamma) * (1 - dones.astype(dtype)) * q_next.max(axis=1)


def td_loss_and_grads(net: QNetwork, obs, actions, targets):
    """Loss ``mean(0.5 * (Q(s, a) - y)^2)`` and its gradient for every parameter.

    Gradients come back in the same order as ``net.params``.
    """
    q, (x, h1, h2) = forward_batch(net, obs)
    n = q.shape[0]
    rows = np.arange(n)
    err = q[rows, actions] - targets
    loss = 0.5 * float(np.mean(err.astype(np.float64) ** 2))
    dq = np.zeros_like(q)
    dq[rows, actions] = err / q.dtype.type(n)
    w1, w2, w3 = net.weights
    gw3 = h2.T @ dq
    gb3 = dq.sum(axis=0)
    dh2 = (dq @ w3.T) * (h2 > 0)
    gw2 = h1.T @ dh2
    gb2 = dh2.sum(axis=0)
    dh1 = (dh2 @ w2.T) * (h1 > 0)
    gw1 = x.T @ dh1
    gb1 = dh1.sum(axis=0)
    return loss, [gw1, gb1, gw2, gb2, gw3, gb3]


def sgd_update(net: QNetwork, grads, lr: float) -> None:
    step = net.dtype.type(lr)
    for p, g in zip(net.params, grads):
        p -= step * g


class ReplayBuffer:
    """Fixed-capacity ring buffer; once full, the oldest transition is overwritten."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise InvalidInputError("replay capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=np.float32)
        self._next = 0
        self._size = 0
        self.total_added = 0

    def __len__(self) -> int:
        return self._size

    def add(self, obs, action, reward, next_obs, done) -> None:
        i = self._next
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.dones[i] = float(done)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.total_added += 1

    def ordered_indices(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        start = self._next if self._size == self.capacity else 0
        return (start + np.arange(self._size)) % self.capacity

    def sample(self, rng: np.random.Generator, batch_size: int):
        idx = rng.integers(0, self._size, size=batch_size)
        return self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx]


@dataclass
class TrainConfig:
    episodes_max: int = 200
    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay: float = 0.97
    replay_capacity: int = 10000
    batch_size: int = 32
    learning_rate: float = 1e-2
    target_sync_every: int = 200
    seed: int = 0
    stop_at_reward_fraction: float | None = 0.95

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise InvalidInputError("gamma must lie in [0, 1]")
        if self.epsilon_end > self.epsilon_start:
            raise InvalidInputError("epsilon_end must not exceed epsilon_start")
        if self.episodes_max < 0 or self.batch_size < 0 or self.target_sync_every < 1:
            raise InvalidInputError("episode, batch and sync counts out of range")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")

    def epsilon(self, episode: int) -> float:
        return max(self.epsilon_end, self.epsilon_start * self.epsilon_decay**episode)


@dataclass
class TrainHistory:
    total_reward: list = field(default_factory=list)
    rsrp_ratio: list = field(default_factory=list)
    epsilon: list = field(default_factory=list)
    cumulative_mac: list = field(default_factory=list)
    greedy_reward: list = field(default_factory=list)
    reward_line: float | None = None
    best_episode: int | None = None

    def __len__(self) -> int:
        return len(self.total_reward)

    def trailing_mean(self, window: int = TRAILING_WINDOW, key: str = "greedy_reward") -> np.ndarray:
        """Mean of the last ``window`` values of ``key`` at every episode (shorter at the start)."""
        r = np.asarray(getattr(self, key), dtype=np.float64)
        c = np.concatenate([[0.0], np.cumsum(r)])
        idx = np.arange(1, len(r) + 1)
        lo = np.maximum(idx - window, 0)
        return (c[idx] - c[lo]) / (idx - lo)

    def best_trailing_mean(self, window: int = TRAILING_WINDOW, key: str = "greedy_reward") -> float:
        if not self.total_reward:
            raise InvalidInputError("empty history")
        return float(self.trailing_mean(window, key).max())

    def episodes_to_line(self, line: float, window: int = TRAILING_WINDOW, key: str = "greedy_reward") -> int | None:
        """1-based episode at which the trailing mean of ``key`` first reaches ``line``."""
        hits = np.nonzero(self.trailing_mean(window, key) >= line)[0]
        return int(hits[0]) + 1 if len(hits) else None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "total_reward", "rsrp_ratio", "epsilon", "cumulative_mac", "greedy_reward"])
            rows = zip(self.total_reward, self.rsrp_ratio, self.epsilon, self.cumulative_mac, self.greedy_reward)
            for k, (r, ratio, eps, mac, greedy) in enumerate(rows, 1):
                w.writerow([k, f"{r:.6f}", f"{ratio:.6f}", f"{eps:.6f}", mac, f"{greedy:.6f}"])


def reward_line(reference: TrainHistory, fraction: float, key: str = "greedy_reward") -> float:
    """Absolute reward threshold: ``fraction`` of the best trailing mean of a reference run."""
    return fraction * reference.best_trailing_mean(key=key)


def greedy_return(net: QNetwork, env: BeamEnvironment, initial_beam: int = 0) -> float:
    """Total reward of one exploration-free pass along the training path."""
    episode = Episode(env)
    obs = episode.reset(initial_beam)
    total = 0.0
    while not episode.done:
        out = episode.step(int(np.argmax(forward(net, obs))))
        total += out.reward
        obs = out.next_obs
    return total


def macop_count(arch: Arch, steps: int, batch_size: int) -> int:
    """Multiply-accumulates spent by ``steps`` DQN steps.

    Each step runs one forward pass to pick the action and, per batch sample,
    an online forward, a target forward and a backward pass, the three
    together costed at three forwards.
    """
    return steps * arch.forward_macs * (1 + 3 * batch_size)


def _check_arch(net: QNetwork, env: BeamEnvironment) -> None:
    if net.arch.input_dim != 2 + env.n_beams or net.arch.output_dim != env.n_beams:
        raise InvalidInputError(
            f"network {net.arch.input_dim}->{net.arch.output_dim} incompatible with {env.n_beams}-beam environment"
        )


class Trainer:
    """Mutable state of one DQN run: online and target networks, replay buffer, RNG."""

    def __init__(self, env: BeamEnvironment, cfg: TrainConfig, init: QNetwork):
        _check_arch(init, env)
        self.env, self.cfg = env, cfg
        self.net = init.copy()
        self.target = self.net.copy()
        self.rng = np.random.default_rng(cfg.seed)
        self.buffer = ReplayBuffer(cfg.replay_capacity, init.arch.input_dim)
        self.episode = Episode(env)
        self.steps = 0
        self.syncs = 0

    def act(self, obs: np.ndarray, eps: float) -> int:
        if self.rng.random() < eps:
            return int(self.rng.integers(self.env.n_beams))
        return int(np.argmax(forward_batch(self.net, obs)[0][0]))

    def learn(self) -> None:
        cfg = self.cfg
        if cfg.batch_size and len(self.buffer) >= cfg.batch_size:
            s, a, r, s2, d = self.buffer.sample(self.rng, cfg.batch_size)
            y = td_targets(self.target, r, s2, d, cfg.gamma)
            _, grads = td_loss_and_grads(self.net, s, a, y)
            sgd_update(self.net, grads, cfg.learning_rate)
        if self.steps % cfg.target_sync_every == 0:
            self.target = self.net.copy()
            self.syncs += 1

    def run_episode(self, eps: float) -> tuple:
        """One epsilon-greedy pass along the path; returns (total reward, mean RSRP ratio)."""
        obs = self.episode.reset(int(self.rng.integers(self.env.n_beams))).as_array()
        total, ratios = 0.0, 0.0
        done = False
        while not done:
            action = self.act(obs, eps)
            out = self.episode.step(action)
            next_obs = out.next_obs.as_array()
            done = out.done
            self.buffer.add(obs, action, out.reward, next_obs, done)
            total += out.reward
            ratios += out.rsrp_ratio
            obs = next_obs
            self.steps += 1
            self.learn()
        return total, ratios / len(self.episode.locations)


def train(env: BeamEnvironment, cfg: TrainConfig, init: QNetwork, reward_line: float | None = None):
    """Run DQN on the environment's training path.

    One episode is a full pass along the path. After every episode the
    greedy policy is replayed once without exploration; the network with the
    highest greedy return is what gets returned. Stops after
    ``cfg.episodes_max`` episodes, or earlier once the trailing mean greedy
    return reaches ``reward_line`` (when given). ``init`` is left untouched.
    """
    trainer = Trainer(env, cfg, init)
    history = TrainHistory(reward_line=reward_line)
    best, best_return = trainer.net, -np.inf
    for ep in range(cfg.episodes_max):
        eps = cfg.epsilon(ep)
        total, ratio = trainer.run_episode(eps)
        history.total_reward.append(total)
        history.rsrp_ratio.append(ratio)
        history.epsilon.append(eps)
        history.cumulative_mac.append(macop_count(init.arch, trainer.steps, cfg.batch_size))
        history.greedy_reward.append(greedy_return(trainer.net, env))
        if history.greedy_reward[-1] > best_return:
            best, best_return = trainer.net.copy(), history.greedy_reward[-1]
            history.best_episode = ep + 1
        if reward_line is not None and history.trailing_mean()[-1] >= reward_line:
            break
    return best, history


def fine_tune(pretrained: QNetwork, env: BeamEnvironment, cfg: TrainConfig, reward_line: float | None = None):
    """Continue training ``pretrained`` on ``env`` with exploration starting at 0.2."""
    _check_arch(pretrained, env)
    start = min(cfg.epsilon_start, FINETUNE_EPSILON)
    return train(env, replace(cfg, epsilon_start=start, epsilon_end=min(cfg.epsilon_end, start)),
                 pretrained, reward_line)


def greedy_policy(net: QNetwork):
    return lambda obs: int(np.argmax(forward(net, obs)))


def evaluate_policy(policy, env: BeamEnvironment, locations=None, initial_beam: int = 0) -> float:
    """Mean RSRP ratio of ``policy`` rolled out over ``locations``.

    ``policy`` maps an :class:`~beamtrl.simenv.Observation` to a beam index.
    Defaults to the test locations in perimeter order.
    """
    locations = test_order(env) if locations is None else np.asarray(locations, dtype=int)
    if len(locations) == 0:
        raise InvalidInputError("evaluation needs at least one location")
    episode = Episode(env, locations)
    obs = episode.reset(initial_beam)
    ratios = []
    done = False
    while not done:
        out = episode.step(policy(obs))
        ratios.append(out.rsrp_ratio)
        obs, done = out.next_obs, out.done
    return float(np.mean(ratios))


def evaluate(net: QNetwork, env: BeamEnvironment, locations=None) -> float:
    """Greedy mean RSRP ratio (chosen over best beam) on the test locations."""
    _check_arch(net, env)
    return evaluate_policy(greedy_policy(net), env, locations)


def serialize_weights(net: QNetwork) -> bytes:
    """Encode ``net`` as a little-endian binary blob.

    Layout: 4-byte magic, uint32 version, uint32 input width, uint32 width
    of each hidden layer, then W1, b1, W2, b2, W3, b3 as float32, each
    matrix row-major in ``(fan_in, fan_out)`` order. The output width is
    implied by the payload length.
    """
    a = net.arch
    head = HEADER.pack(MAGIC, FORMAT_VERSION, a.input_dim, *a.hidden)
    body = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.params)
    return head + body


def deserialize_weights(blob: bytes) -> QNetwork:
    if len(blob) < HEADER.size:
        raise CorruptModelError(f"blob too short for header ({len(blob)} bytes)")
    magic, version, n_in, h1, h2 = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptModelError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptModelError(f"unsupported format version {version}")
    body = len(blob) - HEADER.size
    if min(n_in, h1, h2) < 1 or body % 4:
        raise CorruptModelError("invalid dimensions or payload length")
    rest = body // 4 - (n_in * h1 + h1 + h1 * h2 + h2)
    if rest <= 0 or rest % (h2 + 1):
        raise CorruptModelError(f"payload of {body} bytes does not fit a {n_in}-{h1}-{h2}-k network")
    arch = Arch(n_in, (h1, h2), rest // (h2 + 1))
    flat = np.frombuffer(blob, dtype="<f4", offset=HEADER.size).astype(np.float32)
    if not np.all(np.isfinite(flat)):
        raise CorruptModelError("non-finite parameters")
    weights, biases, pos = [], [], 0
    for i, o in arch.layers:
        weights.append(flat[pos:pos + i * o].reshape(i, o).copy())
        pos += i * o
        biases.append(flat[pos:pos + o].copy())
        pos += o
    return QNetwork(arch, weights, biases)
