"""Reproduction pipelines behind the command-line tool.

Every pipeline reads and writes plain files under ``RunConfig.out`` so the
commands compose through the filesystem. All randomness is derived from the
run's seed list, and per-seed results are assembled in seed order, so a
rerun with the same config produces byte-identical CSVs.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dqn import (
    Arch,
    QNetwork,
    TrainConfig,
    deserialize_weights,
    evaluate,
    fine_tune,
    init_network,
    macop_count,
    reward_line,
    serialize_weights,
    train,
)
from .geometry import InvalidInputError, PointCloud, chamfer_distance, load_cloud
from .layout import LayoutParams, build_distance_map, kamada_kawai, save_distance_map, save_layout
from .registry import GnbNode, ScenarioReport, run_onboarding_scenario
from .simenv import EnvSpec, derive_environment, generate_environment, load_environment, read_config, save_environment

log = logging.getLogger(__name__)

ENV_NAMES = ("A", "B", "C")

# purpose tags for derived seeds
_B_NOISE, _C_NOISE, _INIT_A, _INIT_B, _TRAIN_A, _TRAIN_B, _TUNE_B, _DEMO = range(1, 9)


def derived_seed(seed: int, purpose: int) -> int:
    return int(np.random.SeedSequence([seed, purpose]).generate_state(1)[0])


@dataclass
class RunConfig:
    out: Path = Path("runs")
    seeds: tuple = (0, 1, 2, 3, 4)
    env: EnvSpec = field(default_factory=EnvSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    radius_b: float = 0.25
    radius_c: float = 2.0
    stop_fraction: float = 0.95
    demo_episodes: int = 80
    layout_iterations: int = 2000
    transport: str = "tcp"
    restart_central: bool = True

    def __post_init__(self):
        self.out = Path(self.out)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise InvalidInputError("seed list must not be empty")

    @classmethod
    def from_values(cls, values: dict) -> "RunConfig":
        """Build from flat ``key -> str`` settings; unknown keys are rejected."""
        env_keys = {f.name for f in fields(EnvSpec)} - {"seed"}
        train_keys = {f.name for f in fields(TrainConfig)} - {"seed"}
        own = {f.name: f for f in fields(cls)}
        env_vals, train_vals, kwargs = {}, {}, {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key in env_keys:
                env_vals[key] = raw
            elif key in train_keys:
                train_vals[key] = raw
            elif key == "seeds":
                kwargs["seeds"] = parse_seeds(raw) if isinstance(raw, str) else tuple(raw)
            elif key in own and key not in ("env", "train"):
                kwargs[key] = _coerce(key, raw)
            else:
                raise InvalidInputError(f"unknown config key {key!r}")
        env = EnvSpec.from_mapping(env_vals)
        train_cfg = TrainConfig(**{k: _train_value(k, v) for k, v in train_vals.items()})
        return cls(env=env, train=train_cfg, **kwargs)

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        values = read_config(path) if path else {}
        values.update(overrides or {})
        return cls.from_values(values)

    def env_dir(self, seed: int, name: str | None = None) -> Path:
        d = self.out / "envs" / f"seed{seed}"
        return d / name if name else d

    def model_path(self, seed: int, name: str) -> Path:
        return self.out / "models" / f"seed{seed}" / f"{name}.bqn"


def parse_seeds(text: str) -> tuple:
    seeds = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise InvalidInputError(f"empty seed list {text!r}")
    return tuple(seeds)


def _coerce(key: str, raw):
    if not isinstance(raw, str):
        return raw
    if key in ("demo_episodes", "layout_iterations"):
        return int(raw)
    if key == "restart_central":
        return raw.lower() in ("1", "true", "yes", "on")
    if key in ("out", "transport"):
        return raw
    return float(raw)


def _train_value(key: str, raw):
    if not isinstance(raw, str):
        return raw
    if key in ("episodes_max", "replay_capacity", "batch_size", "target_sync_every"):
        return int(raw)
    if key == "stop_at_reward_fraction":
        return None if raw.lower() in ("none", "") else float(raw)
    return float(raw)


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def fmt(x, digits: int = 6) -> str:
    return f"{x:.{digits}f}"


# --- environments -----------------------------------------------------------


def make_environments(cfg: RunConfig, seed: int) -> dict:
    a = generate_environment(replace(cfg.env, seed=seed), "A")
    b = derive_environment(a, cfg.radius_b, derived_seed(seed, _B_NOISE), "B")
    c = derive_environment(a, cfg.radius_c, derived_seed(seed, _C_NOISE), "C")
    return {"A": a, "B": b, "C": c}


def gen_env(cfg: RunConfig) -> dict:
    """Write A/B/C environment directories for every seed; return Chamfer matrices."""
    matrices = {}
    for seed in cfg.seeds:
        envs = make_environments(cfg, seed)
        for name, env in envs.items():
            save_environment(env, cfg.env_dir(seed, name))
        dmap = build_distance_map([envs[n].cloud for n in ENV_NAMES])
        save_distance_map(dmap, cfg.env_dir(seed) / "chamfer.csv")
        matrices[seed] = dmap
    return matrices


def load_environments(cfg: RunConfig, seed: int) -> dict:
    try:
        return {name: load_environment(cfg.env_dir(seed, name)) for name in ENV_NAMES}
    except (FileNotFoundError, InvalidInputError) as exc:
        raise InvalidInputError(f"missing environments for seed {seed} (run gen-env first): {exc}") from None


# --- distance map -----------------------------------------------------------


def collect_clouds(cfg: RunConfig, paths=None) -> list:
    if paths:
        clouds, seen = [], {}
        for p in paths:
            c = load_cloud(p)
            label = c.label or Path(p).stem
            seen[label] = seen.get(label, 0) + 1
            # repeated labels get a numeric suffix so the map stays well-formed
            clouds.append(c.relabel(label if seen[label] == 1 else f"{label}#{seen[label]}"))
    else:
        clouds = []
        for seed in cfg.seeds:
            for name in ENV_NAMES:
                path = cfg.env_dir(seed, name) / "cloud.txt"
                if path.exists():
                    clouds.append(load_cloud(path).relabel(f"seed{seed}-{name}"))
    return clouds


def distance_map(cfg: RunConfig, clouds) -> tuple:
    if len(clouds) < 2:
        raise InvalidInputError(f"need at least two clouds for a map, found {len(clouds)}")
    dmap = build_distance_map(clouds)
    layout = kamada_kawai(dmap, LayoutParams(iterations=cfg.layout_iterations, seed=cfg.seeds[0]))
    out = cfg.out / "map"
    out.mkdir(parents=True, exist_ok=True)
    save_distance_map(dmap, out / "distance_map.csv")
    save_layout(layout, out / "layout.csv", with_energy=True)
    return dmap, layout


# --- training ---------------------------------------------------------------


def train_config(cfg: RunConfig, seed: int, purpose: int, **changes) -> TrainConfig:
    return replace(cfg.train, seed=derived_seed(seed, purpose), **changes)


def train_on(cfg: RunConfig, env, seed: int, init_purpose: int, train_purpose: int):
    net = init_network(Arch.for_env(env), derived_seed(seed, init_purpose))
    return train(env, train_config(cfg, seed, train_purpose), net)


def save_model(net: QNetwork, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_weights(net))


def load_model(path: Path) -> QNetwork:
    if not path.exists():
        raise InvalidInputError(f"missing model {path} (run train first)")
    return deserialize_weights(path.read_bytes())


def train_cmd(cfg: RunConfig, env_name: str = "A", finetune_from: str | None = None) -> dict:
    """Train (or fine-tune) a model on one environment for every seed."""
    results = {}
    for seed in cfg.seeds:
        env = load_environments(cfg, seed)[env_name]
        if finetune_from:
            pre = load_model(cfg.model_path(seed, finetune_from))
            net, hist = fine_tune(pre, env, train_config(cfg, seed, _TUNE_B))
            name = f"{finetune_from}-to-{env_name}"
        else:
            net, hist = train_on(cfg, env, seed, _INIT_A if env_name == "A" else _INIT_B,
                                 _TRAIN_A if env_name == "A" else _TRAIN_B)
            name = env_name
        save_model(net, cfg.model_path(seed, name))
        hist.to_csv(cfg.model_path(seed, name).with_suffix(".history.csv"))
        results[seed] = (net, hist)
    return results


def eval_cmd(cfg: RunConfig, model_name: str = "A") -> list:
    rows = []
    for seed in cfg.seeds:
        envs = load_environments(cfg, seed)
        net = load_model(cfg.model_path(seed, model_name))
        for name in ENV_NAMES:
            rows.append([seed, model_name, name, fmt(evaluate(net, envs[name]))])
    write_csv(cfg.out / f"eval_{model_name}.csv", ["seed", "model", "environment", "rsrp_ratio"], rows)
    return rows


# --- fig5: accuracy versus Chamfer distance ---------------------------------


@dataclass
class Fig5Result:
    per_seed: dict
    chamfer: dict

    def median(self, env: str) -> float:
        return float(np.median([self.per_seed[s][env] for s in sorted(self.per_seed)]))

    def rows(self) -> list:
        seeds = sorted(self.per_seed)
        out = []
        for name in ENV_NAMES:
            ratios = np.array([self.per_seed[s][name] for s in seeds])
            chamfers = np.array([self.chamfer[s][name] for s in seeds])
            stderr = ratios.std(ddof=1) / np.sqrt(len(ratios)) if len(ratios) > 1 else 0.0
            out.append([name, fmt(np.median(chamfers)), fmt(ratios.mean()), fmt(stderr),
                        fmt(np.median(ratios)), len(ratios)])
        return out


def fig5(cfg: RunConfig) -> Fig5Result:
    """Train on A for every seed and evaluate the greedy policy on A, B and C."""
    per_seed, chamfer, seed_rows = {}, {}, []
    for seed in cfg.seeds:
        envs = load_environments(cfg, seed)
        net, _ = train_on(cfg, envs["A"], seed, _INIT_A, _TRAIN_A)
        per_seed[seed] = {n: evaluate(net, envs[n]) for n in ENV_NAMES}
        chamfer[seed] = {n: chamfer_distance(envs["A"].cloud, envs[n].cloud) for n in ENV_NAMES}
        for n in ENV_NAMES:
            seed_rows.append([seed, n, fmt(chamfer[seed][n]), fmt(per_seed[seed][n])])
        log.info("fig5 seed %d: %s", seed, per_seed[seed])
    result = Fig5Result(per_seed, chamfer)
    write_csv(cfg.out / "fig5_seeds.csv", ["seed", "environment", "chamfer_to_A", "rsrp_ratio"], seed_rows)
    write_csv(cfg.out / "fig5.csv",
              ["environment", "chamfer_to_A", "mean_rsrp_ratio", "stderr", "median_rsrp_ratio", "n_seeds"],
              result.rows())
    return result


# --- fig6: scratch versus fine-tune ---------------------------------------


@dataclass
class Fig6Seed:
    seed: int
    line: float
    scratch_episodes: int | None
    finetune_episodes: int | None
    scratch_mac: int | None
    finetune_mac: int | None
    scratch_first_reward: float
    finetune_first_reward: float

    @property
    def speedup(self) -> float | None:
        if self.scratch_episodes is None or not self.finetune_episodes:
            return None
        return self.scratch_episodes / self.finetune_episodes

    @property
    def mac_ratio(self) -> float | None:
        if self.scratch_mac is None or not self.finetune_mac:
            return None
        return self.scratch_mac / self.finetune_mac


@dataclass
class Fig6Result:
    seeds: list

    @property
    def median_speedup(self) -> float:
        # a run that never reaches the line counts as no speedup
        return float(np.median([s.speedup or 0.0 for s in self.seeds]))


def fig6(cfg: RunConfig) -> Fig6Result:
    """Scratch training on B versus fine-tuning an A-trained model on B.

    The scratch run is the reference: it runs for the full episode budget and
    its best trailing-mean greedy return sets the 95 % line. The fine-tune run
    stops as soon as it reaches that line.
    """
    per_seed, curves = [], []
    steps = cfg.env.n_train_locations
    for seed in cfg.seeds:
        envs = load_environments(cfg, seed)
        pretrained, _ = train_on(cfg, envs["A"], seed, _INIT_A, _TRAIN_A)
        _, scratch = train_on(cfg, envs["B"], seed, _INIT_B, _TRAIN_B)
        line = reward_line(scratch, cfg.stop_fraction)
        _, tuned = fine_tune(pretrained, envs["B"], train_config(cfg, seed, _TUNE_B), line)
        arch = pretrained.arch
        se, fe = scratch.episodes_to_line(line), tuned.episodes_to_line(line)
        mac = lambda n: None if n is None else macop_count(arch, n * steps, cfg.train.batch_size)
        per_seed.append(Fig6Seed(seed, line, se, fe, mac(se), mac(fe),
                                 scratch.greedy_reward[0], tuned.greedy_reward[0]))
        for mode, h in (("scratch", scratch), ("finetune", tuned)):
            for k in range(len(h)):
                curves.append([seed, mode, k + 1, fmt(h.greedy_reward[k]), fmt(h.total_reward[k])])
        log.info("fig6 seed %d: scratch %s finetune %s", seed, se, fe)
    result = Fig6Result(per_seed)
    write_csv(cfg.out / "fig6_curves.csv", ["seed", "mode", "episode", "reward", "train_reward"], curves)

    def opt(v, digits=2):
        return "" if v is None else (fmt(v, digits) if isinstance(v, float) else str(v))

    rows = [[s.seed, fmt(s.line), opt(s.scratch_episodes), opt(s.finetune_episodes), opt(s.speedup),
             opt(s.scratch_mac), opt(s.finetune_mac), opt(s.mac_ratio)] for s in per_seed]
    rows.append(["median", "", "", "", fmt(result.median_speedup, 2), "", "", ""])
    write_csv(cfg.out / "fig6_summary.csv",
              ["seed", "reward_line", "scratch_episodes", "finetune_episodes", "speedup",
               "scratch_mac", "finetune_mac", "mac_ratio"], rows)
    return result


# --- protocol demo ----------------------------------------------------------


def demo_nodes(cfg: RunConfig, seed: int):
    """Four existing gNBs in two similar pairs and a new gNB close to the first pair."""
    demo_cfg = replace(cfg.train, episodes_max=cfg.demo_episodes)
    base1 = generate_environment(replace(cfg.env, seed=derived_seed(seed, _DEMO)), "gnb-1a")
    base2 = generate_environment(replace(cfg.env, seed=derived_seed(seed, _DEMO + 1)), "gnb-2a")
    envs = {
        "gnb-1a": base1,
        "gnb-1b": derive_environment(base1, cfg.radius_b, derived_seed(seed, 101), "gnb-1b"),
        "gnb-2a": base2,
        "gnb-2b": derive_environment(base2, cfg.radius_b, derived_seed(seed, 102), "gnb-2b"),
    }
    existing = []
    for k, (gid, env) in enumerate(sorted(envs.items())):
        net = init_network(Arch.for_env(env), derived_seed(seed, 200 + k))
        model, hist = train(env, replace(demo_cfg, seed=derived_seed(seed, 300 + k)), net)
        line = reward_line(hist, cfg.stop_fraction)
        existing.append(GnbNode(gid, env, model, line, hist.episodes_to_line(line)))
    new_env = derive_environment(base1, cfg.radius_b, derived_seed(seed, 103), "gnb-new")
    return existing, GnbNode("gnb-new", new_env), replace(demo_cfg, seed=derived_seed(seed, 400))


def protocol_demo(cfg: RunConfig) -> ScenarioReport:
    seed = cfg.seeds[0]
    existing, new_node, tune_cfg = demo_nodes(cfg, seed)
    store = cfg.out / "protocol" / "central"
    if store.exists():
        for p in store.iterdir():
            p.unlink()
    report = run_onboarding_scenario(existing, new_node, tune_cfg, transport=cfg.transport,
                                     store=store, restart_central=cfg.restart_central)
    out = cfg.out / "protocol"
    rows = [[k, fmt(v) if isinstance(v, float) else v] for k, v in report.rows()]
    write_csv(out / "report.csv", ["key", "value"], rows)
    (out / "report.txt").write_text(report.text() + "\n")
    return report
