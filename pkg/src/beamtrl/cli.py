"""Command-line entry point: ``beamtrl <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiments as ex
from .dqn import CorruptModelError
from .geometry import InvalidInputError
from .registry import ProtocolError


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--out", help="output directory (default: runs)")
    common.add_argument("--seeds", help="comma-separated seeds or ranges, e.g. 0-4")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="beamtrl", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-env", parents=[common], help="generate environments A, B, C per seed")
    g.add_argument("--radius-b", type=float)
    g.add_argument("--radius-c", type=float)

    m = sub.add_parser("map", parents=[common], help="distance map and Kamada-Kawai layout")
    m.add_argument("clouds", nargs="*", help="cloud files (default: all generated environments)")

    t = sub.add_parser("train", parents=[common], help="train a DQN per seed")
    t.add_argument("--env", default="A", choices=ex.ENV_NAMES)
    t.add_argument("--finetune-from", choices=ex.ENV_NAMES, help="start from this environment's model")
    t.add_argument("--episodes", type=int)

    e = sub.add_parser("eval", parents=[common], help="evaluate a trained model on A, B and C")
    e.add_argument("--model", default="A")

    f5 = sub.add_parser("fig5", parents=[common], help="performance versus Chamfer distance")
    f5.add_argument("--episodes", type=int)
    f6 = sub.add_parser("fig6", parents=[common], help="scratch versus fine-tune training speed")
    f6.add_argument("--episodes", type=int)

    d = sub.add_parser("protocol-demo", parents=[common], help="model-sharing protocol end to end")
    d.add_argument("--transport", choices=("tcp", "inprocess"))
    d.add_argument("--no-restart", action="store_true", help="keep the centralized unit running throughout")
    return p


def load_config(args) -> ex.RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise InvalidInputError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for attr, key in (("out", "out"), ("seeds", "seeds"), ("radius_b", "radius_b"), ("radius_c", "radius_c"),
                      ("episodes", "episodes_max"), ("transport", "transport")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "no_restart", False):
        overrides["restart_central"] = "false"
    return ex.RunConfig.load(args.config, overrides)


def print_matrix(dmap) -> None:
    width = max(8, *(len(label) for label in dmap.labels))
    print(" " * width + "".join(f"{label:>{width}}" for label in dmap.labels))
    for label, row in zip(dmap.labels, dmap.d):
        print(f"{label:>{width}}" + "".join(f"{v:>{width}.4f}" for v in row))


def run(args) -> None:
    cfg = load_config(args)
    if args.command == "gen-env":
        for seed, dmap in ex.gen_env(cfg).items():
            print(f"seed {seed}: Chamfer distances (m^2)")
            print_matrix(dmap)
    elif args.command == "map":
        dmap, layout = ex.distance_map(cfg, ex.collect_clouds(cfg, args.clouds))
        print(f"{len(dmap)} environments, residual stress {layout.residual_energy:.6g}")
        print(f"wrote {cfg.out / 'map' / 'layout.csv'}")
    elif args.command == "train":
        for seed, (_, hist) in ex.train_cmd(cfg, args.env, args.finetune_from).items():
            print(f"seed {seed}: {len(hist)} episodes, last greedy reward {hist.greedy_reward[-1]:.2f}")
    elif args.command == "eval":
        for seed, model, env, ratio in ex.eval_cmd(cfg, args.model):
            print(f"seed {seed}: model {model} on {env}: rsrp ratio {ratio}")
    elif args.command == "fig5":
        result = ex.fig5(cfg)
        print("environment  chamfer_to_A  mean_ratio  stderr  median_ratio")
        for name, ch, mean, se, med, _ in result.rows():
            print(f"{name:>11}  {ch:>12}  {mean:>10}  {se}  {med}")
    elif args.command == "fig6":
        result = ex.fig6(cfg)
        for s in result.seeds:
            print(f"seed {s.seed}: scratch {s.scratch_episodes} episodes, fine-tune {s.finetune_episodes} episodes, "
                  f"speedup {s.speedup if s.speedup is None else f'{s.speedup:.2f}'}, MAC {s.scratch_mac} vs {s.finetune_mac}")
        print(f"median speedup {result.median_speedup:.2f}")
    elif args.command == "protocol-demo":
        print(ex.protocol_demo(cfg).text())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run(args)
    except (InvalidInputError, CorruptModelError, ProtocolError, OSError) as exc:
        print(f"beamtrl {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
