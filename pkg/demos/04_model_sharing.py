"""
Onboarding a new gNB through the centralized unit
=================================================

Four gNBs with trained models report their point clouds to a centralized
unit over localhost TCP. A new gNB asks which registered site resembles its
own, pulls that peer's weights, fine-tunes and registers itself. The unit
is restarted from disk halfway through to show the registry survives.
"""

import tempfile
from dataclasses import replace

from beamtrl.dqn import Arch, TrainConfig, init_network, reward_line, train
from beamtrl.registry import GnbNode, run_onboarding_scenario
from beamtrl.simenv import EnvSpec, derive_environment, generate_environment

spec = EnvSpec(n_train_locations=60, n_test_locations=40)
base1 = generate_environment(replace(spec, seed=31))
base2 = generate_environment(replace(spec, seed=32))
sites = {
    "gnb-1a": derive_environment(base1, 0.25, 1, "gnb-1a"),
    "gnb-1b": derive_environment(base1, 0.25, 2, "gnb-1b"),
    "gnb-2a": derive_environment(base2, 0.25, 3, "gnb-2a"),
    "gnb-2b": derive_environment(base2, 0.25, 4, "gnb-2b"),
}
cfg = TrainConfig(episodes_max=30)

existing = []
for k, (gid, env) in enumerate(sites.items()):
    net, hist = train(env, replace(cfg, seed=k), init_network(Arch.for_env(env), k))
    line = reward_line(hist, 0.95)
    existing.append(GnbNode(gid, env, net, line, hist.episodes_to_line(line)))
    print(f"{gid}: trained, reward line {line:.2f}")

newcomer = GnbNode("gnb-new", derive_environment(base1, 0.25, 5, "gnb-new"))
with tempfile.TemporaryDirectory() as store:
    report = run_onboarding_scenario(existing, newcomer, cfg, transport="tcp", store=store, restart_central=True)
print()
print(report.text())
