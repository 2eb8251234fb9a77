"""
Training a beam selector and reusing it next door
=================================================

A small DQN learns beam selection on site A. The same network is then
evaluated on a similar site B and a dissimilar site C, and fine-tuned on B
against the reward line of a from-scratch run. Takes about a minute.
"""

from beamtrl.dqn import Arch, TrainConfig, evaluate, fine_tune, init_network, macop_count, reward_line, train
from beamtrl.geometry import chamfer_distance
from beamtrl.simenv import EnvSpec, derive_environment, generate_environment

a = generate_environment(EnvSpec(seed=1), "A")
b = derive_environment(a, 0.25, seed=11, label="B")
c = derive_environment(a, 2.0, seed=12, label="C")
cfg = TrainConfig(episodes_max=60, seed=1)

net_a, hist_a = train(a, cfg, init_network(Arch.for_env(a), 1))
print(f"trained on A for {len(hist_a)} episodes (best greedy episode {hist_a.best_episode})")
for env in (a, b, c):
    d = chamfer_distance(a.cloud, env.cloud)
    print(f"  {env.label}: Chamfer to A {d:7.4f}, RSRP ratio {evaluate(net_a, env):.4f}")

# %%
# Scratch versus fine-tune on B
# -----------------------------
# The scratch run sets the line: 95 % of its best trailing-5 greedy return.

_, scratch = train(b, cfg, init_network(Arch.for_env(b), 2))
line = reward_line(scratch, 0.95)
tuned, ft = fine_tune(net_a, b, cfg, line)
n_s, n_f = scratch.episodes_to_line(line), ft.episodes_to_line(line)
print(f"\nreward line {line:.2f}")
print(f"scratch reaches it after {n_s} episodes, fine-tune after {n_f}")
steps = b.n_train
mac_s = macop_count(net_a.arch, n_s * steps, cfg.batch_size)
mac_f = macop_count(net_a.arch, n_f * steps, cfg.batch_size)
print(f"MACs {mac_s / 1e6:.0f} M vs {mac_f / 1e6:.0f} M, ratio {mac_s / mac_f:.2f}")
print(f"fine-tuned RSRP ratio on B: {evaluate(tuned, b):.4f}")
