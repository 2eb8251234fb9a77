"""
RSRP geography and the beam-selection reward
============================================

The channel model gives every UE location a received power per transmit
beam. A UE walking around the square sees the best beam change as it turns
corners, and the reward trades signal strength against beam switching.
"""

import numpy as np

from beamtrl.simenv import EnvSpec, Episode, best_beam, generate_environment, step_reward

env = generate_environment(EnvSpec(seed=0, n_train_locations=16, n_test_locations=0))

print("loc      x      y   " + "  ".join(f"{a:>6.0f}deg" for a in env.spec.beam_angles) + "  best")
for i, (x, y) in enumerate(env.train_path):
    row = "  ".join(f"{v:9.2f}" for v in env.rsrp_table[i])
    print(f"{i:3d} {x:6.2f} {y:6.2f}   {row}  {best_beam(env, i)}")

# %%
# Rewards
# -------
# Staying on a strong beam earns up to 0.9; each 90 degree switch costs 0.1.

i = 0
b = best_beam(env, i)
print(f"\nstay on best beam:         {step_reward(env, i, b, b):.3f}")
print(f"switch to best from +90:   {step_reward(env, i, b, (b + 1) % 4):.3f}")
print(f"switch to best from +180:  {step_reward(env, i, b, (b + 2) % 4):.3f}")

# An oracle that always picks the best beam, walked through one episode.
ep = Episode(env)
ep.reset(0)
total, ratios = 0.0, []
for loc in ep.locations:
    out = ep.step(best_beam(env, int(loc)))
    total += out.reward
    ratios.append(out.rsrp_ratio)
print(f"\noracle episode: reward {total:.3f}, mean RSRP ratio {np.mean(ratios):.3f}")
