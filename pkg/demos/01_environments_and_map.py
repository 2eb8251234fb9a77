"""
Environments as point clouds, and a map of how alike they are
=============================================================

Each deployment site is summarized by a small 2-D point cloud: the gNB
position followed by the scatterers around it. Two sites are compared by
their Chamfer distance, and a set of sites is laid out on a plane so that
layout distances track Chamfer distances.

Run with ``python demos/01_environments_and_map.py``.
"""

import numpy as np

from beamtrl.geometry import chamfer_distance, perturb_cloud
from beamtrl.layout import build_distance_map, kamada_kawai, nearest_environment
from beamtrl.simenv import EnvSpec, derive_environment, generate_environment

# A random site: gNB at the origin of a 6 m square, five scatterers.
a = generate_environment(EnvSpec(seed=0), "A")
print("cloud A (gNB first):")
print(np.round(a.cloud.points, 3))

# B moves every point by at most 0.25 m, C by at most 2 m.
b = derive_environment(a, 0.25, seed=1, label="B")
c = derive_environment(a, 2.0, seed=2, label="C")
print(f"\nd(A,B) = {chamfer_distance(a.cloud, b.cloud):.4f} m^2")
print(f"d(A,C) = {chamfer_distance(a.cloud, c.cloud):.4f} m^2")

# %%
# Two families of sites
# ---------------------
# Sites derived from the same base sit close together on the map.

base2 = generate_environment(EnvSpec(seed=7)).cloud
clouds = [a.cloud, b.cloud, c.cloud,
          perturb_cloud(base2, 0.25, 3, "D"), perturb_cloud(base2, 0.25, 4, "E")]
dmap = build_distance_map(clouds)
layout = kamada_kawai(dmap)

print("\nlabel        x        y")
for label, (x, y) in zip(layout.labels, layout.positions):
    print(f"{label:>5} {x:8.3f} {y:8.3f}")
print(f"residual stress {layout.residual_energy:.4g}")

# The nearest environment is read from the matrix, not the picture.
for label in dmap.labels:
    print(f"nearest to {label}: {nearest_environment(dmap, label)}")
