"""
Gauge invariance of the boundary data
=====================================

Two connection/potential pairs related by a gauge transformation that is the
identity on the lateral boundary produce the same Dirichlet-to-Neumann map.
On a grid they agree only up to discretisation error, so we watch that error
shrink as the grid is refined.

Run with ``python demos/01_gauge_invariance.py`` (about 30 seconds).
"""
import numpy as np

from connwave.bundle import ConnectionData, PotentialData, boundary_identity_gauge, gauge_transform
from connwave.metrics import Minkowski
from connwave.reconstruct import dtn_distance
from connwave.wave_solver import BoundaryBasis, dtn_matrix, stable_chart

# %%
# A rank-2 bundle over 1+1 Minkowski space with a smooth random U(2)
# connection and Hermitian potential.
metric = Minkowski(1)
B = ConnectionData.smooth_random(2, 1, seed=1)
V = PotentialData.smooth_random(2, 1, seed=1)

# %%
# The gauge A(t, x) equals the identity at x = 0 and x = 1.  The transformed
# pair is B' = A^{-1} B A + A^{-1} dA, V' = A^{-1} V A.
A = boundary_identity_gauge(1, 2, seed=3, amplitude=2.0)
pair = gauge_transform(B, V, A)

# %%
# Boundary sources: a few smooth time bumps at each boundary node and fibre
# direction.  Each DtN column is the Neumann trace of one forward solve.
distances = []
for nx in (21, 41, 81):
    chart = stable_chart(metric, 1.0, (1.0,), nx)
    basis = BoundaryBasis(chart, np.linspace(-0.5, 0.5, 3), 0.4, 2)
    L1 = dtn_matrix(metric, B, V, basis)
    L2 = dtn_matrix(metric, pair.connection, pair.potential, basis)
    d = dtn_distance(L1, L2)
    distances.append(d["relative"])
    print(f"nx = {nx:3d}   ||L - L'|| / ||L|| = {d['relative']:.3e}")

# %%
# The scheme is second order, so each halving of h should cut the distance by
# about four.
ratios = np.array(distances[:-1]) / np.array(distances[1:])
print("refinement ratios:", np.round(ratios, 2))
