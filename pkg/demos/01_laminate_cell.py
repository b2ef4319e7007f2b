# Layered cell: closed form, exact 1D reduction and the 2D grid solver side by side.
#
# With p1 = p2 = 2 the effective flux is the harmonic mean of the
# conductivities across the layers and the arithmetic mean along them.
# For a nonlinear pair the 1D reduction is still exact and serves as
# the reference for the grid solver.

import time

import numpy as np

from powerhom import PhaseParams, MicroGeometry, SolverSettings, solve_cell

lam = MicroGeometry("laminate", 0.5)

linear = PhaseParams(sigma1=1.0, sigma2=2.0, p1=2.0, p2=2.0)
print("linear pair, sigma = (1, 2)")
for xi in ([1.0, 0.0], [0.0, 1.0]):
    s = solve_cell(linear, lam, xi)
    print(f"  b({xi}) = {s.b}   (layer gradients {s.extra['t1']:.6f}, {s.extra['t2']:.6f})")
print("  expected 4/3 across, 3/2 along")

pp = PhaseParams(1.0, 3.0, 1.5, 2.0)
xi = np.array([1.2, -0.7])
exact = solve_cell(pp, lam, xi)
print(f"\nnonlinear pair {pp}, xi = {xi}")
print(f"  1D reduction   b = {exact.b}")
for n in (16, 32, 64, 128):
    t = time.perf_counter()
    g = solve_cell(pp, lam, xi, SolverSettings(grid_n=n), backend="grid2d")
    dt = time.perf_counter() - t
    err = np.linalg.norm(g.b - exact.b) / np.linalg.norm(exact.b)
    print(f"  grid n={n:<4d} b = {g.b}  rel err {err:.1e}  "
          f"|mean P - xi| {np.max(np.abs(g.mean_P - xi)):.1e}  newton its {g.iterations}  {dt:.2f}s")
