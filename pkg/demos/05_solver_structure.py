"""
Inside the solver: arrow-shaped normal equations
================================================

Orientation states only touch their neighbours, while the 19 parameters
touch everything. The normal equations are therefore block-tridiagonal with
a dense border. Eliminating the states first (banded Cholesky) and then
solving the small parameter system keeps each iteration linear in the
number of samples.
"""

import time

import numpy as np

from magimu.sim import SimConfig, simulate
from magimu.solver import CalibrationProblem, schur_complement, solve_step

cfg = SimConfig(seed=2, rate_hz=20.0, duration_s=10.0)
dataset, truth = simulate(cfg)
problem = CalibrationProblem(dataset, cfg.noise())
x = problem.initial_estimate(truth.params, truth.trajectory)
neq = problem.linearize(x)
H, b = neq.to_dense()
print(f"H is {H.shape[0]}x{H.shape[1]}, {np.count_nonzero(H) / H.size:.1%} non-zero")

# The structured step equals a dense solve.
step = solve_step(neq, 1e-3)
dense = np.linalg.solve(H + 1e-3 * np.diag(np.diag(H)), b)
print("structured vs dense step:", np.abs(step - dense).max())

# The reduced parameter system tells whether the motion excites every parameter.
print("smallest eigenvalue of the parameter block:", np.linalg.eigvalsh(schur_complement(neq))[0])

# One iteration's cost grows linearly with the number of samples.
for T in (4000, 8000, 16000):
    cfg = SimConfig(seed=2, duration_s=T / 80 - 2)
    dataset, truth = simulate(cfg)
    problem = CalibrationProblem(dataset, cfg.noise())
    x = problem.initial_estimate(truth.params, truth.trajectory)
    t0 = time.perf_counter()
    solve_step(problem.linearize(x), 1e-4)
    print(f"T={T}: {1e3 * (time.perf_counter() - t0):.0f} ms per linearize + solve")
