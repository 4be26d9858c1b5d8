"""
A magnetometer slower than the IMU
==================================

When the magnetometer runs N times slower than the IMU, only every N-th
sample keeps an orientation state. The N gyro readings in between are
compounded into one relative rotation (preintegration), so the problem
shrinks by a factor N.
"""

import time

import numpy as np

from magimu import so3
from magimu.initialization import build_init
from magimu.metrics import group_errors
from magimu.pipeline import joint_map
from magimu.preintegration import covariance_approx, integrate, propagated_covariance
from magimu.sim import SimConfig, simulate

# One preintegrated factor: N = 8 steps at 7 deg/s.
dt, sigma_w = 1 / 80, SimConfig().noise().sigma_w
gyro = np.tile(np.deg2rad([7.0, 0.0, 0.0]), (8, 1))
pre = integrate(gyro, np.zeros(3), dt, sigma_w)
print("relative rotation [deg]:", np.rad2deg(so3.log_map(pre.delta_R)))
exact = propagated_covariance(gyro, np.zeros(3), dt, sigma_w**2 * np.eye(3))
print("isotropic covariance vs exact propagation:",
      np.linalg.norm(covariance_approx(8, sigma_w, dt) - exact, 2) / np.linalg.norm(exact, 2))

# The same board at several rate ratios.
for N in (1, 2, 4, 8):
    cfg = SimConfig(seed=1, rate_ratio=N)
    dataset, truth = simulate(cfg)
    noise = cfg.noise()
    t0 = time.perf_counter()
    x, report = joint_map(dataset, noise, build_init(dataset, noise))
    err = group_errors(x.params, truth.params)
    print(f"N={N}: {len(x.rotations):6d} states, {time.perf_counter() - t0:5.2f} s, "
          f"o_m err {err['o_m']:.1e} uT, o_a err {err['o_a']:.1e} m/s^2")
