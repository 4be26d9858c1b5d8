"""
From raw magnetometer samples to an initial calibration
=======================================================

Each step of the initialization on its own: the quadric fit, the
maximum-likelihood intrinsic refinement, and the alignment of the
magnetometer frame to the IMU frame from gyro-predicted field changes.
"""

import numpy as np

from magimu import so3
from magimu.initialization import ellipsoid_fit, estimate_gyro_bias, extrinsic_align, intrinsic_refine
from magimu.models import skew_matrix
from magimu.sim import SimConfig, simulate

cfg = SimConfig(seed=3)
dataset, truth = simulate(cfg)
noise = cfg.noise()
f = truth.factors

# Gyro bias: the mean reading while the board is still.
bias, span = estimate_gyro_bias(dataset.gyro, dataset.accel, dataset.dt, noise.sigma_w, noise.sigma_a)
print("gyro bias error [deg/s]:", np.rad2deg(bias - truth.params.o_w))

# The field seen by the magnetometer lies on an ellipsoid; a linear
# least-squares quadric fit gives its shape D D^T and centre.
D0, o0 = ellipsoid_fit(dataset.mag)
D = truth.params.D_m
print("quadric shape error:", np.abs(D0 @ D0.T - D @ D.T).max())

# The lower-triangular factor D_I is refined jointly with one direction per
# sample. The rotation R_D is invisible to magnetometer-only data.
res = intrinsic_refine(dataset.mag, (D0, o0))
D_I = np.diag(f.D_diag) @ skew_matrix(*f.skew_angles)
print("intrinsic factor error:", np.abs(res.D_I - D_I).max(), " residual rms:", res.residual_rms)

# Aligning the gyro with the corrected field recovers R_D.
R_D = extrinsic_align(dataset.gyro, dataset.mag, bias, res.D_I, res.o_m, dataset.dt, sigma_w=noise.sigma_w)
print("alignment error [deg]:", np.rad2deg(so3.angle_between(R_D, f.R_D)))
