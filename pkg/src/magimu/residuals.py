"""
Whitened residuals of the full-rate joint cost and their analytic Jacobians.

Rotations are perturbed on the left, ``R <- Exp(d) R``, and ``D_m`` is
vectorized column-major so ``d(D v)/d vec(D) = v^T kron I_3``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .models import GRAVITY, field_direction, field_direction_derivative


@dataclass(frozen=True)
class WhiteningFactors:
    """Lower-triangular ``L`` with ``L L^T = Sigma^{-1}`` for each sensor."""

    L_a: np.ndarray
    L_m: np.ndarray
    L_w: np.ndarray

    @classmethod
    def from_covariances(cls, Sigma_a, Sigma_m, Sigma_w):
        chol = lambda S: np.linalg.cholesky(np.linalg.inv(S))
        return cls(chol(Sigma_a), chol(Sigma_m), chol(Sigma_w))

    @classmethod
    def from_noise(cls, noise):
        return cls.from_covariances(noise.Sigma_a, noise.Sigma_m, noise.Sigma_w)


@dataclass
class ResidualBlock:
    value: np.ndarray
    jacobians: dict = field(default_factory=dict)


def _T(A):
    return np.swapaxes(A, -1, -2)


def _mv(A, v):
    return np.einsum("...ij,...j->...i", A, v)


def accel_terms(R, s_tilde, o_a, L_a, g0=GRAVITY):
    """
    Batched accelerometer residuals ``L^T (s + R^T g - o_a)``.

    Returns the values ``(K, 3)``, ``d/dR`` ``(K, 3, 3)`` and ``d/do_a`` ``(3, 3)``.
    """
    g_n = np.array([0.0, 0.0, g0])
    Rt = _T(R)
    Rtg = Rt @ g_n
    LT = L_a.T
    value = _mv(LT, s_tilde + Rtg - o_a)
    dR = LT @ so3.hat(Rtg) @ Rt
    return value, dR, -LT


def mag_terms(R, m_tilde, D_m, o_m, alpha, L_m):
    """
    Batched magnetometer residuals ``L^T (m - D R^T m_n(alpha) - o_m)``.

    Returns values, ``d/dR`` ``(K, 3, 3)``, ``d/dvec(D)`` ``(K, 3, 9)``,
    ``d/dalpha`` ``(K, 3)`` and ``d/do_m`` ``(3, 3)``.
    """
    Rt = _T(R)
    b = Rt @ field_direction(alpha)  # R^T m, (K, 3)
    LT = L_m.T
    value = _mv(LT, m_tilde - b @ D_m.T - o_m)
    dR = -LT @ D_m @ so3.hat(b) @ Rt
    # (b^T kron I3)[i, 3j + i] = b_j
    K = len(b)
    dD = np.zeros((K, 3, 9))
    for j in range(3):
        dD[:, :, 3 * j : 3 * j + 3] = -b[:, j, None, None] * LT
    dalpha = -_mv(LT @ D_m, Rt @ field_direction_derivative(alpha))
    return value, dR, dD, dalpha, -LT


def gyro_terms(R0, R1, u_tilde, o_w, L_w, dt):
    """
    Batched gyroscope residuals ``L^T (u - Log(R0^T R1)/dt - o_w)``.

    Returns values, ``d/dR0``, ``d/dR1`` (both ``(K, 3, 3)``) and ``d/do_w``.
    Raises ``ValueError`` when a relative rotation reaches pi.
    """
    phi = so3.log_map(_T(R0) @ R1)
    if np.any(np.linalg.norm(phi, axis=-1) >= np.pi - 1e-9):
        raise ValueError("relative rotation between consecutive states reaches pi")
    LT = L_w.T
    value = _mv(LT, u_tilde - phi / dt - o_w)
    dR1 = -(LT @ so3.right_jacobian_inv(phi) @ _T(R1)) / dt
    return value, -dR1, dR1, -LT


def residual_accel(R_k, s_tilde, params, factors, g0=GRAVITY):
    value, dR, do = accel_terms(R_k[None], np.asarray(s_tilde)[None], params.o_a, factors.L_a, g0)
    return ResidualBlock(value[0], {"R_k": dR[0], "o_a": do})


def residual_mag(R_k, m_tilde, params, factors):
    value, dR, dD, da, do = mag_terms(
        R_k[None], np.asarray(m_tilde)[None], params.D_m, params.o_m, params.alpha, factors.L_m
    )
    return ResidualBlock(
        value[0], {"R_k": dR[0], "D_m": dD[0], "alpha": da[0][:, None], "o_m": do}
    )


def residual_gyro(R_k, R_k1, u_tilde, params, factors, dt):
    value, d0, d1, do = gyro_terms(
        R_k[None], R_k1[None], np.asarray(u_tilde)[None], params.o_w, factors.L_w, dt
    )
    return ResidualBlock(value[0], {"R_k": d0[0], "R_k1": d1[0], "o_w": do})


def full_rate_cost(dataset, params, rotations, noise, g0=GRAVITY):
    """
    Direct evaluation of the full-rate joint cost with quadratic forms in
    ``Sigma^{-1}`` (uniform priors dropped). Independent of the whitening path.
    """
    R = np.asarray(rotations)
    Rt = _T(R)
    g_n = np.array([0.0, 0.0, g0])
    ea = dataset.accel + Rt @ g_n - params.o_a
    em = dataset.mag - (Rt @ field_direction(params.alpha)) @ params.D_m.T - params.o_m
    rel = np.array([so3.log_map(R[k].T @ R[k + 1]) for k in range(len(R) - 1)])
    ew = dataset.gyro[:-1] - rel / dataset.dt - params.o_w
    quad = lambda e, S: float(np.einsum("ki,ij,kj->", e, np.linalg.inv(S), e))
    return quad(ea, noise.Sigma_a) + quad(em, noise.Sigma_m) + quad(ew, noise.Sigma_w)
