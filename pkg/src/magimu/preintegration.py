"""
Preintegrated rotation factors for magnetometers slower than the IMU.

Keyframes sit at every ``N``-th IMU sample, ``k' = 0, N, 2N, ...``, and the
``N`` gyro samples ``k' .. k'+N-1`` are compounded into one relative rotation.
"""

from dataclasses import dataclass

import numpy as np

from . import so3
from .residuals import ResidualBlock


@dataclass(frozen=True)
class PreintegratedRotation:
    """
    Relative rotation between two keyframes at a nominal gyro bias.

    Attributes
    ----------
    delta_R : ndarray (3, 3)
        Ordered product of the bias-corrected increments.
    bias_jacobian : ndarray (3, 3)
        Derivative of ``delta_R`` (as a right perturbation) w.r.t. the bias.
    cov : ndarray (3, 3)
        Covariance of the preintegrated rotation.
    span : tuple of int
        Keyframe indices ``(k', k' + N)``.
    nominal_bias : ndarray (3,)
    """

    delta_R: np.ndarray
    bias_jacobian: np.ndarray
    cov: np.ndarray
    span: tuple
    nominal_bias: np.ndarray

    def corrected(self, delta_bias):
        """First-order bias update ``dR_bar Exp(J_b db)``."""
        return self.delta_R @ so3.exp_map(self.bias_jacobian @ np.asarray(delta_bias))


def covariance_approx(N, sigma_w, dt):
    """Isotropic covariance ``N sigma_w^2 dt^2 I`` (valid for small per-step angles)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    return N * sigma_w**2 * dt**2 * np.eye(3)


def _integrate_spans(gyro, nominal_bias, dt):
    """
    Vectorized preintegration over ``S`` spans of ``N`` samples, ``gyro`` shaped ``(S, N, 3)``.

    Returns ``delta_R (S, 3, 3)``, the bias Jacobians ``(S, 3, 3)`` and the
    per-step noise maps ``A_i = dR_{i+1,j}^T J_r,i dt`` as ``(S, N, 3, 3)``.
    """
    S, N, _ = gyro.shape
    phi = (gyro - nominal_bias) * dt
    E = so3.exp_map(phi)
    Jr = so3.right_jacobian(phi)
    delta_R = np.broadcast_to(np.eye(3), (S, 3, 3)).copy()
    for i in range(N):
        delta_R = delta_R @ E[:, i]
    # Backward sweep: tail = dR_{i+1, j}.
    A = np.empty((S, N, 3, 3))
    tail = np.broadcast_to(np.eye(3), (S, 3, 3)).copy()
    for i in range(N - 1, -1, -1):
        A[:, i] = np.swapaxes(tail, -1, -2) @ Jr[:, i] * dt
        tail = E[:, i] @ tail
    bias_jacobian = -A.sum(axis=1)
    return delta_R, bias_jacobian, A


def integrate(gyro_slice, nominal_bias, dt, sigma_w, start=0):
    """
    Preintegrate one keyframe interval.

    Parameters
    ----------
    gyro_slice : array_like, shape (N, 3)
        Gyro samples ``k' .. k'+N-1`` [rad/s].
    nominal_bias : array_like, shape (3,)
    dt : float
    sigma_w : float
        Per-sample gyro noise standard deviation [rad/s].
    start : int
        Index ``k'`` of the first keyframe, recorded in ``span``.
    """
    gyro_slice = np.asarray(gyro_slice, dtype=float)
    if gyro_slice.ndim != 2 or len(gyro_slice) == 0:
        raise ValueError("empty gyro slice")
    if dt <= 0:
        raise ValueError("dt must be positive")
    N = len(gyro_slice)
    bias = np.asarray(nominal_bias, dtype=float)
    delta_R, J, _ = _integrate_spans(gyro_slice[None], bias, dt)
    return PreintegratedRotation(
        delta_R=delta_R[0],
        bias_jacobian=J[0],
        cov=covariance_approx(N, sigma_w, dt),
        span=(start, start + N),
        nominal_bias=bias.copy(),
    )


def propagated_covariance(gyro_slice, nominal_bias, dt, Sigma_w):
    """Covariance ``sum_i A_i Sigma_w A_i^T`` propagated through the exact noise maps."""
    gyro_slice = np.asarray(gyro_slice, dtype=float)
    _, _, A = _integrate_spans(gyro_slice[None], np.asarray(nominal_bias, dtype=float), dt)
    A = A[0]
    return np.einsum("nij,jk,nlk->il", A, np.asarray(Sigma_w), A)


@dataclass(frozen=True)
class KeyframeFactors:
    """All preintegrated factors of a dataset, stacked along the first axis."""

    delta_R: np.ndarray
    bias_jacobian: np.ndarray
    starts: np.ndarray
    N: int
    nominal_bias: np.ndarray
    sigma: float  # standard deviation of each preintegrated angle component

    def __len__(self):
        return len(self.starts)

    def __getitem__(self, i):
        return PreintegratedRotation(
            delta_R=self.delta_R[i],
            bias_jacobian=self.bias_jacobian[i],
            cov=self.sigma**2 * np.eye(3),
            span=(int(self.starts[i]), int(self.starts[i]) + self.N),
            nominal_bias=self.nominal_bias,
        )


def preintegrate_keyframes(gyro, N, nominal_bias, dt, sigma_w):
    """
    Preintegrate every complete keyframe interval of a gyro stream.

    Intervals ``[lN, (l+1)N)`` for all ``l`` with ``(l+1)N`` a valid sample index.
    """
    gyro = np.asarray(gyro, dtype=float)
    n_spans = (len(gyro) - 1) // N
    spans = gyro[: n_spans * N].reshape(n_spans, N, 3)
    bias = np.asarray(nominal_bias, dtype=float)
    delta_R, J, _ = _integrate_spans(spans, bias, dt)
    return KeyframeFactors(
        delta_R=delta_R,
        bias_jacobian=J,
        starts=np.arange(n_spans) * N,
        N=N,
        nominal_bias=bias.copy(),
        sigma=float(sigma_w * dt * np.sqrt(N)),
    )


def preint_terms(Ra, Rb, delta_R, bias_jacobian, delta_bias, sigma):
    """
    Batched preintegration residuals ``Log(dR~^T Ra^T Rb) / sigma``.

    ``dR~`` is the first-order bias-corrected preintegrated rotation.
    Returns values ``(K, 3)`` and Jacobians w.r.t. ``Ra``, ``Rb`` and the bias
    increment, each ``(K, 3, 3)``.
    """
    Jb_db = bias_jacobian @ np.asarray(delta_bias)
    dR = delta_R @ so3.exp_map(Jb_db)
    Q = np.swapaxes(dR, -1, -2) @ np.swapaxes(Ra, -1, -2) @ Rb
    phi = so3.log_map(Q)
    if np.any(np.linalg.norm(phi, axis=-1) >= np.pi - 1e-9):
        raise ValueError("preintegration residual rotation reaches pi")
    Jinv = so3.right_jacobian_inv(phi)
    value = phi / sigma
    dRb = Jinv @ np.swapaxes(Rb, -1, -2) / sigma
    dbias = -Jinv @ np.swapaxes(Q, -1, -2) @ so3.right_jacobian(Jb_db) @ bias_jacobian / sigma
    return value, -dRb, dRb, dbias


def residual_preint(R_kp, R_kpN, pre, delta_bias):
    """Whitened preintegration residual of one keyframe pair as a ``ResidualBlock``."""
    sigma = float(np.sqrt(pre.cov[0, 0]))
    value, da, db, dbias = preint_terms(
        R_kp[None],
        R_kpN[None],
        pre.delta_R[None],
        pre.bias_jacobian[None],
        delta_bias,
        sigma,
    )
    return ResidualBlock(value[0], {"R_kp": da[0], "R_kpN": db[0], "delta_o_w": dbias[0]})
