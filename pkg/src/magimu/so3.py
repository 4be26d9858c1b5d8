"""
SO(3) primitives: hat/vee, exponential and logarithm maps, right Jacobians.

Every map accepts either a single 3-vector (3x3 matrix) or a stack with
leading batch dimensions, ``(..., 3)`` / ``(..., 3, 3)``.
"""

import numpy as np

# Below this angle the closed forms switch to 4th-order Taylor series.
SMALL_ANGLE = 1e-5
# Within this distance of pi the logarithm takes the axis from R + R^T.
_NEAR_PI = 1e-2


def hat(v):
    """Skew-symmetric matrix with ``hat(v) @ w == cross(v, w)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(S):
    """Inverse of :func:`hat` (reads the skew part only)."""
    S = np.asarray(S, dtype=float)
    return 0.5 * np.stack(
        [S[..., 2, 1] - S[..., 1, 2], S[..., 0, 2] - S[..., 2, 0], S[..., 1, 0] - S[..., 0, 1]],
        axis=-1,
    )


def _coefficients(theta, closed, series):
    theta = np.asarray(theta, dtype=float)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    return np.where(small, series(theta), closed(safe))


def _sinc1(t):
    # sin(t)/t
    return _coefficients(t, lambda s: np.sin(s) / s, lambda s: 1.0 - s**2 / 6.0 + s**4 / 120.0)


def _cosc2(t):
    # (1 - cos t)/t^2
    return _coefficients(
        t, lambda s: (1.0 - np.cos(s)) / s**2, lambda s: 0.5 - s**2 / 24.0 + s**4 / 720.0
    )


def _sinc3(t):
    # (t - sin t)/t^3
    return _coefficients(
        t, lambda s: (s - np.sin(s)) / s**3, lambda s: 1.0 / 6.0 - s**2 / 120.0 + s**4 / 5040.0
    )


def _jinv_coeff(t):
    # 1/t^2 - (1 + cos t)/(2 t sin t)
    return _coefficients(
        t,
        lambda s: 1.0 / s**2 - (1.0 + np.cos(s)) / (2.0 * s * np.sin(s)),
        lambda s: 1.0 / 12.0 + s**2 / 720.0 + s**4 / 30240.0,
    )


def exp_map(v):
    """Rodrigues formula ``Exp(v) = I + sinc(t) K + (1 - cos t)/t^2 K^2``."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    K = hat(v)
    a = _sinc1(theta)[..., None, None]
    b = _cosc2(theta)[..., None, None]
    return np.eye(3) + a * K + b * (K @ K)


def log_map(R):
    """
    Rotation vector of ``R`` with norm in ``[0, pi]``.

    Parameters
    ----------
    R : array_like, shape (..., 3, 3)
        Rotation matrices.

    Returns
    -------
    ndarray, shape (..., 3)
    """
    R = np.asarray(R, dtype=float)
    w = vee(R)  # = sin(theta) * axis
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)

    v = w / _sinc1(theta)[..., None]

    near_pi = theta > np.pi - _NEAR_PI
    if np.any(near_pi):
        Rn = R[near_pi]
        cn = np.cos(theta[near_pi])
        # R + R^T = 2 cos(t) I + 2 (1 - cos t) a a^T
        aaT = (Rn + np.swapaxes(Rn, -1, -2) - 2.0 * cn[:, None, None] * np.eye(3)) / (
            2.0 * (1.0 - cn)[:, None, None]
        )
        diag = np.diagonal(aaT, axis1=-2, axis2=-1)
        j = np.argmax(diag, axis=-1)
        col = aaT[np.arange(len(j)), :, j]
        axis = col / np.linalg.norm(col, axis=-1, keepdims=True)
        sign = np.where(np.einsum("ij,ij->i", axis, w[near_pi]) < 0.0, -1.0, 1.0)
        v[near_pi] = (sign * theta[near_pi])[:, None] * axis
    return v


def right_jacobian(v):
    """``J_r(v) = I - (1 - cos t)/t^2 K + (t - sin t)/t^3 K^2`` with ``K = hat(v)``."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    K = hat(v)
    return (
        np.eye(3)
        - _cosc2(theta)[..., None, None] * K
        + _sinc3(theta)[..., None, None] * (K @ K)
    )


def right_jacobian_inv(v):
    """
    Closed-form inverse of :func:`right_jacobian`.

    ``J_r^{-1}(v) = I + K/2 + (1/t^2 - (1 + cos t)/(2 t sin t)) K^2``.
    Only defined for ``|v| < pi``.
    """
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    if np.any(theta >= np.pi):
        raise ValueError("right_jacobian_inv is undefined for rotation angles >= pi")
    K = hat(v)
    return np.eye(3) + 0.5 * K + _jinv_coeff(theta)[..., None, None] * (K @ K)


def orthonormalize(R):
    """One Newton step of the polar decomposition, ``R (3I - R^T R) / 2``."""
    R = np.asarray(R, dtype=float)
    return 0.5 * R @ (3.0 * np.eye(3) - np.swapaxes(R, -1, -2) @ R)


def cumulative_product(steps):
    """
    Ordered running products ``P_k = E_0 E_1 ... E_{k-1}`` for ``k = 0..n``.

    Uses a log-depth parallel scan so round-off grows with ``log n``
    instead of ``n``. Returns ``n + 1`` matrices, the first being the identity.
    """
    steps = np.asarray(steps, dtype=float)
    n = steps.shape[0]
    P = steps.copy()
    shift = 1
    while shift < n:
        P[shift:] = P[:-shift] @ P[shift:]
        shift *= 2
    out = np.empty((n + 1, 3, 3))
    out[0] = np.eye(3)
    out[1:] = P
    if n > 100:
        out = orthonormalize(out)
    return out


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    err = np.linalg.norm(R @ np.swapaxes(R, -1, -2) - np.eye(3), axis=(-2, -1))
    det = np.linalg.det(R)
    return bool(np.all(err < tol) and np.all(np.abs(det - 1.0) < tol))


def rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def from_euler(roll, pitch, yaw):
    """Z-Y-X (yaw, pitch, roll) rotation ``Rz(yaw) Ry(pitch) Rx(roll)``."""
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def angle_between(R1, R2):
    """Geodesic distance in radians."""
    return float(np.linalg.norm(log_map(np.asarray(R1).T @ np.asarray(R2))))
