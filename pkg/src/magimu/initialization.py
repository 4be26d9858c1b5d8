"""
Initial values for the joint solve.

The pipeline is: gyro bias from the stationary lead-in, dead-reckoned
orientations, an ellipsoid fit refined into an intrinsic magnetometer
calibration ``(D_I, o_m)``, and the magnetometer-to-IMU misalignment ``R_D``
from the gyro-driven rotation of the corrected field, so ``D_m = D_I R_D``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import so3
from .models import GRAVITY, CalibrationParams
from .solver import SolverOptions, levenberg_marquardt

log = logging.getLogger(__name__)


class InitializationError(RuntimeError):
    pass


class NoStationarySpanError(InitializationError):
    pass


class DegenerateEllipsoidError(InitializationError):
    pass


class InsufficientExcitationError(InitializationError):
    pass


@dataclass
class StationaryConfig:
    """
    Sliding-window stationarity test.

    A window is stationary when every gyro and accelerometer axis has a
    standard deviation below ``std_factor`` times its noise level and the mean
    gyro rate is below ``max_rate`` rad/s. The end of the span is then
    pinned to the first gyro sample deviating more than ``edge_factor``
    noise levels from the mean of the first window.
    """

    window_s: float = 1.0
    std_factor: float = 3.0
    max_rate: float = 0.05
    min_duration_s: float = 1.0
    edge_factor: float = 5.0


@dataclass
class InitConfig:
    dip_angle_deg: float = 72.0
    gravity: float = GRAVITY
    stationary: StationaryConfig = field(default_factory=StationaryConfig)


@dataclass
class IntrinsicResult:
    D_I: np.ndarray
    o_m: np.ndarray
    roll_pitch: np.ndarray
    residual_rms: float
    report: object = None


@dataclass
class InitBundle:
    params0: CalibrationParams
    trajectory0: np.ndarray
    stationary_span: tuple
    intrinsic: IntrinsicResult = None
    R_D: np.ndarray = None


def stationary_span(gyro, accel, dt, sigma_w, sigma_a, cfg=None):
    """
    Longest stationary prefix ``(0, stop)`` of the data.

    Raises
    ------
    NoStationarySpanError
        If the data does not begin with at least ``min_duration_s`` of stillness.
    """
    cfg = cfg or StationaryConfig()
    gyro = np.asarray(gyro)
    accel = np.asarray(accel)
    w = max(int(round(cfg.window_s / dt)), 2)
    n = len(gyro)
    if n < w:
        raise NoStationarySpanError("dataset is shorter than one stationarity window")
    stop = 0
    # Windows slide by one sample; the span grows while windows stay stationary.
    gw = np.lib.stride_tricks.sliding_window_view(gyro, w, axis=0)
    aw = np.lib.stride_tricks.sliding_window_view(accel, w, axis=0)
    still = (
        (gw.std(axis=-1) < cfg.std_factor * sigma_w).all(axis=1)
        & (aw.std(axis=-1) < cfg.std_factor * sigma_a).all(axis=1)
        & (np.linalg.norm(gw.mean(axis=-1), axis=1) < cfg.max_rate)
    )
    if still[0]:
        moving = np.flatnonzero(~still)
        first_bad = moving[0] if len(moving) else len(still)
        stop = first_bad - 1 + w
        # Windows blur the edge; cut at the first sample that departs from
        # the first window's mean.
        if np.isfinite(sigma_w):
            dev = np.abs(gyro[:stop] - gyro[:w].mean(axis=0)) > cfg.edge_factor * sigma_w
            jumps = np.flatnonzero(dev.any(axis=1))
            if len(jumps):
                stop = int(jumps[0])
    if stop * dt < cfg.min_duration_s - 1e-9:
        raise NoStationarySpanError("no stationary span at the start of the dataset")
    return 0, int(stop)


def estimate_gyro_bias(gyro, accel, dt=None, sigma_w=None, sigma_a=None, cfg=None):
    """
    Mean gyro reading over the initial stationary span.

    Returns ``(bias, span)``.
    """
    dt = 1.0 / 80.0 if dt is None else dt
    gyro = np.asarray(gyro)
    # Without noise levels only the mean-rate test applies.
    sigma_w = np.inf if sigma_w is None else sigma_w
    sigma_a = np.inf if sigma_a is None else sigma_a
    span = stationary_span(gyro, accel, dt, sigma_w, sigma_a, cfg)
    return gyro[span[0] : span[1]].mean(axis=0), span


def dead_reckon(gyro, bias, dt, R0=None):
    """
    Integrate bias-corrected gyro rates, ``R_{k+1} = R_k Exp((u_k - b) dt)``.

    Returns one rotation per gyro sample (the last sample's rate is unused).
    """
    gyro = np.asarray(gyro, dtype=float)
    steps = so3.exp_map((gyro[:-1] - bias) * dt)
    P = so3.cumulative_product(steps)
    if R0 is not None:
        P = np.asarray(R0) @ P
    return P


def ellipsoid_fit(mag):
    """
    Algebraic least-squares fit of a general quadric to magnetometer samples.

    Returns ``(D_I0, o_m0)`` with ``D_I0`` lower triangular, positive
    diagonal, and ``D_I0 D_I0^T`` equal to the shape matrix of the ellipsoid
    ``{D u + o : |u| = 1}``.

    Raises
    ------
    DegenerateEllipsoidError
        If the samples do not pin down a unique ellipsoid.
    """
    m = np.asarray(mag, dtype=float)
    m = m[~np.isnan(m).any(axis=1)]
    if len(m) < 10:
        raise DegenerateEllipsoidError("at least 10 samples are needed for a quadric fit")
    # Normalize for conditioning.
    center = m.mean(axis=0)
    scale = np.sqrt(((m - center) ** 2).sum(axis=1).mean())
    z = (m - center) / scale
    x, y, w = z.T
    design = np.column_stack(
        [x * x, y * y, w * w, 2 * x * y, 2 * x * w, 2 * y * w, 2 * x, 2 * y, 2 * w, np.ones_like(x)]
    )
    _, sv, Vt = np.linalg.svd(design, full_matrices=False)
    if sv[-2] < 1e-8 * sv[0]:
        raise DegenerateEllipsoidError("quadric is not unique: insufficient direction coverage")
    q = Vt[-1]
    A = np.array([[q[0], q[3], q[4]], [q[3], q[1], q[5]], [q[4], q[5], q[2]]])
    bvec = q[6:9]
    c = q[9]
    if np.linalg.eigvalsh(A)[0] < 0:
        A, bvec, c = -A, -bvec, -c
    eig = np.linalg.eigvalsh(A)
    if eig[0] <= 1e-12 * eig[-1]:
        raise DegenerateEllipsoidError("fitted quadric is not an ellipsoid")
    o = -np.linalg.solve(A, bvec)
    k = o @ A @ o - c
    if k <= 0:
        raise DegenerateEllipsoidError("fitted quadric is empty")
    shape = k * np.linalg.inv(A) * scale**2
    D_I0 = np.linalg.cholesky(0.5 * (shape + shape.T))
    return D_I0, center + scale * o


# Lower-triangular entries of D_I in parameter order.
_TRIL = np.tril_indices(3)


def _directions(angles):
    phi, gam = angles[:, 0], angles[:, 1]
    return np.column_stack([-np.sin(gam), np.cos(gam) * np.sin(phi), np.cos(gam) * np.cos(phi)])


def _direction_partials(angles):
    phi, gam = angles[:, 0], angles[:, 1]
    d_phi = np.column_stack([np.zeros_like(phi), np.cos(gam) * np.cos(phi), -np.cos(gam) * np.sin(phi)])
    d_gam = np.column_stack([-np.cos(gam), -np.sin(gam) * np.sin(phi), -np.sin(gam) * np.cos(phi)])
    return d_phi, d_gam


@dataclass
class _IntrinsicState:
    D_I: np.ndarray
    o_m: np.ndarray
    angles: np.ndarray


@dataclass
class _IntrinsicSystem:
    blocks: np.ndarray  # (T, 2, 2) per-sample angle blocks
    border: np.ndarray  # (T, 2, 9)
    param: np.ndarray  # (9, 9)
    b_angles: np.ndarray
    b_param: np.ndarray
    cost: float


class IntrinsicProblem:
    """
    Magnetometer-only fit ``m_k = D_I Rx(phi_k) Ry(gam_k) e_z + o_m``.

    Nine global unknowns (six lower-triangular entries of ``D_I`` and
    ``o_m``) plus a (roll, pitch) pair per sample; the per-sample blocks are
    independent, so steps are taken with a 2x2 block Schur complement.
    """

    def __init__(self, mag):
        m = np.asarray(mag, dtype=float)
        self.mag = m[~np.isnan(m).any(axis=1)]

    def _residuals(self, x):
        u = _directions(x.angles)
        return self.mag - u @ x.D_I.T - x.o_m, u

    def cost(self, x):
        e, _ = self._residuals(x)
        return float(np.sum(e**2))

    def linearize(self, x):
        e, u = self._residuals(x)
        T = len(e)
        d_phi, d_gam = _direction_partials(x.angles)
        J_ang = -np.stack([d_phi @ x.D_I.T, d_gam @ x.D_I.T], axis=-1)  # (T, 3, 2)
        J_par = np.zeros((T, 3, 9))
        for col, (i, j) in enumerate(zip(*_TRIL)):
            J_par[:, i, col] = -u[:, j]
        J_par[:, :, 6:9] = -np.eye(3)
        tT = lambda A: np.swapaxes(A, -1, -2)
        flat = J_par.reshape(-1, 9)
        return _IntrinsicSystem(
            blocks=tT(J_ang) @ J_ang,
            border=tT(J_ang) @ J_par,
            param=flat.T @ flat,
            b_angles=-np.einsum("kji,kj->ki", J_ang, e),
            b_param=-flat.T @ e.ravel(),
            cost=float(np.sum(e**2)),
        )

    def solve(self, sys, lam):
        d = np.diagonal(sys.blocks, axis1=1, axis2=2)
        floor = 1e-9 * max(float(d.max()), 1e-300)
        blocks = sys.blocks.copy()
        blocks[:, [0, 1], [0, 1]] += lam * np.maximum(d, floor) + floor
        inv = np.linalg.inv(blocks)
        Y = inv @ sys.border  # (T, 2, 9)
        y = np.einsum("kij,kj->ki", inv, sys.b_angles)
        tT = lambda A: np.swapaxes(A, -1, -2)
        Hpp = sys.param.copy()
        Hpp[np.diag_indices(9)] += lam * np.diagonal(sys.param)
        S = Hpp - np.einsum("kji,kjl->il", sys.border, Y)
        g = sys.b_param - np.einsum("kji,kj->i", sys.border, y)
        dp = scipy.linalg.cho_solve(scipy.linalg.cho_factor(S), g)
        dang = y - np.einsum("kij,j->ki", Y, dp)
        return np.concatenate([dp, dang.ravel()])

    def retract(self, x, step):
        D = x.D_I.copy()
        D[_TRIL] += step[:6]
        return _IntrinsicState(D, x.o_m + step[6:9], x.angles + step[9:].reshape(-1, 2))

    def seed_angles(self, D_I0, o_m0):
        """Roll/pitch from the direction of ``D_I0^{-1} (m - o_m0)``."""
        v = np.linalg.solve(D_I0, (self.mag - o_m0).T).T
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        gam = np.arcsin(np.clip(-v[:, 0], -1.0, 1.0))
        phi = np.arctan2(v[:, 1], v[:, 2])
        return np.column_stack([phi, gam])


def intrinsic_refine(mag, seed, options=None):
    """
    Maximum-likelihood intrinsic calibration seeded by :func:`ellipsoid_fit`.

    ``residual_rms`` is normalized by the residual degrees of freedom
    ``3T - 2T - 9``, so it estimates the per-axis noise level.

    Raises
    ------
    InitializationError
        If the iterations do not converge.
    """
    D_I0, o_m0 = seed
    problem = IntrinsicProblem(mag)
    x0 = _IntrinsicState(np.tril(np.asarray(D_I0, float)), np.asarray(o_m0, float).copy(),
                         problem.seed_angles(D_I0, o_m0))
    opts = options or SolverOptions(max_iter=200, step_tol=1e-10)
    x, report, _ = levenberg_marquardt(problem, x0, opts)
    if report.termination_reason not in ("step_tol",):
        raise InitializationError(f"intrinsic calibration did not converge ({report.termination_reason})")
    # Gauge: positive diagonal (flip columns together with the directions).
    D = x.D_I
    T = len(problem.mag)
    dof = max(3 * T - 2 * T - 9, 1)
    rms = float(np.sqrt(report.final_cost / dof))
    if np.any(np.diag(D) <= 0):
        raise InitializationError("intrinsic calibration left the positive-diagonal gauge")
    return IntrinsicResult(D, x.o_m, x.angles, rms, report)


def _relative_rotations(gyro, bias, dt, index):
    """Gyro rotation vectors between consecutive magnetometer rows."""
    steps = so3.exp_map((np.asarray(gyro)[:-1] - bias) * dt)
    P = so3.cumulative_product(steps)
    rel = np.swapaxes(P[index[:-1]], -1, -2) @ P[index[1:]]
    return so3.log_map(rel)


EXCITATION_FACTOR = 4.0
EXCITATION_BLOCK_S = 0.5


def extrinsic_align(gyro, mag, bias, D_I, o_m, dt, max_iter=20, sigma_w=None):
    """
    Misalignment ``R_D`` between magnetometer and IMU frames.

    In a homogeneous field the corrected field ``h = D_I^{-1}(m - o_m)``
    obeys ``h_j - h_i ~= hat(h_mid) R_D phi_ij`` where ``phi_ij`` is the
    gyro rotation vector between the samples. A linear least-squares
    solve for the nine entries of ``R_D`` is projected onto SO(3) with an
    SVD and then refined by Gauss-Newton on the rotation.

    With ``sigma_w`` given, the scatter matrix ``sum phi phi^T`` of the gyro
    rotation vectors over ``EXCITATION_BLOCK_S`` blocks must exceed
    ``EXCITATION_FACTOR`` times the level that gyro noise alone produces in
    every direction; otherwise the rotation axes do not span 3-D and ``R_D``
    is not observable.

    Raises
    ------
    InsufficientExcitationError
        If the rotation Hessian has rank below 3 or the motion does not
        rise above the gyro noise in every direction.
    """
    mag = np.asarray(mag, dtype=float)
    index = np.flatnonzero(~np.isnan(mag).any(axis=1))
    h = np.linalg.solve(D_I, (mag[index] - o_m).T).T
    phi = _relative_rotations(gyro, bias, dt, index)
    if sigma_w is not None:
        block = max(int(round(EXCITATION_BLOCK_S / dt)), 1)
        edges = np.arange(0, len(gyro), block)
        if len(edges) < 2:
            raise InsufficientExcitationError("dataset too short to judge rotation excitation")
        phi_blocks = _relative_rotations(gyro, bias, dt, edges)
        noise_floor = float(edges[-1]) * (sigma_w * dt) ** 2
        scatter = np.linalg.eigvalsh(phi_blocks.T @ phi_blocks)
        if scatter[0] < EXCITATION_FACTOR * noise_floor:
            raise InsufficientExcitationError(
                "rotation does not excite all three axes above the gyro noise level"
            )
    dh = h[1:] - h[:-1]
    Hm = so3.hat(0.5 * (h[1:] + h[:-1]))

    def hessian(R):
        J = -Hm @ so3.hat(phi @ R.T)  # d/d(delta) of hat(h) Exp(delta) R phi
        return np.einsum("kji,kjl->il", J, J), J

    # Linear seed: hat(h) (phi^T kron I) vec(R) = dh.
    A = np.einsum("kij,kl->kilj", Hm, phi).reshape(-1, 3, 9)
    G = np.einsum("kji,kjl->il", A, A)
    R = np.eye(3)
    sv = np.linalg.svd(G, compute_uv=False)
    if sv[0] > 0 and sv[-1] > 1e-10 * sv[0]:
        vecR = np.linalg.solve(G, np.einsum("kji,kj->i", A, dh))
        U, _, Vt = np.linalg.svd(vecR.reshape(3, 3, order="F"))
        R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt

    H, _ = hessian(R)
    ev = np.linalg.eigvalsh(H)
    if ev[-1] <= 0 or ev[0] < 1e-9 * ev[-1]:
        raise InsufficientExcitationError("insufficient angular excitation for extrinsic alignment")

    for _ in range(max_iter):
        H, J = hessian(R)
        e = dh - np.einsum("kij,kj->ki", Hm, phi @ R.T)
        delta = np.linalg.solve(H, np.einsum("kji,kj->i", J, e))
        R = so3.orthonormalize(so3.exp_map(delta) @ R)
        if np.linalg.norm(delta) < 1e-12:
            break
    return R


def build_init(dataset, noise, config=None):
    """
    Full initialization pipeline.

    Parameters
    ----------
    dataset : Dataset
    noise : NoiseConfig
    config : InitConfig, optional

    Returns
    -------
    InitBundle
        ``trajectory0`` holds one rotation per IMU sample.
    """
    cfg = config or InitConfig()
    bias, span = estimate_gyro_bias(
        dataset.gyro, dataset.accel, dataset.dt, noise.sigma_w, noise.sigma_a, cfg.stationary
    )
    trajectory = dead_reckon(dataset.gyro, bias, dataset.dt)
    seed = ellipsoid_fit(dataset.mag)
    intrinsic = intrinsic_refine(dataset.mag, seed)
    R_D = extrinsic_align(
        dataset.gyro, dataset.mag, bias, intrinsic.D_I, intrinsic.o_m, dataset.dt, sigma_w=noise.sigma_w
    )
    params = CalibrationParams(
        o_a=np.zeros(3),
        o_w=bias,
        D_m=intrinsic.D_I @ R_D,
        o_m=intrinsic.o_m,
        alpha=np.deg2rad(cfg.dip_angle_deg),
    )
    return InitBundle(params, trajectory, span, intrinsic, R_D)
