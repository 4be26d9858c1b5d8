"""
Filter-based reference estimators.

``wu_ekf``
    Error-state EKF over the orientation augmented with all 19 calibration
    parameters; the calibration estimate is the filter mean after the last
    sample.
``kok_ml``
    Maximum likelihood: a 3-state orientation EKF evaluates the prediction
    error likelihood of a candidate parameter vector, which BFGS minimizes
    using central-difference gradients.

Both filters use the left-multiplicative error ``R = Exp(d) R_hat`` and only
update when an accelerometer and magnetometer sample arrive together, i.e.
at the keyframes ``0, N, 2N, ...``.
"""

import time
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.optimize

from .models import GRAVITY, THETA_DIM, THETA_SLICES, CalibrationParams

_SMALL = 1e-5
_LOG_2PI = np.log(2.0 * np.pi)


class FilterDivergenceError(RuntimeError):
    """The filter covariance stopped being positive semidefinite."""


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _hat(v):
    K = np.zeros((3, 3))
    K[0, 1] = -v[2]
    K[0, 2] = v[1]
    K[1, 0] = v[2]
    K[1, 2] = -v[0]
    K[2, 0] = -v[1]
    K[2, 1] = v[0]
    return K


@numba.njit(cache=True)
def _exp_jr_into(v, E, J):
    """Write Exp(v) into ``E`` and the right Jacobian J_r(v) into ``J``."""
    x, y, z = v[0], v[1], v[2]
    t2 = x * x + y * y + z * z
    t = np.sqrt(t2)
    if t < _SMALL:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        st = np.sin(t)
        a = st / t
        b = (1.0 - np.cos(t)) / t2
        c = (t - st) / (t2 * t)
    # K = hat(v); K^2 = v v^T - |v|^2 I.
    K01, K02, K12 = -z, y, -x
    for i in range(3):
        for j in range(3):
            E[i, j] = 0.0
            J[i, j] = 0.0
    vv = (x, y, z)
    for i in range(3):
        for j in range(3):
            k2 = vv[i] * vv[j] - (t2 if i == j else 0.0)
            E[i, j] = (1.0 if i == j else 0.0) + b * k2
            J[i, j] = (1.0 if i == j else 0.0) + c * k2
    E[0, 1] += a * K01
    E[1, 0] -= a * K01
    E[0, 2] += a * K02
    E[2, 0] -= a * K02
    E[1, 2] += a * K12
    E[2, 1] -= a * K12
    J[0, 1] -= b * K01
    J[1, 0] += b * K01
    J[0, 2] -= b * K02
    J[2, 0] += b * K02
    J[1, 2] -= b * K12
    J[2, 1] += b * K12


@numba.njit(cache=True)
def _exp_jr(v):
    """Exp(v) and the right Jacobian J_r(v)."""
    E = np.empty((3, 3))
    J = np.empty((3, 3))
    _exp_jr_into(v, E, J)
    return E, J


@numba.njit(cache=True)
def _cholesky(A):
    """Lower Cholesky factor; ``ok`` is False if ``A`` is not positive definite."""
    n = A.shape[0]
    L = np.zeros_like(A)
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return L, False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    return L, True


@numba.njit(cache=True)
def _chol_solve(L, B):
    """Solve ``L L^T X = B`` for a matrix right-hand side."""
    n, m = B.shape
    Y = np.empty_like(B)
    for c in range(m):
        for i in range(n):
            s = B[i, c]
            for k in range(i):
                s -= L[i, k] * Y[k, c]
            Y[i, c] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = Y[i, c]
            for k in range(i + 1, n):
                s -= L[k, i] * Y[k, c]
            Y[i, c] = s / L[i, i]
    return Y


@numba.njit(cache=True)
def _measurement(R, theta, g0):
    """Predicted accel/mag (6,), the rotation Jacobian (6, 3) and the parameter Jacobian (6, 19)."""
    D = np.empty((3, 3))
    for j in range(3):
        for i in range(3):
            D[i, j] = theta[6 + i + 3 * j]
    alpha = theta[18]
    m_n = np.array([0.0, np.cos(alpha), -np.sin(alpha)])
    dm_n = np.array([0.0, -np.sin(alpha), -np.cos(alpha)])
    g_n = np.array([0.0, 0.0, g0])
    Rt = R.T.copy()
    b = Rt @ m_n
    h = np.empty(6)
    h[:3] = -(Rt @ g_n) + theta[0:3]
    h[3:] = D @ b + theta[15:18]
    HR = np.zeros((6, 3))
    HR[:3] = -(Rt @ _hat(g_n))
    HR[3:] = D @ Rt @ _hat(m_n)
    Hp = np.zeros((6, 19))
    for i in range(3):
        Hp[i, i] = 1.0
        Hp[3 + i, 15 + i] = 1.0
        for j in range(3):
            Hp[3 + i, 6 + i + 3 * j] = b[j]
    Hp[3:, 18] = D @ (Rt @ dm_n)
    return h, HR, Hp


@numba.njit(cache=True)
def _wu_kernel(gyro, accel, mag, dt, N, g0, R0, theta0, P0, var_w, var_a, var_m):
    n = gyro.shape[0]
    d = 3 + 19
    R = R0.copy()
    theta = theta0.copy()
    P = P0.copy()
    Rn = np.zeros((6, 6))
    for i in range(3):
        Rn[i, i] = var_a
        Rn[3 + i, 3 + i] = var_m
    I = np.eye(d)
    updates = 0
    for k in range(n):
        if k % N == 0:
            h, HR, Hp = _measurement(R, theta, g0)
            H = np.zeros((6, d))
            H[:, :3] = HR
            H[:, 3:] = Hp
            nu = np.empty(6)
            nu[:3] = accel[k] - h[:3]
            nu[3:] = mag[k] - h[3:]
            PHt = P @ H.T
            S = H @ PHt + Rn
            L, ok = _cholesky(S)
            if not ok:
                return R, theta, P, updates, k
            K = _chol_solve(L, PHt.T).T
            dx = K @ nu
            A = I - K @ H
            P = A @ P @ A.T + K @ Rn @ K.T
            P = 0.5 * (P + P.T)
            E, _ = _exp_jr(dx[:3])
            R = E @ R
            theta += dx[3:]
            updates += 1
            for i in range(d):
                if not P[i, i] >= 0.0:
                    return R, theta, P, updates, k
        if k < n - 1:
            phi = (gyro[k] - theta[3:6]) * dt
            E, Jr = _exp_jr(phi)
            R = R @ E
            G = R @ Jr * dt
            # F = I except the coupling of the rotation error to the gyro bias.
            # P <- F P F^T with F[:3, 6:9] = -G, then add G Sigma_w G^T.
            FP = P.copy()
            FP[:3, :] -= G @ P[6:9, :]
            P = FP.copy()
            P[:, :3] -= FP[:, 6:9] @ G.T
            P[:3, :3] += var_w * (G @ G.T)
    return R, theta, P, updates, -1


@numba.njit(cache=True)
def _mm(A, B, out):
    """``out = A @ B`` without temporaries."""
    for i in range(A.shape[0]):
        for j in range(B.shape[1]):
            s = 0.0
            for k in range(A.shape[1]):
                s += A[i, k] * B[k, j]
            out[i, j] = s


@numba.njit(cache=True)
def _cholesky_into(A, L):
    n = A.shape[0]
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    return True


@numba.njit(cache=True)
def _chol_solve_vec(L, b, out):
    n = b.shape[0]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * out[k]
        out[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, n):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]


@numba.njit(cache=True)
def _orientation_ekf(gyro, accel, mag, dt, N, g0, R0, P0, theta, var_w, var_a, var_m, store, innov, covs):
    """Negative log-likelihood of ``theta``; +inf if the filter breaks down."""
    n = gyro.shape[0]
    R = R0.copy()
    P = P0.copy()
    D = np.empty((3, 3))
    for j in range(3):
        for i in range(3):
            D[i, j] = theta[6 + i + 3 * j]
    ca = np.cos(theta[18])
    sa = np.sin(theta[18])
    H = np.empty((6, 3))
    Hm = np.empty((3, 3))
    HP = np.empty((6, 3))
    S = np.empty((6, 6))
    L = np.zeros((6, 6))
    nu = np.empty(6)
    z = np.empty(6)
    col = np.empty(6)
    K = np.empty((3, 6))
    A = np.empty((3, 3))
    AP = np.empty((3, 3))
    Pn = np.empty((3, 3))
    RE = np.empty((3, 3))
    G = np.empty((3, 3))
    phi = np.empty(3)
    E = np.empty((3, 3))
    Jr = np.empty((3, 3))
    nll = 0.0
    j_up = 0
    for k in range(n):
        if k % N == 0:
            # Predicted accel -R^T g + o_a and its rotation Jacobian -R^T hat(g).
            for i in range(3):
                nu[i] = accel[k, i] + g0 * R[2, i] - theta[i]
                H[i, 0] = -g0 * R[1, i]
                H[i, 1] = g0 * R[0, i]
                H[i, 2] = 0.0
                # R^T hat(m_n) row i
                Hm[i, 0] = -sa * R[1, i] - ca * R[2, i]
                Hm[i, 1] = sa * R[0, i]
                Hm[i, 2] = ca * R[0, i]
            for i in range(3):
                hm = theta[15 + i]
                for l in range(3):
                    hm += D[i, l] * (ca * R[1, l] - sa * R[2, l])
                nu[3 + i] = mag[k, i] - hm
                for c in range(3):
                    s = 0.0
                    for l in range(3):
                        s += D[i, l] * Hm[l, c]
                    H[3 + i, c] = s
            _mm(H, P, HP)
            for i in range(6):
                for c in range(6):
                    s = 0.0
                    for l in range(3):
                        s += HP[i, l] * H[c, l]
                    S[i, c] = s
                S[i, i] += var_a if i < 3 else var_m
            if not _cholesky_into(S, L):
                return np.inf
            _chol_solve_vec(L, nu, z)
            logdet = 0.0
            quad = 0.0
            for i in range(6):
                logdet += 2.0 * np.log(L[i, i])
                quad += nu[i] * z[i]
            nll += 0.5 * (6.0 * _LOG_2PI + logdet + quad)
            if store:
                innov[j_up] = nu
                covs[j_up] = S
            j_up += 1
            # K = P H^T S^-1, one column of S^-1 H P at a time.
            for r in range(3):
                for i in range(6):
                    col[i] = HP[i, r]
                _chol_solve_vec(L, col, z)
                for i in range(6):
                    K[r, i] = z[i]
            # Joseph form (I - K H) P (I - K H)^T + K Rn K^T.
            for r in range(3):
                for c in range(3):
                    s = 1.0 if r == c else 0.0
                    for i in range(6):
                        s -= K[r, i] * H[i, c]
                    A[r, c] = s
            _mm(A, P, AP)
            for r in range(3):
                for c in range(3):
                    s = 0.0
                    for l in range(3):
                        s += AP[r, l] * A[c, l]
                    for i in range(6):
                        s += K[r, i] * K[c, i] * (var_a if i < 3 else var_m)
                    Pn[r, c] = s
            for r in range(3):
                for c in range(3):
                    P[r, c] = 0.5 * (Pn[r, c] + Pn[c, r])
            for r in range(3):
                s = 0.0
                for i in range(6):
                    s += K[r, i] * nu[i]
                phi[r] = s
            _exp_jr_into(phi, E, Jr)
            _mm(E, R, RE)
            R[:, :] = RE
        if k < n - 1:
            for i in range(3):
                phi[i] = (gyro[k, i] - theta[3 + i]) * dt
            _exp_jr_into(phi, E, Jr)
            _mm(R, E, RE)
            R[:, :] = RE
            _mm(R, Jr, G)
            for r in range(3):
                for c in range(3):
                    s = 0.0
                    for l in range(3):
                        s += G[r, l] * G[c, l]
                    P[r, c] += var_w * dt * dt * s
    if not np.isfinite(nll):
        return np.inf
    return nll


# ---------------------------------------------------------------------------
# Augmented-state EKF
# ---------------------------------------------------------------------------


def default_prior_std(rotation_deg=5.0, alpha_deg=5.0):
    """
    Prior standard deviations of the 22-dimensional error state.

    Rotation and dip angle get ``5 deg``; every other entry is the standard
    deviation of the uniform range it is simulated from, ``width / sqrt(12)``.
    Distortion entries use the spread produced by the +-10 deg skew angles.
    """
    w = lambda width: width / np.sqrt(12.0)
    std = np.empty(3 + THETA_DIM)
    std[:3] = np.deg2rad(rotation_deg)
    s = {k: slice(v.start + 3, v.stop + 3) for k, v in THETA_SLICES.items()}
    std[s["o_a"]] = w(1.0)
    std[s["o_w"]] = w(np.deg2rad(0.2))
    std[s["D_m"]] = w(2.0 * np.sin(np.deg2rad(10.0)))
    std[s["o_m"]] = w(4.0)
    std[s["alpha"]] = np.deg2rad(alpha_deg)
    return std


@dataclass
class AugmentedState:
    """
    Filter state after the last sample.

    Attributes
    ----------
    rotation : ndarray (3, 3)
    theta : CalibrationParams
    P : ndarray (22, 22)
        Covariance of ``(d_R, d_theta)``.
    num_updates : int
    wall_time : float
    """

    rotation: np.ndarray
    theta: CalibrationParams
    P: np.ndarray
    num_updates: int = 0
    wall_time: float = 0.0

    def to_dict(self):
        return {"num_updates": self.num_updates, "wall_time": self.wall_time}


def _sensor_arrays(dataset):
    return (
        np.ascontiguousarray(dataset.gyro),
        np.ascontiguousarray(dataset.accel),
        np.ascontiguousarray(dataset.mag),
    )


def wu_ekf(dataset, init, noise, prior_std=None, g0=GRAVITY):
    """
    Run the augmented-state EKF once over the dataset.

    Parameters
    ----------
    dataset : Dataset
    init : InitBundle
        Supplies the prior mean of the parameters and the initial orientation.
    noise : NoiseConfig
    prior_std : array_like (22,), optional
        Prior standard deviations, see :func:`default_prior_std`.
    g0 : float

    Returns
    -------
    (CalibrationParams, AugmentedState)

    Raises
    ------
    FilterDivergenceError
        If the innovation covariance or the state covariance loses positive
        definiteness.
    """
    std = default_prior_std() if prior_std is None else np.asarray(prior_std, dtype=float)
    P0 = np.diag(std**2)
    t0 = time.perf_counter()
    gyro, accel, mag = _sensor_arrays(dataset)
    R, theta, P, updates, failed = _wu_kernel(
        gyro,
        accel,
        mag,
        float(dataset.dt),
        int(dataset.rate_ratio),
        float(g0),
        np.ascontiguousarray(init.trajectory0[0], dtype=float),
        init.params0.to_vector(),
        P0,
        noise.sigma_w**2,
        noise.sigma_a**2,
        noise.sigma_m**2,
    )
    if failed >= 0:
        raise FilterDivergenceError(f"filter covariance lost definiteness at sample {failed}")
    params = CalibrationParams.from_vector(theta)
    state = AugmentedState(R, params, P, int(updates), time.perf_counter() - t0)
    return params, state


# ---------------------------------------------------------------------------
# EKF maximum likelihood
# ---------------------------------------------------------------------------


@dataclass
class LikelihoodEvaluation:
    """
    Prediction-error likelihood of one parameter vector.

    ``neg_log_likelihood = sum_k 0.5 (ln det(2 pi S_k) + nu_k^T S_k^-1 nu_k)``
    over the stacked accelerometer/magnetometer innovations ``nu_k``.
    """

    theta: CalibrationParams
    neg_log_likelihood: float
    innovations: np.ndarray = None
    covariances: np.ndarray = None


class OrientationFilter:
    """
    Orientation-only EKF used as the likelihood evaluator.

    Counts every pass through the data in ``passes``.
    """

    def __init__(self, dataset, noise, R0=None, rotation_std_deg=5.0, g0=GRAVITY):
        self.dataset = dataset
        self.noise = noise
        self.g0 = float(g0)
        self.R0 = np.eye(3) if R0 is None else np.ascontiguousarray(R0, dtype=float)
        self.P0 = np.deg2rad(rotation_std_deg) ** 2 * np.eye(3)
        self._arrays = _sensor_arrays(dataset)
        self.passes = 0

    def _run(self, theta, store=False):
        n_up = len(self.dataset.keyframes) if store else 0
        innov = np.empty((n_up, 6))
        covs = np.empty((n_up, 6, 6))
        self.passes += 1
        nll = _orientation_ekf(
            *self._arrays,
            float(self.dataset.dt),
            int(self.dataset.rate_ratio),
            self.g0,
            self.R0,
            self.P0,
            np.asarray(theta, dtype=float),
            self.noise.sigma_w**2,
            self.noise.sigma_a**2,
            self.noise.sigma_m**2,
            store,
            innov,
            covs,
        )
        return nll, innov, covs

    def neg_log_likelihood(self, theta):
        """Negative log-likelihood of a parameter vector (``+inf`` on breakdown)."""
        return self._run(theta)[0]

    def evaluate(self, params):
        nll, innov, covs = self._run(params.to_vector(), store=True)
        return LikelihoodEvaluation(params, nll, innov, covs)

    def gradient(self, theta, steps):
        """Central-difference gradient: two filter passes per coordinate."""
        theta = np.asarray(theta, dtype=float)
        g = np.empty(len(theta))
        for i, h in enumerate(steps):
            e = np.zeros(len(theta))
            e[i] = h
            fp = self.neg_log_likelihood(theta + e)
            fm = self.neg_log_likelihood(theta - e)
            if np.isfinite(fp) and np.isfinite(fm):
                g[i] = (fp - fm) / (2.0 * h)
            else:
                g[i] = np.nan
        return g


@dataclass
class KokOptions:
    max_iter: int = 100
    step_tol: float = 1e-6
    fd_step: float = 1e-4  # in units of the prior standard deviations
    gtol: float = 1e-6


@dataclass
class MLResult:
    params: CalibrationParams
    neg_log_likelihood: float
    iterations: int = 0
    ekf_passes: int = 0
    termination_reason: str = ""
    wall_time: float = 0.0
    history: list = field(default_factory=list)

    def to_dict(self):
        return {
            "neg_log_likelihood": self.neg_log_likelihood,
            "iterations": self.iterations,
            "ekf_passes": self.ekf_passes,
            "termination_reason": self.termination_reason,
            "wall_time": self.wall_time,
        }


class _StepTolReached(Exception):
    pass


def kok_ml(dataset, init, noise, optimizer_options=None, g0=GRAVITY):
    """
    Maximum-likelihood calibration with an EKF likelihood.

    The parameters are rescaled by the prior standard deviations of
    :func:`default_prior_std` before BFGS sees them, so one unit is
    comparable across blocks. The loop stops once an accepted step is shorter
    than ``step_tol`` in the original units, or after ``max_iter`` iterations.

    Returns
    -------
    (CalibrationParams, MLResult)
    """
    opts = optimizer_options if isinstance(optimizer_options, KokOptions) else KokOptions()
    if optimizer_options is not None and not isinstance(optimizer_options, KokOptions):
        # Accept the joint solver's options object for a uniform CLI.
        opts.max_iter = getattr(optimizer_options, "max_iter", opts.max_iter)
        opts.step_tol = getattr(optimizer_options, "step_tol", opts.step_tol)
    t0 = time.perf_counter()
    filt = OrientationFilter(dataset, noise, R0=init.trajectory0[0], g0=g0)
    theta0 = init.params0.to_vector()
    scale = default_prior_std()[3:]
    steps = opts.fd_step * np.ones(THETA_DIM)

    def unscale(z):
        return theta0 + scale * z

    def fun(z):
        f = filt.neg_log_likelihood(unscale(z))
        if not np.isfinite(f):
            return np.inf, np.full(THETA_DIM, np.nan)
        # Probing theta +- scale * h is probing z +- h.
        g = scale * filt.gradient(unscale(z), scale * steps)
        if not np.all(np.isfinite(g)):
            return np.inf, np.full(THETA_DIM, np.nan)
        return f, g

    state = {"prev": np.zeros(THETA_DIM), "iterations": 0, "reason": "max_iter"}
    history = []

    def callback(intermediate_result):
        z = intermediate_result.x
        step = np.linalg.norm(scale * (z - state["prev"]))
        state["prev"] = z.copy()
        state["iterations"] += 1
        history.append(float(intermediate_result.fun))
        if step < opts.step_tol:
            state["reason"] = "step_tol"
            raise StopIteration

    res = scipy.optimize.minimize(
        fun,
        np.zeros(THETA_DIM),
        jac=True,
        method="BFGS",
        callback=callback,
        options={"maxiter": opts.max_iter, "gtol": opts.gtol},
    )
    if state["reason"] != "step_tol":
        state["reason"] = "gtol" if res.success else f"stopped: {res.message}"
    params = CalibrationParams.from_vector(unscale(res.x))
    result = MLResult(
        params=params,
        neg_log_likelihood=float(res.fun),
        iterations=state["iterations"],
        ekf_passes=filt.passes,
        termination_reason=state["reason"],
        wall_time=time.perf_counter() - t0,
        history=history,
    )
    return params, result

