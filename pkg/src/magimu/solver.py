"""
Levenberg-Marquardt on the product manifold ``R^19 x SO(3)^M``.

The normal equations have an arrow structure: a block-tridiagonal 3x3 state
part and a dense border for the 19 calibration parameters. A step eliminates
the states first with a banded Cholesky factorization, then solves the small
parameter Schur complement, so one iteration costs O(M).
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from . import so3
from .models import GRAVITY, THETA_DIM, THETA_SLICES, CalibrationParams
from .preintegration import preint_terms, preintegrate_keyframes
from .residuals import WhiteningFactors, accel_terms, gyro_terms, mag_terms

log = logging.getLogger(__name__)

_BAND = 5  # upper bandwidth of a 3x3 block-tridiagonal matrix


@dataclass
class Estimate:
    params: CalibrationParams
    rotations: np.ndarray

    def copy(self):
        return Estimate(self.params, self.rotations.copy())


@dataclass
class SolverOptions:
    max_iter: int = 100
    step_tol: float = 1e-6
    initial_lambda: float = 1e-4
    lambda_floor: float = 1e-12
    lambda_max: float = 1e8
    freeze: tuple = ()


@dataclass
class SolveReport:
    iterations: int = 0
    final_cost: float = np.inf
    step_norms: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    termination_reason: str = ""
    wall_time: float = 0.0
    schur_min_eigenvalue: float = np.nan
    relinearized: bool = False

    @property
    def converged(self):
        return self.termination_reason == "step_tol"

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "final_cost": self.final_cost,
            "step_norms": list(self.step_norms),
            "costs": list(self.costs),
            "termination_reason": self.termination_reason,
            "wall_time": self.wall_time,
            "schur_min_eigenvalue": self.schur_min_eigenvalue,
            "relinearized": self.relinearized,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class NormalEquations:
    """
    Gauss-Newton system ``H d = b`` in arrow form.

    ``diag[i]`` and ``off[i]`` are the state blocks ``H[i, i]`` and
    ``H[i, i+1]``; ``border[i]`` couples state ``i`` with the parameters.
    """

    diag: np.ndarray
    off: np.ndarray
    border: np.ndarray
    param: np.ndarray
    b_state: np.ndarray
    b_param: np.ndarray
    cost: float

    @property
    def num_states(self):
        return len(self.diag)

    def to_dense(self):
        """Full matrix with the parameters first, then the states."""
        M, P = self.num_states, self.param.shape[0]
        H = np.zeros((P + 3 * M, P + 3 * M))
        H[:P, :P] = self.param
        border = self.border.reshape(3 * M, P)
        H[P:, :P] = border
        H[:P, P:] = border.T
        for i in range(M):
            s = P + 3 * i
            H[s : s + 3, s : s + 3] = self.diag[i]
            if i < M - 1:
                H[s : s + 3, s + 3 : s + 6] = self.off[i]
                H[s + 3 : s + 6, s : s + 3] = self.off[i].T
        b = np.concatenate([self.b_param, self.b_state.ravel()])
        return H, b

    def to_sparse(self):
        H, b = self.to_dense()
        return scipy.sparse.csr_matrix(H), b


def _banded_upper(diag, off):
    """Upper banded storage (LAPACK ``pbtrf`` layout) of the state block."""
    M = len(diag)
    ab = np.zeros((_BAND + 1, 3 * M))
    idx = 3 * np.arange(M)
    for p in range(3):
        for q in range(p, 3):
            ab[_BAND + p - q, idx + q] = diag[:, p, q]
    for p in range(3):
        for q in range(3):
            ab[_BAND - (3 + q - p), idx[:-1] + 3 + q] = off[:, p, q]
    return ab


def solve_step(neq, lam, active=None):
    """
    Solve ``(H + lam diag(H)) d = b`` by eliminating the states first.

    Parameters
    ----------
    neq : NormalEquations
    lam : float
        Levenberg-Marquardt damping.
    active : array of bool, optional
        Parameter mask; inactive (frozen) parameters get a zero step.

    Returns
    -------
    ndarray
        Step ordered as ``(parameters, state_0, ..., state_{M-1})``.

    Raises
    ------
    numpy.linalg.LinAlgError
        If the damped system is not positive definite.
    """
    M, P = neq.num_states, neq.param.shape[0]
    if active is None:
        active = np.ones(P, dtype=bool)

    diag = neq.diag.copy()
    d = np.diagonal(diag, axis1=1, axis2=2)
    floor = 1e-12 * max(float(d.max()), 1e-300)
    diag[:, np.arange(3), np.arange(3)] += lam * np.maximum(d, floor)
    ab = _banded_upper(diag, neq.off)
    cb = scipy.linalg.cholesky_banded(ab, lower=False)

    B = neq.border.reshape(3 * M, P)[:, active]
    rhs = np.column_stack([neq.b_state.ravel(), B])
    sol = scipy.linalg.cho_solve_banded((cb, False), rhs)
    y, X = sol[:, 0], sol[:, 1:]

    Hpp = neq.param[np.ix_(active, active)].copy()
    dp = np.diagonal(Hpp).copy()
    Hpp[np.diag_indices_from(Hpp)] += lam * np.maximum(dp, floor)
    S = Hpp - B.T @ X
    g = neq.b_param[active] - B.T @ y
    delta_p = scipy.linalg.cho_solve(scipy.linalg.cho_factor(S), g) if active.any() else g
    delta_s = y - X @ delta_p

    step = np.zeros(P + 3 * M)
    step[:P][active] = delta_p
    step[P:] = delta_s
    return step


def schur_complement(neq, active=None):
    """Parameter block after eliminating the states (undamped)."""
    M, P = neq.num_states, neq.param.shape[0]
    if active is None:
        active = np.ones(P, dtype=bool)
    cb = scipy.linalg.cholesky_banded(_banded_upper(neq.diag, neq.off), lower=False)
    B = neq.border.reshape(3 * M, P)[:, active]
    X = scipy.linalg.cho_solve_banded((cb, False), B)
    return neq.param[np.ix_(active, active)] - B.T @ X


def retract(estimate, step):
    """Additive update for the parameters, ``Exp(d) R`` for every rotation."""
    theta = estimate.params.to_vector() + step[:THETA_DIM]
    delta = step[THETA_DIM:].reshape(-1, 3)
    if len(delta) != len(estimate.rotations):
        raise ValueError("step length does not match the estimate")
    rotations = so3.orthonormalize(so3.exp_map(delta) @ estimate.rotations)
    return Estimate(CalibrationParams.from_vector(theta), rotations)


def freeze_mask(freeze):
    """Boolean mask of active calibration parameters."""
    active = np.ones(THETA_DIM, dtype=bool)
    for name in freeze:
        if name not in THETA_SLICES:
            raise ValueError(f"unknown parameter block {name!r}")
        active[THETA_SLICES[name]] = False
    return active


class CalibrationProblem:
    """
    Joint calibration cost for one dataset.

    With ``rate_ratio == 1`` every sample carries a state and consecutive
    states are tied by gyroscope residuals. Otherwise states sit at the
    keyframes and are tied by preintegrated rotations linearized at
    ``nominal_bias``.

    Parameters
    ----------
    dataset : Dataset
    noise : NoiseConfig
    nominal_bias : array_like, optional
        Linearization point of the preintegrated gyro bias (``N > 1`` only).
    freeze : iterable of str
        Parameter blocks held fixed.
    g0 : float
    """

    def __init__(self, dataset, noise, nominal_bias=None, freeze=(), g0=GRAVITY):
        self.dataset = dataset
        self.noise = noise
        self.g0 = g0
        self.N = dataset.rate_ratio
        self.freeze = tuple(freeze)
        self.active = freeze_mask(self.freeze)
        self.factors = WhiteningFactors.from_noise(noise)
        if self.N == 1:
            self.index = np.arange(dataset.num_samples)
            self.preint = None
        else:
            bias = np.zeros(3) if nominal_bias is None else np.asarray(nominal_bias, float)
            self.preint = preintegrate_keyframes(
                dataset.gyro, self.N, bias, dataset.dt, noise.sigma_w
            )
            self.index = np.arange(len(self.preint) + 1) * self.N
        self.accel = dataset.accel[self.index]
        self.mag = dataset.mag[self.index]

    @property
    def num_states(self):
        return len(self.index)

    @property
    def nominal_bias(self):
        return None if self.preint is None else self.preint.nominal_bias

    def initial_estimate(self, params, trajectory):
        """Pick the keyframe rotations out of a full-rate trajectory."""
        trajectory = np.asarray(trajectory)
        if len(trajectory) == self.num_states:
            return Estimate(params, trajectory.copy())
        return Estimate(params, trajectory[self.index].copy())

    def _terms(self, x):
        p = x.params
        R = x.rotations
        f = self.factors
        ra, ja_R, ja_o = accel_terms(R, self.accel, p.o_a, f.L_a, self.g0)
        rm, jm_R, jm_D, jm_al, jm_o = mag_terms(R, self.mag, p.D_m, p.o_m, p.alpha, f.L_m)
        if self.preint is None:
            d = self.dataset
            rw, jw_a, jw_b, jw_o = gyro_terms(R[:-1], R[1:], d.gyro[:-1], p.o_w, f.L_w, d.dt)
            jw_o = np.broadcast_to(jw_o, jw_a.shape)
        else:
            pi = self.preint
            rw, jw_a, jw_b, jw_o = preint_terms(
                R[:-1], R[1:], pi.delta_R, pi.bias_jacobian, p.o_w - pi.nominal_bias, pi.sigma
            )
        return (ra, ja_R, ja_o), (rm, jm_R, jm_D, jm_al, jm_o), (rw, jw_a, jw_b, jw_o)

    def cost(self, x):
        (ra, *_), (rm, *_), (rw, *_) = self._terms(x)
        return float(np.sum(ra**2) + np.sum(rm**2) + np.sum(rw**2))

    def residual_vector(self, x):
        (ra, *_), (rm, *_), (rw, *_) = self._terms(x)
        return np.concatenate([ra.ravel(), rm.ravel(), rw.ravel()])

    def linearize(self, x):
        """Assemble ``H = J^T J``, ``b = -J^T r`` and the cost at ``x``."""
        return assemble_normal_equations(self, x)

    def dense_jacobian(self, x):
        """
        Materialized Jacobian, columns ``(parameters, states)`` and rows
        ordered as in :meth:`residual_vector`.
        """
        M, P = self.num_states, THETA_DIM
        s = THETA_SLICES
        (ra, ja_R, ja_o), (rm, jm_R, jm_D, jm_al, jm_o), (rw, jw_a, jw_b, jw_o) = self._terms(x)
        K = len(rw)
        J = np.zeros((3 * (2 * M + K), P + 3 * M))
        for i in range(M):
            r = 3 * i
            J[r : r + 3, s["o_a"]] = ja_o
            J[r : r + 3, P + 3 * i : P + 3 * i + 3] = ja_R[i]
            r = 3 * (M + i)
            J[r : r + 3, s["D_m"]] = jm_D[i]
            J[r : r + 3, s["alpha"]] = jm_al[i][:, None]
            J[r : r + 3, s["o_m"]] = jm_o
            J[r : r + 3, P + 3 * i : P + 3 * i + 3] = jm_R[i]
        for k in range(K):
            r = 3 * (2 * M + k)
            J[r : r + 3, s["o_w"]] = jw_o[k]
            J[r : r + 3, P + 3 * k : P + 3 * k + 3] = jw_a[k]
            J[r : r + 3, P + 3 * k + 3 : P + 3 * k + 6] = jw_b[k]
        return J

    def solve(self, neq, lam):
        return solve_step(neq, lam, self.active)

    def retract(self, x, step):
        return retract(x, step)


def assemble_normal_equations(problem, x):
    """
    Accumulate the arrow-structured normal equations over all residual blocks.

    Raises
    ------
    FloatingPointError
        If any residual or Jacobian entry is not finite.
    """
    M, P = problem.num_states, THETA_DIM
    s = THETA_SLICES
    (ra, ja_R, ja_o), (rm, jm_R, jm_D, jm_al, jm_o), (rw, jw_a, jw_b, jw_o) = problem._terms(x)
    for arr in (ra, ja_R, rm, jm_R, jm_D, jm_al, rw, jw_a, jw_b, jw_o):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite residual or Jacobian entry")

    cost = float(np.sum(ra**2) + np.sum(rm**2) + np.sum(rw**2))
    tT = lambda A: np.swapaxes(A, -1, -2)

    diag = tT(ja_R) @ ja_R + tT(jm_R) @ jm_R
    diag[:-1] += tT(jw_a) @ jw_a
    diag[1:] += tT(jw_b) @ jw_b
    off = tT(jw_a) @ jw_b

    b_state = -np.einsum("kji,kj->ki", ja_R, ra) - np.einsum("kji,kj->ki", jm_R, rm)
    b_state[:-1] -= np.einsum("kji,kj->ki", jw_a, rw)
    b_state[1:] -= np.einsum("kji,kj->ki", jw_b, rw)

    # Parameter Jacobians per state (accel + mag) and per transition (gyro).
    Jp_meas_a = np.zeros((M, 3, P))
    Jp_meas_a[:, :, s["o_a"]] = ja_o
    Jp_meas_m = np.zeros((M, 3, P))
    Jp_meas_m[:, :, s["D_m"]] = jm_D
    Jp_meas_m[:, :, s["alpha"]] = jm_al[..., None]
    Jp_meas_m[:, :, s["o_m"]] = jm_o
    Jp_w = np.zeros((len(rw), 3, P))
    Jp_w[:, :, s["o_w"]] = jw_o

    border = tT(ja_R) @ Jp_meas_a + tT(jm_R) @ Jp_meas_m
    border[:-1] += tT(jw_a) @ Jp_w
    border[1:] += tT(jw_b) @ Jp_w

    stack = lambda A: A.reshape(-1, P)
    param = (
        stack(Jp_meas_a).T @ stack(Jp_meas_a)
        + stack(Jp_meas_m).T @ stack(Jp_meas_m)
        + stack(Jp_w).T @ stack(Jp_w)
    )
    b_param = -(
        stack(Jp_meas_a).T @ ra.ravel() + stack(Jp_meas_m).T @ rm.ravel() + stack(Jp_w).T @ rw.ravel()
    )
    return NormalEquations(diag, off, border, param, b_state, b_param, cost)


def levenberg_marquardt(problem, x0, options=None):
    """
    Generic Levenberg-Marquardt loop.

    ``problem`` provides ``linearize(x)`` (returning an object with a ``cost``
    attribute), ``cost(x)``, ``solve(neq, lam)`` and ``retract(x, step)``.
    A step is accepted only if it lowers the cost; otherwise the damping grows
    tenfold. The loop stops once the step norm drops below ``step_tol``.

    Returns
    -------
    (estimate, SolveReport, NormalEquations)
        The last linearization is returned for diagnostics.
    """
    opts = options or SolverOptions()
    t0 = time.perf_counter()
    report = SolveReport()
    x = x0
    neq = problem.linearize(x)
    cost = neq.cost
    report.costs.append(cost)
    lam = opts.initial_lambda

    while report.iterations < opts.max_iter:
        try:
            step = problem.solve(neq, lam)
        except np.linalg.LinAlgError:
            lam *= 10.0
            if lam > opts.lambda_max:
                report.termination_reason = "lambda_overflow"
                break
            continue
        norm = float(np.linalg.norm(step))
        x_new = problem.retract(x, step)
        try:
            new_cost = problem.cost(x_new)
        except ValueError:
            new_cost = np.inf
        report.iterations += 1
        if norm < opts.step_tol and new_cost <= cost:
            x, cost = x_new, new_cost
            report.step_norms.append(norm)
            report.costs.append(cost)
            report.termination_reason = "step_tol"
            break
        if new_cost < cost:
            x, cost = x_new, new_cost
            report.step_norms.append(norm)
            report.costs.append(cost)
            lam = max(lam / 10.0, opts.lambda_floor)
            neq = problem.linearize(x)
            if norm < opts.step_tol:
                report.termination_reason = "step_tol"
                break
        else:
            lam *= 10.0
            if lam > opts.lambda_max:
                report.termination_reason = "lambda_overflow"
                break
            if norm < opts.step_tol:
                # Tiny rejected steps mean the cost is flat to round-off.
                report.termination_reason = "step_tol"
                break
    else:
        report.termination_reason = "max_iter"

    report.final_cost = cost
    report.wall_time = time.perf_counter() - t0
    return x, report, neq


def optimize(problem, initial_estimate, options=None):
    """
    Minimize the joint calibration cost from ``initial_estimate``.

    Returns ``(estimate, SolveReport)``. Non-convergence is reported through
    ``termination_reason`` together with the best estimate found.
    """
    opts = options or SolverOptions()
    x, report, neq = levenberg_marquardt(problem, initial_estimate, opts)
    try:
        S = schur_complement(problem.linearize(x), problem.active)
        report.schur_min_eigenvalue = float(np.linalg.eigvalsh(S)[0]) if S.size else np.nan
    except (np.linalg.LinAlgError, FloatingPointError, ValueError):
        report.schur_min_eigenvalue = 0.0
    if not report.schur_min_eigenvalue > 0:
        log.warning("parameter block is rank deficient: insufficient rotation excitation")
    return x, report
