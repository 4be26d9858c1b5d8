"""
End-to-end joint calibration: initialization followed by the MAP solve.
"""

import logging

import numpy as np

from .initialization import build_init
from .models import GRAVITY
from .solver import CalibrationProblem, SolverOptions, optimize

log = logging.getLogger(__name__)

# Re-linearize the preintegrated rotations once if the optimized gyro bias
# moved further than this from the nominal bias [rad/s].
RELINEARIZE_THRESHOLD = 0.01


def joint_map(dataset, noise, init, options=None, g0=GRAVITY):
    """
    Joint MAP estimate of the calibration parameters and the trajectory.

    Parameters
    ----------
    dataset : Dataset
    noise : NoiseConfig
    init : InitBundle
    options : SolverOptions, optional
    g0 : float

    Returns
    -------
    estimate : Estimate
        Calibration parameters and the keyframe rotations.
    report : SolveReport
        Report of the final solve. ``report.relinearized`` tells whether the
        preintegrated rotations were rebuilt at an updated nominal bias.
    """
    opts = options or SolverOptions()
    problem = CalibrationProblem(
        dataset, noise, nominal_bias=init.params0.o_w, freeze=opts.freeze, g0=g0
    )
    x, report = optimize(problem, problem.initial_estimate(init.params0, init.trajectory0), opts)
    report.relinearized = False
    if problem.preint is not None:
        shift = np.linalg.norm(x.params.o_w - problem.nominal_bias)
        if shift > RELINEARIZE_THRESHOLD:
            log.info("gyro bias moved %.3g rad/s; re-linearizing preintegration", shift)
            problem = CalibrationProblem(
                dataset, noise, nominal_bias=x.params.o_w, freeze=opts.freeze, g0=g0
            )
            first = report
            x, report = optimize(problem, x, opts)
            report.iterations += first.iterations
            report.wall_time += first.wall_time
            report.relinearized = True
    return x, report


def calibrate(dataset, noise, method="joint_map", init_config=None, options=None, g0=GRAVITY):
    """
    Initialize and run one estimator.

    Returns ``(params, init, info)`` where ``info`` is the estimator-specific
    report object.
    """
    init = build_init(dataset, noise, init_config)
    if method == "joint_map":
        x, report = joint_map(dataset, noise, init, options, g0)
        return x.params, init, report
    from . import baselines

    if method == "wu_ekf":
        params, state = baselines.wu_ekf(dataset, init, noise, g0=g0)
        return params, init, state
    if method == "kok_ml":
        params, result = baselines.kok_ml(dataset, init, noise, options, g0=g0)
        return params, init, result
    raise ValueError(f"unknown method {method!r}")
