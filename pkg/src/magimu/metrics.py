"""
Calibration error metrics.

Per-run errors are absolute differences to ground truth; a group's scalar
error is the Euclidean norm of its difference (Frobenius norm for ``D_m``).
The RMSE of a group over several runs is ``sqrt(mean_runs(error**2))``.
"""

import numpy as np

GROUPS = ("o_m", "D_m", "o_a", "o_w", "alpha")
UNITS = {"o_m": "uT", "D_m": "-", "o_a": "m/s^2", "o_w": "rad/s", "alpha": "rad"}


def parameter_errors(estimate, truth):
    """
    Absolute errors of one estimate.

    Returns
    -------
    dict
        ``{group: {"vector": ..., "norm": float}}``; ``D_m`` carries the
        row-major difference and its Frobenius norm, ``alpha`` a scalar.
    """
    out = {}
    for name in ("o_m", "o_a", "o_w"):
        e = np.asarray(getattr(estimate, name)) - np.asarray(getattr(truth, name))
        out[name] = {"vector": e.tolist(), "norm": float(np.linalg.norm(e))}
    dD = np.asarray(estimate.D_m) - np.asarray(truth.D_m)
    out["D_m"] = {"vector": dD.ravel().tolist(), "norm": float(np.linalg.norm(dD))}
    da = float(estimate.alpha - truth.alpha)
    out["alpha"] = {"vector": [da], "norm": abs(da)}
    return out


def group_errors(estimate, truth):
    """Scalar error per group, ``{group: float}``."""
    return {k: v["norm"] for k, v in parameter_errors(estimate, truth).items()}


def rmse(errors):
    """
    Root mean square over runs.

    Parameters
    ----------
    errors : sequence of dict
        Outputs of :func:`group_errors`.
    """
    if len(errors) == 0:
        return {g: float("nan") for g in GROUPS}
    return {g: float(np.sqrt(np.mean([e[g] ** 2 for e in errors]))) for g in GROUPS}
