import numpy as np
import pytest

from magimu import metrics
from magimu.models import CalibrationParams


def test_zero_error_for_identical_parameters():
    p = CalibrationParams(o_a=[0.1, 0.2, 0.3], o_m=[1.0, 2.0, 3.0], alpha=1.2)
    assert all(v == 0.0 for v in metrics.group_errors(p, p).values())


def test_group_norms():
    t = CalibrationParams()
    D = np.eye(3)
    D[1, 2] = 0.3
    e = CalibrationParams(o_a=[3.0, 4.0, 0.0], D_m=D, alpha=-0.2)
    err = metrics.parameter_errors(e, t)
    assert err["o_a"]["norm"] == pytest.approx(5.0)
    assert err["D_m"]["norm"] == pytest.approx(0.3)
    assert err["D_m"]["vector"][5] == pytest.approx(0.3)  # row-major (1, 2)
    assert err["alpha"]["norm"] == pytest.approx(0.2)
    assert set(err) == set(metrics.GROUPS) == set(metrics.UNITS)


def test_rmse():
    runs = [{g: 1.0 for g in metrics.GROUPS}, {g: 3.0 for g in metrics.GROUPS}]
    out = metrics.rmse(runs)
    assert out["o_m"] == pytest.approx(np.sqrt(5.0))
    assert all(np.isnan(v) for v in metrics.rmse([]).values())
