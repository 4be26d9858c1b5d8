import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdutil import numeric_jacobian, rel_error, rotation_jacobian
from magimu import so3
from magimu.models import propagate
from magimu.preintegration import (
    covariance_approx,
    integrate,
    preintegrate_keyframes,
    propagated_covariance,
    residual_preint,
)

DT = 0.0125


def test_single_sample_matches_one_step():
    rng = np.random.default_rng(0)
    u, b = rng.normal(size=3), rng.normal(scale=0.01, size=3)
    pre = integrate(u[None], b, DT, 0.01)
    np.testing.assert_allclose(pre.delta_R, propagate(np.eye(3), u, b, DT), atol=1e-14)
    np.testing.assert_allclose(pre.bias_jacobian, -so3.right_jacobian((u - b) * DT) * DT, atol=1e-14)
    np.testing.assert_allclose(pre.cov, (0.01 * DT) ** 2 * np.eye(3))
    assert pre.span == (0, 1)


@pytest.mark.parametrize("N", [1, 2, 5, 16])
def test_constant_rate_oracle(N):
    w = np.array([0.4, -0.7, 1.1])
    pre = integrate(np.tile(w, (N, 1)), np.zeros(3), DT, 0.0)
    np.testing.assert_allclose(pre.delta_R, so3.exp_map(w * N * DT), atol=1e-13)


def test_composition_of_spans():
    rng = np.random.default_rng(1)
    gyro = rng.normal(scale=0.8, size=(12, 3))
    b = np.array([0.01, -0.02, 0.005])
    whole = integrate(gyro, b, DT, 0.01).delta_R
    parts = integrate(gyro[:5], b, DT, 0.01).delta_R @ integrate(gyro[5:], b, DT, 0.01).delta_R
    np.testing.assert_allclose(whole, parts, atol=1e-14)


@given(N=st.integers(1, 20), seed=st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_bias_jacobian_fd(N, seed):
    rng = np.random.default_rng(seed)
    gyro = rng.normal(scale=1.0, size=(N, 3))
    b = rng.normal(scale=0.01, size=3)
    pre = integrate(gyro, b, DT, 0.01)
    fd = numeric_jacobian(lambda bb: so3.log_map(pre.delta_R.T @ integrate(gyro, bb, DT, 0.01).delta_R), b)
    assert rel_error(pre.bias_jacobian, fd) < 1e-6


def test_first_order_bias_update_is_second_order_accurate():
    rng = np.random.default_rng(2)
    gyro = rng.normal(scale=1.0, size=(8, 3))
    b = np.zeros(3)
    pre = integrate(gyro, b, DT, 0.01)
    d = rng.normal(size=3)
    errs = []
    for scale in (1e-2, 1e-3):
        exact = integrate(gyro, b + scale * d, DT, 0.01).delta_R
        errs.append(so3.angle_between(pre.corrected(scale * d), exact))
    # Error shrinks quadratically with the bias change.
    assert errs[1] < errs[0] / 50


@pytest.mark.parametrize("N", [1, 4, 8, 16])
def test_covariance_approx_within_ten_percent(N):
    rng = np.random.default_rng(3)
    gyro = rng.normal(scale=1.0, size=(N, 3))
    sigma_w = 0.02
    exact = propagated_covariance(gyro, np.zeros(3), DT, sigma_w**2 * np.eye(3))
    approx = covariance_approx(N, sigma_w, DT)
    assert np.linalg.norm(approx - exact) <= 0.1 * np.linalg.norm(exact)


def test_covariance_approx_error_grows_with_rate():
    sigma_w, N = 0.02, 8
    errs = []
    for rate in (0.5, 2.0, 8.0, 32.0):
        gyro = np.tile([rate, 0.0, 0.0], (N, 1))
        exact = propagated_covariance(gyro, np.zeros(3), DT, sigma_w**2 * np.eye(3))
        approx = covariance_approx(N, sigma_w, DT)
        errs.append(np.linalg.norm(approx - exact) / np.linalg.norm(exact))
    assert np.all(np.diff(errs) > 0)


def test_covariance_approx_rejects_zero():
    with pytest.raises(ValueError):
        covariance_approx(0, 0.01, DT)


def test_keyframes_layout():
    rng = np.random.default_rng(4)
    gyro = rng.normal(size=(21, 3))
    kf = preintegrate_keyframes(gyro, 4, np.zeros(3), DT, 0.01)
    assert len(kf) == 5
    np.testing.assert_array_equal(kf.starts, [0, 4, 8, 12, 16])
    assert kf.sigma == pytest.approx(0.01 * DT * 2.0)
    pre = integrate(gyro[8:12], np.zeros(3), DT, 0.01, start=8)
    np.testing.assert_allclose(kf[2].delta_R, pre.delta_R, atol=1e-15)
    assert kf[2].span == pre.span


def test_residual_zero_on_consistent_states():
    rng = np.random.default_rng(5)
    gyro = rng.normal(size=(6, 3))
    pre = integrate(gyro, np.zeros(3), DT, 0.01)
    R = so3.exp_map(rng.normal(size=3))
    block = residual_preint(R, R @ pre.delta_R, pre, np.zeros(3))
    np.testing.assert_allclose(block.value, 0.0, atol=1e-9)


def test_residual_jacobians_fd():
    rng = np.random.default_rng(6)
    for _ in range(50):
        N = int(rng.integers(1, 10))
        gyro = rng.normal(size=(N, 3))
        pre = integrate(gyro, np.zeros(3), DT, 0.01)
        Ra = so3.exp_map(rng.normal(size=3))
        Rb = Ra @ pre.delta_R @ so3.exp_map(rng.normal(scale=0.05, size=3))
        db = rng.normal(scale=0.01, size=3)
        J = residual_preint(Ra, Rb, pre, db).jacobians
        fa = rotation_jacobian(lambda R: residual_preint(R, Rb, pre, db).value, Ra)
        fb = rotation_jacobian(lambda R: residual_preint(Ra, R, pre, db).value, Rb)
        fo = numeric_jacobian(lambda d: residual_preint(Ra, Rb, pre, d).value, db, h=1e-7)
        assert rel_error(J["R_kp"], fa) < 1e-4
        assert rel_error(J["R_kpN"], fb) < 1e-4
        assert rel_error(J["delta_o_w"], fo) < 1e-4
