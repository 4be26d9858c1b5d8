import numpy as np
import pytest

from conftest import random_rotation
from magimu import so3
from magimu.initialization import (
    DegenerateEllipsoidError,
    InitConfig,
    InitializationError,
    InsufficientExcitationError,
    NoStationarySpanError,
    build_init,
    dead_reckon,
    ellipsoid_fit,
    estimate_gyro_bias,
    extrinsic_align,
    intrinsic_refine,
)
from magimu.models import Dataset, compose_distortion, skew_matrix
from magimu.sim import SimConfig, sample_params, simulate

DT = 1.0 / 80.0


def still_then_moving(rng, bias, sigma_w, sigma_a, still=160, moving=160):
    gyro = bias + sigma_w * rng.normal(size=(still + moving, 3))
    gyro[still:] += [0.0, 0.0, 0.5]
    accel = np.array([0.0, 0.0, 9.81]) + sigma_a * rng.normal(size=(still + moving, 3))
    accel[still:] += 0.5 * rng.normal(size=(moving, 3))
    return gyro, accel


def test_gyro_bias_error_follows_clt():
    rng = np.random.default_rng(0)
    sigma_w, sigma_a = 0.003, 0.01
    z = []
    for _ in range(200):
        bias = rng.uniform(-0.002, 0.002, size=3)
        gyro, accel = still_then_moving(rng, bias, sigma_w, sigma_a)
        est, (start, stop) = estimate_gyro_bias(gyro, accel, DT, sigma_w, sigma_a)
        assert start == 0 and 150 <= stop <= 160
        z.extend((est - bias) / (sigma_w / np.sqrt(stop)))
    z = np.array(z)
    assert abs(z.mean()) < 0.15
    assert 0.85 < z.std() < 1.15


def test_rotating_from_start_is_an_error():
    rng = np.random.default_rng(1)
    gyro, accel = still_then_moving(rng, np.zeros(3), 0.003, 0.01, still=0, moving=400)
    with pytest.raises(NoStationarySpanError):
        estimate_gyro_bias(gyro, accel, DT, 0.003, 0.01)


def test_dead_reckon_matches_recursion(rng):
    gyro = rng.normal(size=(50, 3))
    b = rng.normal(scale=0.01, size=3)
    R0 = random_rotation(rng)
    P = dead_reckon(gyro, b, DT, R0)
    assert P.shape == (50, 3, 3)
    R = R0
    for k in range(49):
        np.testing.assert_allclose(P[k], R, atol=1e-12)
        R = R @ so3.exp_map((gyro[k] - b) * DT)
    np.testing.assert_allclose(P[-1], R, atol=1e-12)


def sphere_points(rng, n=500):
    u = rng.normal(size=(n, 3))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def test_ellipsoid_fit_unit_sphere(rng):
    D, o = ellipsoid_fit(sphere_points(rng))
    np.testing.assert_allclose(D, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(o, 0.0, atol=1e-10)


def test_ellipsoid_fit_scaled_shifted_sphere(rng):
    m = 2.0 * sphere_points(rng) + [1.0, 2.0, 3.0]
    D, o = ellipsoid_fit(m)
    np.testing.assert_allclose(D, 2.0 * np.eye(3), atol=1e-10)
    np.testing.assert_allclose(o, [1.0, 2.0, 3.0], atol=1e-10)


def test_ellipsoid_fit_recovers_shape_for_drawn_parameters():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = sample_params(rng).params
        m = sphere_points(rng) @ p.D_m.T + p.o_m
        D, o = ellipsoid_fit(m)
        np.testing.assert_allclose(D @ D.T, p.D_m @ p.D_m.T, atol=1e-6 * np.abs(p.D_m).max() ** 2)
        np.testing.assert_allclose(o, p.o_m, atol=1e-6)
        assert np.allclose(D, np.tril(D)) and np.all(np.diag(D) > 0)


def test_ellipsoid_fit_rejects_planar_data(rng):
    u = rng.normal(size=(200, 3))
    u[:, 2] = 0.0
    with pytest.raises(DegenerateEllipsoidError):
        ellipsoid_fit(u)
    with pytest.raises(DegenerateEllipsoidError):
        ellipsoid_fit(u[:5])


def intrinsic_factor(truth_factors):
    return np.diag(truth_factors.D_diag) @ skew_matrix(*truth_factors.skew_angles)


def test_intrinsic_refine_exact_without_noise():
    rng = np.random.default_rng(3)
    draw = sample_params(rng)
    D_I = intrinsic_factor(draw.factors)
    m = sphere_points(rng, 300) @ compose_distortion(draw.factors).T + draw.params.o_m
    res = intrinsic_refine(m, ellipsoid_fit(m))
    np.testing.assert_allclose(res.D_I, D_I, atol=1e-8)
    np.testing.assert_allclose(res.o_m, draw.params.o_m, atol=1e-8)
    assert res.residual_rms < 1e-8


def test_intrinsic_refine_is_blind_to_a_common_rotation():
    rng = np.random.default_rng(4)
    draw = sample_params(rng)
    u = sphere_points(rng, 300)
    D = compose_distortion(draw.factors)
    a = intrinsic_refine(*(lambda m: (m, ellipsoid_fit(m)))(u @ D.T + draw.params.o_m))
    Q = so3.rot_z(1.1)
    b = intrinsic_refine(*(lambda m: (m, ellipsoid_fit(m)))(u @ Q.T @ D.T + draw.params.o_m))
    np.testing.assert_allclose(a.D_I, b.D_I, atol=1e-8)


def test_intrinsic_residual_rms_estimates_noise():
    rng = np.random.default_rng(5)
    draw = sample_params(rng)
    sigma = 0.03
    m = sphere_points(rng, 3000) @ compose_distortion(draw.factors).T + draw.params.o_m
    m += sigma * rng.normal(size=m.shape)
    res = intrinsic_refine(m, ellipsoid_fit(m))
    assert res.residual_rms == pytest.approx(sigma, rel=0.05)


@pytest.fixture(scope="module")
def noisy_run():
    cfg = SimConfig(seed=21, duration_s=300.0)
    dataset, truth = simulate(cfg)
    return dataset, truth, cfg.noise()


@pytest.mark.parametrize("seed", [21, 22, 23])
def test_extrinsic_alignment_within_a_fifth_of_a_degree(seed):
    dataset, truth = simulate(SimConfig(seed=seed, duration_s=60.0, noise_free=True))
    D_I = intrinsic_factor(truth.factors)
    R = extrinsic_align(dataset.gyro, dataset.mag, truth.params.o_w, D_I, truth.params.o_m, dataset.dt)
    assert np.rad2deg(so3.angle_between(R, truth.factors.R_D)) < 0.2


def test_extrinsic_alignment_identity():
    cfg = SimConfig(seed=24, duration_s=60.0, noise_free=True, table1_overrides={"R_D": np.eye(3)})
    dataset, truth = simulate(cfg)
    D_I = intrinsic_factor(truth.factors)
    R = extrinsic_align(dataset.gyro, dataset.mag, truth.params.o_w, D_I, truth.params.o_m, dataset.dt)
    np.testing.assert_allclose(R, np.eye(3), atol=1e-6)


def test_extrinsic_alignment_needs_motion(rng):
    n = 400
    mag = np.tile([10.0, 20.0, -30.0], (n, 1)) + 0.01 * rng.normal(size=(n, 3))
    with pytest.raises(InsufficientExcitationError):
        extrinsic_align(np.zeros((n, 3)), mag, np.zeros(3), np.eye(3), np.zeros(3), DT)


@pytest.mark.parametrize("dip", [60.0, 72.0])
def test_build_init(noisy_run, dip):
    dataset, truth, noise = noisy_run
    init = build_init(dataset, noise, InitConfig(dip_angle_deg=dip))
    p = init.params0
    assert p.alpha == np.deg2rad(dip)
    np.testing.assert_array_equal(p.o_a, 0.0)
    assert init.trajectory0.shape == (dataset.num_samples, 3, 3)
    assert init.stationary_span[0] == 0
    # Mean of a 2 s still prefix at 80 Hz: per-axis standard error sigma_w / sqrt(160).
    assert 150 <= init.stationary_span[1] <= 160
    assert np.all(np.abs(p.o_w - truth.params.o_w) < 3 * noise.sigma_w / np.sqrt(160))
    assert np.linalg.norm(p.o_m - truth.params.o_m) < 0.5
    # D_m is only determined up to the yaw of the reference field.
    assert np.linalg.norm(p.D_m @ p.D_m.T - truth.params.D_m @ truth.params.D_m.T) < 0.05


def test_build_init_stationary_only_fails():
    rng = np.random.default_rng(6)
    n = 800
    dataset = Dataset(
        DT,
        0.003 * rng.normal(size=(n, 3)),
        np.array([0.0, 0.0, 9.81]) + 0.01 * rng.normal(size=(n, 3)),
        np.array([10.0, 20.0, -30.0]) + 0.1 * rng.normal(size=(n, 3)),
        1,
    )
    noise = SimConfig().noise()
    with pytest.raises(InitializationError):
        build_init(dataset, noise)


def test_single_axis_rotation_is_insufficient():
    cfg = SimConfig(seed=25, duration_s=60.0, num_axes=1)
    dataset, truth = simulate(cfg)
    D_I = intrinsic_factor(truth.factors)
    with pytest.raises(InsufficientExcitationError):
        extrinsic_align(
            dataset.gyro, dataset.mag, truth.params.o_w, D_I, truth.params.o_m, dataset.dt,
            sigma_w=cfg.noise().sigma_w,
        )


def test_intrinsic_residual_rms_matches_magnetometer_noise_on_simulated_runs():
    ratios = []
    for seed in range(10):
        cfg = SimConfig(seed=60 + seed, duration_s=120.0)
        dataset, _ = simulate(cfg)
        res = intrinsic_refine(dataset.mag, ellipsoid_fit(dataset.mag))
        ratios.append(res.residual_rms / cfg.noise().sigma_m)
    assert np.all(np.abs(np.array(ratios) - 1.0) < 0.2)


def test_constant_gyro_gives_that_bias():
    c = np.array([0.01, -0.02, 0.003])
    gyro = np.tile(c, (400, 1))
    accel = np.tile([0.0, 0.0, 9.81], (400, 1))
    bias, span = estimate_gyro_bias(gyro, accel, DT, 0.003, 0.01)
    np.testing.assert_allclose(bias, c, atol=1e-15)
    assert span == (0, 400)


def test_dead_reckon_recovers_noiseless_trajectory():
    dataset, truth = simulate(SimConfig(seed=26, noise_free=True))
    R = dead_reckon(dataset.gyro, truth.params.o_w, dataset.dt)
    assert max(so3.angle_between(a, b) for a, b in zip(R[::97], truth.trajectory[::97])) < 1e-8
    assert so3.angle_between(R[-1], truth.trajectory[-1]) < 1e-8


def test_noiseless_init_is_in_the_basin_of_convergence():
    from magimu.solver import CalibrationProblem, optimize

    cfg = SimConfig(seed=27, noise_free=True)
    dataset, truth = simulate(cfg)
    noise = cfg.noise()
    init = build_init(dataset, noise)
    problem = CalibrationProblem(dataset, noise)
    x, rep = optimize(problem, problem.initial_estimate(init.params0, init.trajectory0))
    assert rep.converged and rep.iterations < 30
    np.testing.assert_allclose(x.params.to_vector(), truth.params.to_vector(), atol=1e-6)
