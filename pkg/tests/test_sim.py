import math

import numpy as np
import pytest

from magimu import so3
from magimu.models import GRAVITY
from magimu.residuals import full_rate_cost
from magimu.sim import (
    TABLE1_RANGES,
    SimConfig,
    generate_trajectory,
    sample_params,
    segment_bounds,
    simulate,
    stream_rng,
)
from magimu.solver import CalibrationProblem, schur_complement


def test_draws_stay_in_ranges():
    rng = np.random.default_rng(0)
    draws = [sample_params(rng) for _ in range(10_000)]
    r = TABLE1_RANGES

    def check(values, key, tol=0.0):
        lo, hi = r[key]
        values = np.asarray(values)
        assert values.min() >= lo - tol and values.max() <= hi + tol
        # 10k uniform draws reach within 1% of both ends.
        assert values.min() < lo + 0.01 * (hi - lo) and values.max() > hi - 0.01 * (hi - lo)

    check([d.factors.D_diag for d in draws], "D_diag")
    check(np.rad2deg([d.factors.skew_angles for d in draws]), "skew_deg")
    check([d.params.o_a for d in draws], "o_a")
    check(np.rad2deg([d.params.o_w for d in draws]), "o_w_dps")
    check([d.params.o_m for d in draws], "o_m")
    check(np.rad2deg([d.params.alpha for d in draws]), "alpha_deg")
    angles = np.rad2deg([so3.angle_between(d.factors.R_D, np.eye(3)) for d in draws])
    assert angles.max() <= np.sqrt(3) * 5.0 + 1e-9
    for d in draws[:100]:
        assert so3.is_rotation(d.factors.R_D)


def test_overrides_leave_other_draws_untouched():
    a = sample_params(np.random.default_rng(1))
    b = sample_params(np.random.default_rng(1), {"o_a": np.zeros(3), "alpha": 1.2})
    np.testing.assert_array_equal(b.params.o_a, 0.0)
    assert b.params.alpha == 1.2
    np.testing.assert_array_equal(a.params.D_m, b.params.D_m)
    np.testing.assert_array_equal(a.params.o_m, b.params.o_m)
    np.testing.assert_array_equal(a.params.o_w, b.params.o_w)


def test_streams_are_independent_and_reproducible():
    x = stream_rng(5, "gyro").standard_normal(4)
    np.testing.assert_array_equal(x, stream_rng(5, "gyro").standard_normal(4))
    assert not np.array_equal(x, stream_rng(5, "accel").standard_normal(4))
    assert not np.array_equal(x, stream_rng(6, "gyro").standard_normal(4))


def test_simulate_is_deterministic():
    cfg = SimConfig(seed=3, duration_s=20.0)
    (d1, t1), (d2, t2) = simulate(cfg), simulate(cfg)
    assert d1 == d2
    assert t1.params == t2.params


def test_rate_ratio_does_not_change_parameters_or_motion():
    d1, t1 = simulate(SimConfig(seed=4, duration_s=20.0, rate_ratio=1))
    d4, t4 = simulate(SimConfig(seed=4, duration_s=20.0, rate_ratio=4))
    assert t1.params == t4.params
    np.testing.assert_array_equal(t1.trajectory, t4.trajectory)
    np.testing.assert_array_equal(d1.gyro, d4.gyro)


@pytest.mark.parametrize("rate_hz,duration", [(80.0, 300.0), (100.0, 30.0), (25.0, 12.0)])
def test_sample_count_and_segments(rate_hz, duration):
    cfg = SimConfig(rate_hz=rate_hz, duration_s=duration)
    lead, segments = segment_bounds(cfg)
    assert cfg.num_samples == round(rate_hz * (duration + cfg.stationary_lead_s))
    assert lead == round(rate_hz * cfg.stationary_lead_s)
    assert len(segments) == 6
    assert segments[0][0] == lead and segments[-1][1] == cfg.num_samples
    lengths = [b - a for a, b in segments]
    assert max(lengths) - min(lengths) <= 1


def test_trajectory_is_still_then_rotates_at_the_nominal_rate():
    cfg = SimConfig(seed=2, duration_s=60.0)
    R, rates = generate_trajectory(cfg, stream_rng(cfg.seed, "trajectory"))
    lead, segments = segment_bounds(cfg)
    np.testing.assert_array_equal(R[: lead + 1], np.broadcast_to(np.eye(3), (lead + 1, 3, 3)))
    np.testing.assert_array_equal(rates[:lead], 0.0)
    for a, b in segments:
        speed = np.linalg.norm(rates[a])
        assert np.deg2rad(7.0 * 0.9) <= speed <= np.deg2rad(7.0 * 1.1)
        angle = so3.angle_between(R[a], R[b]) if b < len(R) else None
        if angle is not None and speed * (b - a) * cfg.dt < np.pi:
            assert angle == pytest.approx(speed * (b - a) * cfg.dt, rel=1e-9)
    # Consecutive rotations follow the recorded rates exactly.
    k = segments[2][0] + 10
    np.testing.assert_allclose(R[k + 1], R[k] @ so3.exp_map(rates[k] * cfg.dt), atol=1e-12)


def test_noise_levels_match_configuration():
    cfg = SimConfig(seed=5, duration_s=300.0)
    dataset, truth = simulate(cfg)
    noise = cfg.noise()
    p = truth.params
    from magimu.models import accel_model, mag_model

    e_w = dataset.gyro - truth.rates - p.o_w
    e_a = dataset.accel - accel_model(truth.trajectory, p)
    e_m = dataset.mag - mag_model(truth.trajectory, p)
    for e, sigma in ((e_w, noise.sigma_w), (e_a, noise.sigma_a), (e_m, noise.sigma_m)):
        assert e.std() == pytest.approx(sigma, rel=0.05)


@pytest.mark.parametrize("N", [1, 2, 3, 8])
def test_magnetometer_sample_count(N):
    cfg = SimConfig(seed=6, duration_s=10.0, rate_ratio=N)
    dataset, _ = simulate(cfg)
    present = np.flatnonzero(~np.isnan(dataset.mag[:, 0]))
    assert len(present) == math.ceil(cfg.num_samples / N)
    np.testing.assert_array_equal(present, np.arange(0, cfg.num_samples, N))


def test_noiseless_truth_is_the_unique_zero():
    cfg = SimConfig(seed=7, duration_s=60.0, noise_free=True)
    dataset, truth = simulate(cfg)
    noise = cfg.noise()
    assert full_rate_cost(dataset, truth.params, truth.trajectory, noise, GRAVITY) < 1e-18
    problem = CalibrationProblem(dataset, noise)
    neq = problem.linearize(problem.initial_estimate(truth.params, truth.trajectory))
    # Positive-definite parameter block: no direction leaves the cost at zero.
    assert np.linalg.eigvalsh(schur_complement(neq))[0] > 0


def test_noiseless_identity_parameters_give_pure_models():
    from magimu.models import CalibrationParams

    cfg = SimConfig(seed=8, duration_s=20.0, noise_free=True,
                    table1_overrides={"D_diag": np.ones(3), "skew_angles": np.zeros(3), "R_D": np.eye(3),
                                      "o_a": np.zeros(3), "o_w": np.zeros(3), "o_m": np.zeros(3)})
    dataset, truth = simulate(cfg)
    R = truth.trajectory
    a = truth.params.alpha
    assert truth.params == CalibrationParams(alpha=a)
    np.testing.assert_allclose(dataset.accel, -np.swapaxes(R, 1, 2) @ np.array([0.0, 0.0, GRAVITY]), atol=1e-12)
    m_n = np.array([0.0, np.cos(a), -np.sin(a)])
    np.testing.assert_allclose(dataset.mag, np.swapaxes(R, 1, 2) @ m_n, atol=1e-12)
