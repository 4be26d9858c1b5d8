import numpy as np
import pytest

from fdutil import interleaved_min_times
from magimu.baselines import (
    FilterDivergenceError,
    KokOptions,
    OrientationFilter,
    default_prior_std,
    kok_ml,
    wu_ekf,
)
from magimu.initialization import InitBundle
from magimu.models import THETA_DIM
from magimu.sim import SimConfig, sample_params, simulate


def scenario(ratio=1, noise_free=True, seed=31, rate_hz=40.0, duration_s=30.0):
    cfg = SimConfig(seed=seed, rate_hz=rate_hz, rate_ratio=ratio, duration_s=duration_s, noise_free=noise_free)
    dataset, truth = simulate(cfg)
    return dataset, truth, cfg.noise()


def truth_bundle(truth):
    return InitBundle(truth.params, truth.trajectory, (0, 0))


def test_prior_std_layout():
    std = default_prior_std()
    assert std.shape == (3 + THETA_DIM,)
    assert np.all(std > 0)
    np.testing.assert_allclose(std[:3], np.deg2rad(5.0))


@pytest.mark.parametrize("ratio", [1, 4])
def test_orientation_filter_innovations_vanish_at_truth_without_noise(ratio):
    dataset, truth, noise = scenario(ratio)
    filt = OrientationFilter(dataset, noise, R0=truth.trajectory[0])
    ev = filt.evaluate(truth.params)
    assert ev.innovations.shape == (len(dataset.keyframes), 6)
    assert np.abs(ev.innovations).max() < 1e-9
    assert np.isfinite(ev.neg_log_likelihood)


@pytest.mark.parametrize("ratio", [1, 4])
def test_wu_ekf_keeps_truth_with_tight_prior(ratio):
    dataset, truth, noise = scenario(ratio)
    params, state = wu_ekf(dataset, truth_bundle(truth), noise, prior_std=np.full(22, 1e-9))
    np.testing.assert_allclose(params.to_vector(), truth.params.to_vector(), atol=1e-9)
    assert state.num_updates == len(dataset.keyframes)
    assert np.allclose(state.P, state.P.T)


def test_wu_ekf_improves_on_a_perturbed_prior_mean():
    dataset, truth, noise = scenario(1, noise_free=False, seed=32, rate_hz=80.0, duration_s=120.0)
    rng = np.random.default_rng(0)
    start = truth.params.to_vector() + 0.3 * default_prior_std()[3:] * rng.normal(size=THETA_DIM)
    bundle = InitBundle(truth.params.from_vector(start), truth.trajectory, (0, 0))
    params, _ = wu_ekf(dataset, bundle, noise)
    before = np.linalg.norm(start - truth.params.to_vector())
    after = np.linalg.norm(params.to_vector() - truth.params.to_vector())
    assert after < 0.5 * before


def test_wu_ekf_reports_divergence():
    dataset, truth, noise = scenario(1)
    std = default_prior_std()
    std[5] = np.nan
    with pytest.raises(FilterDivergenceError):
        wu_ekf(dataset, truth_bundle(truth), noise, prior_std=std)


def test_likelihood_dominance_at_truth():
    dataset, truth, noise = scenario(1, seed=33, rate_hz=80.0, duration_s=120.0)
    filt = OrientationFilter(dataset, noise, R0=truth.trajectory[0])
    best = filt.neg_log_likelihood(truth.params.to_vector())
    rng = np.random.default_rng(1)
    for _ in range(50):
        other = sample_params(rng).params.to_vector()
        assert filt.neg_log_likelihood(other) >= best


def test_likelihood_pass_time_is_linear_in_length():
    sizes = (4000, 8000, 16000, 32000)
    passes = []
    for T in sizes:
        dataset, truth, noise = scenario(1, rate_hz=80.0, duration_s=T / 80.0 - 2.0)
        filt = OrientationFilter(dataset, noise, R0=truth.trajectory[0])
        theta = truth.params.to_vector()
        filt.neg_log_likelihood(theta)  # compile
        passes.append(lambda f=filt, th=theta: f.neg_log_likelihood(th))
    times = interleaved_min_times(passes)
    slope = np.polyfit(np.log(sizes), np.log(times), 1)[0]
    assert abs(slope - 1.0) < 0.2


@pytest.mark.slow
def test_augmented_ekf_within_five_times_joint_map():
    from magimu.initialization import build_init
    from magimu.metrics import group_errors, rmse
    from magimu.pipeline import joint_map

    errs = {"map": [], "ekf": []}
    for run in range(10):
        dataset, truth, noise = scenario(1, noise_free=False, seed=400 + run, rate_hz=80.0, duration_s=300.0)
        init = build_init(dataset, noise)
        x, _ = joint_map(dataset, noise, init)
        errs["map"].append(group_errors(x.params, truth.params))
        params, _ = wu_ekf(dataset, init, noise)
        errs["ekf"].append(group_errors(params, truth.params))
    r_map, r_ekf = rmse(errs["map"]), rmse(errs["ekf"])
    for g in r_map:
        assert np.isfinite(r_ekf[g])
        assert r_ekf[g] <= 5 * r_map[g], g


def test_gradient_costs_two_passes_per_coordinate():
    dataset, truth, noise = scenario(1)
    filt = OrientationFilter(dataset, noise, R0=truth.trajectory[0])
    g = filt.gradient(truth.params.to_vector(), 1e-5 * np.ones(THETA_DIM))
    assert filt.passes == 2 * THETA_DIM
    assert g.shape == (THETA_DIM,)
    assert np.all(np.isfinite(g))


def test_kok_ml_stays_at_truth_without_noise():
    dataset, truth, noise = scenario(1, rate_hz=20.0, duration_s=20.0)
    params, result = kok_ml(dataset, truth_bundle(truth), noise, KokOptions(max_iter=5))
    # The log-determinant term shifts the likelihood optimum marginally off
    # the truth, so measure the drift in prior standard deviations.
    drift = (params.to_vector() - truth.params.to_vector()) / default_prior_std()[3:]
    assert np.abs(drift).max() < 1e-4
    assert result.ekf_passes >= 1 + 2 * THETA_DIM
    assert set(result.to_dict()) >= {"neg_log_likelihood", "iterations", "ekf_passes", "termination_reason"}


def test_kok_ml_is_deterministic():
    dataset, truth, noise = scenario(1, noise_free=False, seed=34, rate_hz=20.0, duration_s=20.0)
    a, ra = kok_ml(dataset, truth_bundle(truth), noise, KokOptions(max_iter=3))
    b, rb = kok_ml(dataset, truth_bundle(truth), noise, KokOptions(max_iter=3))
    assert a == b
    assert ra.history == rb.history
