"""
Monte Carlo dataset generator.

The sensor board sits still for a short lead-in and is then rotated about six
nearly fixed axes in turn at roughly 7 deg/s. Calibration parameters are drawn
uniformly from the ranges below.
"""

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .models import (
    GRAVITY,
    TABLE1_DENSITIES,
    CalibrationParams,
    Dataset,
    DistortionFactors,
    NoiseConfig,
    accel_model,
    compose_distortion,
    mag_model,
)

# Uniform ranges (low, high); angles in degrees, o_w in deg/s.
TABLE1_RANGES = {
    "D_diag": (0.9, 1.1),
    "skew_deg": (-10.0, 10.0),
    "R_D_euler_deg": (-5.0, 5.0),
    "o_a": (-0.5, 0.5),
    "o_w_dps": (0.47, 0.67),
    "o_m": (-2.0, 2.0),
    "alpha_deg": (67.0, 77.0),
}

_AXES = np.array(
    [
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 1.0] / np.sqrt(3.0),
    ]
)
AXIS_JITTER_DEG = 3.0
RATE_JITTER = 0.1

# Independent random streams, so e.g. changing the rate ratio leaves the
# parameter draw untouched.
_STREAMS = {"params": 0, "trajectory": 1, "gyro": 2, "accel": 3, "mag": 4}


def stream_rng(seed, name):
    """Counter-based (Philox) generator for one named stream of a seed."""
    ss = np.random.SeedSequence(seed, spawn_key=(_STREAMS[name],))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class SimConfig:
    seed: int = 0
    rate_hz: float = 80.0
    rate_ratio: int = 1
    duration_s: float = 300.0
    num_axes: int = 6
    angular_rate_dps: float = 7.0
    stationary_lead_s: float = 2.0
    noise_free: bool = False
    noise_densities: dict = field(default_factory=lambda: dict(TABLE1_DENSITIES))
    table1_overrides: dict = field(default_factory=dict)
    g0: float = GRAVITY

    def __post_init__(self):
        if self.rate_hz <= 0 or self.duration_s <= 0:
            raise ValueError("rate_hz and duration_s must be positive")
        if int(self.rate_ratio) < 1:
            raise ValueError("rate_ratio must be >= 1")
        if not 1 <= self.num_axes <= len(_AXES):
            raise ValueError(f"num_axes must be in 1..{len(_AXES)}")

    @property
    def dt(self):
        return 1.0 / self.rate_hz

    @property
    def num_samples(self):
        return int(round(self.rate_hz * (self.duration_s + self.stationary_lead_s)))

    def noise(self):
        d = self.noise_densities
        return NoiseConfig.from_densities(d["accel"], d["gyro"], d["mag"], self.rate_hz, self.rate_ratio)


@dataclass
class GroundTruth:
    params: CalibrationParams
    factors: DistortionFactors
    trajectory: np.ndarray = None
    rates: np.ndarray = None


def sample_params(rng, overrides=None):
    """
    Draw calibration parameters from the uniform ranges.

    ``overrides`` may fix any of ``D_diag``, ``skew_angles`` (rad), ``R_D``,
    ``o_a``, ``o_w`` (rad/s), ``o_m`` and ``alpha`` (rad). All draws are
    consumed regardless, so overriding one quantity does not shift the others.
    """
    r = TABLE1_RANGES
    u = lambda key, size: rng.uniform(*r[key], size=size)
    draw = {
        "D_diag": u("D_diag", 3),
        "skew_angles": np.deg2rad(u("skew_deg", 3)),
        "R_D_euler": np.deg2rad(u("R_D_euler_deg", 3)),
        "o_a": u("o_a", 3),
        "o_w": np.deg2rad(u("o_w_dps", 3)),
        "o_m": u("o_m", 3),
        "alpha": np.deg2rad(u("alpha_deg", None)),
    }
    draw["R_D"] = so3.from_euler(*draw.pop("R_D_euler"))
    draw.update(overrides or {})
    factors = DistortionFactors(draw["D_diag"], draw["skew_angles"], draw["R_D"])
    params = CalibrationParams(
        o_a=draw["o_a"],
        o_w=draw["o_w"],
        D_m=compose_distortion(factors),
        o_m=draw["o_m"],
        alpha=draw["alpha"],
    )
    return GroundTruth(params, factors)


def segment_bounds(cfg):
    """Sample index ranges ``[start, stop)`` of the lead-in and each rotation segment."""
    n = cfg.num_samples
    lead = int(round(cfg.rate_hz * cfg.stationary_lead_s))
    edges = lead + np.round(np.linspace(0, n - lead, cfg.num_axes + 1)).astype(int)
    return lead, list(zip(edges[:-1], edges[1:]))


def generate_trajectory(cfg, rng):
    """
    Rotation trajectory and the true angular rate driving each step.

    Returns
    -------
    rotations : ndarray (n, 3, 3)
    rates : ndarray (n, 3)
        ``rates[k]`` carries ``R_k`` to ``R_{k+1}``; the final row repeats the last rate.
    """
    n = cfg.num_samples
    dt = cfg.dt
    lead, segments = segment_bounds(cfg)
    rates = np.zeros((n, 3))
    jitter = np.deg2rad(AXIS_JITTER_DEG)
    for axis, (a, b) in zip(_AXES, segments):
        tilt = rng.uniform(-jitter, jitter, size=3)
        direction = so3.exp_map(tilt) @ axis
        direction /= np.linalg.norm(direction)
        speed = np.deg2rad(cfg.angular_rate_dps) * rng.uniform(1 - RATE_JITTER, 1 + RATE_JITTER)
        rates[a:b] = speed * direction
    if n > 1:
        rates[-1] = rates[-2]

    rotations = np.empty((n, 3, 3))
    rotations[: lead + 1] = np.eye(3)
    start = np.eye(3)
    for a, b in segments:
        # Constant rate: R_{a+j} = R_a Exp(j w dt), exact within a segment.
        j = np.arange(b - a + 1)
        block = start @ so3.exp_map(j[:, None] * rates[a] * dt)
        stop = min(b + 1, n)
        rotations[a:stop] = block[: stop - a]
        start = block[-1]
    return rotations, rates


def synthesize_measurements(truth, noise, cfg, rng=None):
    """
    Sensor streams from the measurement models plus white Gaussian noise.

    ``rng`` is unused and kept for signature symmetry; every noise channel
    draws from its own stream of ``cfg.seed``.
    """
    R = truth.trajectory
    n = len(R)
    N = int(cfg.rate_ratio)
    p = truth.params
    accel = accel_model(R, p, cfg.g0)
    mag = np.full((n, 3), np.nan)
    key = np.arange(0, n, N)
    mag[key] = mag_model(R[key], p)
    gyro = truth.rates + p.o_w
    if not cfg.noise_free:
        gyro = gyro + noise.sigma_w * stream_rng(cfg.seed, "gyro").standard_normal((n, 3))
        accel = accel + noise.sigma_a * stream_rng(cfg.seed, "accel").standard_normal((n, 3))
        mag[key] += noise.sigma_m * stream_rng(cfg.seed, "mag").standard_normal((len(key), 3))
    return Dataset(cfg.dt, gyro, accel, mag, N)


def simulate(cfg):
    """Draw parameters and motion and synthesize a dataset. Returns ``(dataset, truth)``."""
    truth = sample_params(stream_rng(cfg.seed, "params"), cfg.table1_overrides)
    truth.trajectory, truth.rates = generate_trajectory(cfg, stream_rng(cfg.seed, "trajectory"))
    dataset = synthesize_measurements(truth, cfg.noise(), cfg)
    return dataset, truth
