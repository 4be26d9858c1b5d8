"""
Calibration parameters, sensor models and the densities they induce.

Frames: ``R_k`` maps IMU-frame vectors into the reference frame, whose z-axis
is aligned with gravity and whose y-z plane contains the magnetic field.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import so3

GRAVITY = 9.81

# Tangent-space layout of the calibration parameters: (name, dimension).
THETA_BLOCKS = (("o_a", 3), ("o_w", 3), ("D_m", 9), ("o_m", 3), ("alpha", 1))
THETA_DIM = 19


def theta_slices():
    out, start = {}, 0
    for name, dim in THETA_BLOCKS:
        out[name] = slice(start, start + dim)
        start += dim
    return out


THETA_SLICES = theta_slices()


@dataclass(frozen=True)
class CalibrationParams:
    """
    Unknown calibration parameters.

    Attributes
    ----------
    o_a : ndarray (3,)
        Accelerometer bias [m/s^2].
    o_w : ndarray (3,)
        Gyroscope bias [rad/s].
    D_m : ndarray (3, 3)
        Magnetometer distortion matrix.
    o_m : ndarray (3,)
        Magnetometer bias [uT].
    alpha : float
        Dip angle of the local field [rad].
    """

    o_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    o_w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    D_m: np.ndarray = field(default_factory=lambda: np.eye(3))
    o_m: np.ndarray = field(default_factory=lambda: np.zeros(3))
    alpha: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "o_a", np.array(self.o_a, dtype=float).reshape(3))
        object.__setattr__(self, "o_w", np.array(self.o_w, dtype=float).reshape(3))
        object.__setattr__(self, "D_m", np.array(self.D_m, dtype=float).reshape(3, 3))
        object.__setattr__(self, "o_m", np.array(self.o_m, dtype=float).reshape(3))
        object.__setattr__(self, "alpha", float(self.alpha))

    def to_vector(self):
        """Flatten to the 19-vector ``(o_a, o_w, vec(D_m), o_m, alpha)``, ``vec`` column-major."""
        return np.concatenate(
            [self.o_a, self.o_w, self.D_m.ravel(order="F"), self.o_m, [self.alpha]]
        )

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        s = THETA_SLICES
        return cls(
            o_a=x[s["o_a"]],
            o_w=x[s["o_w"]],
            D_m=x[s["D_m"]].reshape(3, 3, order="F"),
            o_m=x[s["o_m"]],
            alpha=x[s["alpha"]][0],
        )

    def replace(self, **changes):
        return replace(self, **changes)

    def check(self):
        cond = np.linalg.cond(self.D_m)
        if not np.isfinite(cond) or cond >= 1e3:
            raise ValueError(f"D_m is ill-conditioned (cond={cond:.3g})")
        if not -np.pi / 2 < self.alpha < np.pi / 2:
            raise ValueError("dip angle must lie in (-pi/2, pi/2)")
        return self

    def __eq__(self, other):
        if not isinstance(other, CalibrationParams):
            return NotImplemented
        return np.array_equal(self.to_vector(), other.to_vector())


@dataclass(frozen=True)
class DistortionFactors:
    """Scale factors, non-orthogonality angles (zeta, eta, rho) and misalignment ``R_D``."""

    D_diag: np.ndarray
    skew_angles: np.ndarray
    R_D: np.ndarray

    def __post_init__(self):
        D_diag = np.array(self.D_diag, dtype=float).reshape(3)
        if np.any(D_diag <= 0):
            raise ValueError("scale factors must be positive")
        object.__setattr__(self, "D_diag", D_diag)
        object.__setattr__(self, "skew_angles", np.array(self.skew_angles, dtype=float).reshape(3))
        object.__setattr__(self, "R_D", np.array(self.R_D, dtype=float).reshape(3, 3))


def skew_matrix(zeta, eta, rho):
    """Lower-triangular non-orthogonality matrix."""
    return np.array(
        [
            [1.0, 0.0, 0.0],
            [np.sin(zeta), np.cos(zeta), 0.0],
            [-np.sin(eta), np.cos(eta) * np.sin(rho), np.cos(eta) * np.cos(rho)],
        ]
    )


def compose_distortion(f):
    """``D_m = diag(D_diag) @ D_skew @ R_D``."""
    return np.diag(f.D_diag) @ skew_matrix(*f.skew_angles) @ f.R_D


@dataclass(frozen=True)
class NoiseConfig:
    """Per-sample white-noise standard deviations (isotropic per sensor)."""

    sigma_a: float
    sigma_w: float
    sigma_m: float

    @property
    def Sigma_a(self):
        return self.sigma_a**2 * np.eye(3)

    @property
    def Sigma_w(self):
        return self.sigma_w**2 * np.eye(3)

    @property
    def Sigma_m(self):
        return self.sigma_m**2 * np.eye(3)

    @classmethod
    def from_densities(cls, accel, gyro, mag, rate_hz, rate_ratio=1):
        """
        Convert noise densities (per sqrt(Hz)) into per-sample standard deviations.

        The accelerometer and gyroscope are sampled at ``rate_hz``; the
        magnetometer at ``rate_hz / rate_ratio``. ``gyro`` is in rad/s/sqrt(Hz).
        """
        return cls(
            sigma_a=accel * np.sqrt(rate_hz),
            sigma_w=gyro * np.sqrt(rate_hz),
            sigma_m=mag * np.sqrt(rate_hz / rate_ratio),
        )


# Noise densities used throughout the simulation study.
TABLE1_DENSITIES = {"accel": 0.02, "gyro": np.deg2rad(0.05), "mag": 0.003}


@dataclass(frozen=True)
class ReferenceField:
    g0: float = GRAVITY

    @property
    def g_n(self):
        return np.array([0.0, 0.0, self.g0])

    @staticmethod
    def m_n(alpha):
        return field_direction(alpha)


def field_direction(alpha):
    """Unit magnetic field in the reference frame, ``(0, cos a, -sin a)``."""
    return np.array([0.0, np.cos(alpha), -np.sin(alpha)])


def field_direction_derivative(alpha):
    return np.array([0.0, -np.sin(alpha), -np.cos(alpha)])


@dataclass
class Dataset:
    """
    Time-synchronous sensor streams sampled every ``dt`` seconds.

    ``gyro[k]`` drives the transition from sample ``k`` to ``k + 1``.
    ``accel`` holds one row per sample. ``mag`` holds one row per sample
    too, with NaN rows where no magnetometer sample was taken; when
    ``rate_ratio = N > 1`` the magnetometer is present exactly at the
    keyframe rows ``0, N, 2N, ...``.
    """

    dt: float
    gyro: np.ndarray
    accel: np.ndarray
    mag: np.ndarray
    rate_ratio: int = 1

    def __post_init__(self):
        self.gyro = np.asarray(self.gyro, dtype=float)
        self.accel = np.asarray(self.accel, dtype=float)
        self.mag = np.asarray(self.mag, dtype=float)
        self.rate_ratio = int(self.rate_ratio)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.rate_ratio < 1:
            raise ValueError("rate_ratio must be >= 1")
        n = len(self.gyro)
        if self.accel.shape != (n, 3) or self.mag.shape != (n, 3) or self.gyro.shape != (n, 3):
            raise ValueError("gyro, accel and mag must all have shape (n, 3)")
        has_mag = ~np.isnan(self.mag).any(axis=1)
        expected = np.arange(n) % self.rate_ratio == 0
        if not np.array_equal(has_mag, expected):
            raise ValueError("magnetometer samples must be present exactly at keyframe rows")

    @property
    def num_samples(self):
        return len(self.gyro)

    @property
    def rate_hz(self):
        return 1.0 / self.dt

    @property
    def keyframes(self):
        return np.arange(0, self.num_samples, self.rate_ratio)

    def downsample(self, factor):
        """Keep accelerometer/magnetometer rows only every ``factor`` keyframes."""
        factor = int(factor)
        if factor < 1:
            raise ValueError("downsample factor must be >= 1")
        N = self.rate_ratio * factor
        mag = np.full_like(self.mag, np.nan)
        mag[::N] = self.mag[::N]
        return Dataset(self.dt, self.gyro.copy(), self.accel.copy(), mag, N)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.dt == other.dt
            and self.rate_ratio == other.rate_ratio
            and np.array_equal(self.gyro, other.gyro)
            and np.array_equal(self.accel, other.accel)
            and np.array_equal(self.mag, other.mag, equal_nan=True)
        )


def propagate(R_k, u_tilde, o_w, dt):
    """Noise-free state transition ``R_k Exp((u - o_w) dt)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return np.asarray(R_k) @ so3.exp_map((np.asarray(u_tilde) - np.asarray(o_w)) * dt)


def accel_model(R_k, params, g0=GRAVITY):
    """``-R_k^T g_n + o_a``."""
    g_n = np.array([0.0, 0.0, g0])
    return -np.swapaxes(R_k, -1, -2) @ g_n + params.o_a


def mag_model(R_k, params):
    """``D_m R_k^T m_n(alpha) + o_m``."""
    return (params.D_m @ (np.swapaxes(R_k, -1, -2) @ field_direction(params.alpha))[..., None])[
        ..., 0
    ] + params.o_m


def transition_log_density(R_k, R_k1, u_tilde, params, noise, dt):
    """
    Approximate log-density of ``R_k1`` given ``R_k`` and the gyro input.

    Valid for small gyro noise: ``-0.5 |du|^2_{Sigma_w} - 0.5 ln det(2 pi Sigma_w)``
    with ``du = u - Log(R_k^T R_k1)/dt - o_w``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    du = np.asarray(u_tilde) - so3.log_map(np.asarray(R_k).T @ R_k1) / dt - params.o_w
    Sigma = noise.Sigma_w
    _, logdet = np.linalg.slogdet(2.0 * np.pi * Sigma)
    return float(-0.5 * du @ np.linalg.solve(Sigma, du) - 0.5 * logdet)
