"""Joint magnetometer-IMU calibration by MAP estimation on SO(3)."""

__version__ = "0.1.0"
