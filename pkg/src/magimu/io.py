"""
Dataset CSV files, the ``meta.json`` sidecar and calibration report JSON.

Dataset layout::

    t,gx,gy,gz,ax,ay,az,mx,my,mz
    0.0,0.0102,...,12.5,-3.1,40.2
    0.0125,0.0101,...,,,            <- no magnetometer sample at this row

Time in seconds, gyro in rad/s, accel in m/s^2, mag in uT. Floats are
written with ``repr`` so a write/read round trip is bit-exact.
"""

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .models import CalibrationParams, Dataset

HEADER = ("t", "gx", "gy", "gz", "ax", "ay", "az", "mx", "my", "mz")
META_NAME = "meta.json"
TIME_TOL = 1e-6


class DataError(ValueError):
    """Base class of input errors; ``exit_code`` is the CLI status."""

    exit_code = 1


class HeaderError(DataError):
    exit_code = 6


class NonMonotoneTimeError(DataError):
    exit_code = 3


class NonUniformTimeError(DataError):
    exit_code = 7


class RateRatioError(DataError):
    exit_code = 4


class NaNFieldError(DataError):
    exit_code = 5


class DigestMismatchError(DataError):
    exit_code = 8


def file_digest(path):
    """SHA-256 of a file's bytes, hex encoded."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sidecar_path(csv_path):
    return Path(csv_path).with_name(META_NAME)


# ---------------------------------------------------------------------------
# parameters <-> JSON
# ---------------------------------------------------------------------------


def params_to_dict(params):
    """JSON form of the parameters; ``D_m`` row-major with an explicit layout tag."""
    return {
        "o_a": [float(v) for v in params.o_a],
        "o_w": [float(v) for v in params.o_w],
        "D_m": {"layout": "row-major", "values": [float(v) for v in params.D_m.ravel(order="C")]},
        "o_m": [float(v) for v in params.o_m],
        "alpha_rad": float(params.alpha),
    }


def params_from_dict(d):
    D = d["D_m"]
    if D.get("layout") != "row-major":
        raise DataError(f"unsupported D_m layout {D.get('layout')!r}")
    return CalibrationParams(
        o_a=d["o_a"],
        o_w=d["o_w"],
        D_m=np.reshape(np.asarray(D["values"], dtype=float), (3, 3), order="C"),
        o_m=d["o_m"],
        alpha=float(d["alpha_rad"]),
    )


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def write_dataset(dataset, path, truth=None, extra=None):
    """
    Write ``dataset`` as CSV plus a ``meta.json`` sidecar in the same directory.

    Parameters
    ----------
    dataset : Dataset
    path : path-like
        CSV file to create.
    truth : CalibrationParams, optional
        Ground truth stored in the sidecar.
    extra : dict, optional
        Additional sidecar entries (e.g. the simulator configuration).

    Returns
    -------
    str
        SHA-256 digest of the CSV file, also recorded in the sidecar.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = lambda x: repr(float(x))
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HEADER)
        for k in range(dataset.num_samples):
            row = [fmt(k * dataset.dt)]
            row += [fmt(v) for v in dataset.gyro[k]]
            row += [fmt(v) for v in dataset.accel[k]]
            m = dataset.mag[k]
            row += ["", "", ""] if np.isnan(m).any() else [fmt(v) for v in m]
            w.writerow(row)
    digest = file_digest(path)
    meta = {
        "rate_hz": float(dataset.rate_hz),
        "dt": float(dataset.dt),
        "rate_ratio": int(dataset.rate_ratio),
        "num_samples": int(dataset.num_samples),
        "dataset_file": path.name,
        "dataset_sha256": digest,
    }
    if truth is not None:
        meta["truth"] = params_to_dict(truth)
    if extra:
        meta.update(extra)
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return digest


def read_meta(path):
    """Load a sidecar; ``path`` may be the sidecar itself or its dataset CSV."""
    path = Path(path)
    if path.suffix != ".json":
        path = sidecar_path(path)
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _parse_float(text, row, col):
    try:
        v = float(text)
    except ValueError:
        raise NaNFieldError(f"row {row}: field {HEADER[col]!r} is not a number: {text!r}") from None
    if not np.isfinite(v):
        raise NaNFieldError(f"row {row}: field {HEADER[col]!r} is not finite")
    return v


def read_dataset(path, meta=None):
    """
    Read a dataset CSV and cross-check it against its sidecar.

    Parameters
    ----------
    path : path-like
    meta : dict, optional
        Sidecar contents; read from ``meta.json`` next to ``path`` when
        omitted. Without a sidecar, ``dt`` and the rate ratio are inferred.

    Raises
    ------
    HeaderError, NaNFieldError, NonMonotoneTimeError, NonUniformTimeError, RateRatioError
    """
    path = Path(path)
    if meta is None and sidecar_path(path).exists():
        meta = read_meta(path)
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(c.strip() for c in rows[0]) != HEADER:
        raise HeaderError(f"expected header {','.join(HEADER)}")
    body = rows[1:]
    if len(body) < 2:
        raise DataError("dataset needs at least two rows")
    n = len(body)
    t = np.empty(n)
    imu = np.empty((n, 6))
    mag = np.full((n, 3), np.nan)
    for k, r in enumerate(body):
        line = k + 2
        if len(r) != len(HEADER):
            raise HeaderError(f"row {line}: expected {len(HEADER)} fields, got {len(r)}")
        t[k] = _parse_float(r[0], line, 0)
        for c in range(1, 7):
            if r[c].strip() == "":
                raise NaNFieldError(f"row {line}: empty field {HEADER[c]!r}")
            imu[k, c - 1] = _parse_float(r[c], line, c)
        empty = [r[c].strip() == "" for c in range(7, 10)]
        if all(empty):
            continue
        if any(empty):
            raise NaNFieldError(f"row {line}: partially empty magnetometer sample")
        mag[k] = [_parse_float(r[c], line, c) for c in range(7, 10)]

    steps = np.diff(t)
    if np.any(steps <= 0):
        k = int(np.argmax(steps <= 0))
        raise NonMonotoneTimeError(f"time stamps not increasing at row {k + 3}")
    dt = float(meta["dt"]) if meta and "dt" in meta else float(np.mean(steps))
    if np.max(np.abs(steps - dt)) > TIME_TOL:
        raise NonUniformTimeError(f"sample interval deviates from {dt} s by more than {TIME_TOL} s")
    if meta and "rate_hz" in meta and abs(1.0 / dt - float(meta["rate_hz"])) > 1e-6 * float(meta["rate_hz"]):
        raise NonUniformTimeError("time stamps disagree with the sidecar rate_hz")

    present = np.flatnonzero(~np.isnan(mag[:, 0]))
    if len(present) == 0 or present[0] != 0:
        raise RateRatioError("the first row must carry a magnetometer sample")
    N = int(present[1] - present[0]) if len(present) > 1 else 1
    if not np.array_equal(present, np.arange(0, n, N)):
        raise RateRatioError("magnetometer samples are not evenly spaced")
    if meta and "rate_ratio" in meta and int(meta["rate_ratio"]) != N:
        raise RateRatioError(f"rows imply rate ratio {N}, sidecar says {meta['rate_ratio']}")
    return Dataset(dt, imu[:, :3], imu[:, 3:], mag, N)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class CalibrationReport:
    params: CalibrationParams
    method: str
    solve: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    version: str = __version__
    dataset_sha256: str = ""
    converged: bool = True

    def to_dict(self):
        return {
            "toolkit": "magimu",
            "version": self.version,
            "method": self.method,
            "dataset_sha256": self.dataset_sha256,
            "converged": bool(self.converged),
            "params": params_to_dict(self.params),
            "solve": self.solve,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            params=params_from_dict(d["params"]),
            method=d["method"],
            solve=d.get("solve", {}),
            config=d.get("config", {}),
            version=d.get("version", ""),
            dataset_sha256=d.get("dataset_sha256", ""),
            converged=bool(d.get("converged", True)),
        )

    def __eq__(self, other):
        if not isinstance(other, CalibrationReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def write_report(report, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(report.to_dict()), f, indent=2, sort_keys=True)


def read_report(path):
    with open(path, encoding="utf-8") as f:
        return CalibrationReport.from_dict(json.load(f))


def dump_json(obj, path=None):
    """Serialize ``obj`` (numpy-aware) to ``path`` or return the string."""
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True)
    if path is None:
        return text
    Path(path).write_text(text + "\n", encoding="utf-8")
    return text
