"""
Monte Carlo comparison of the estimators over a rate-ratio or IMU-rate sweep.

Every sweep point uses the seeds ``seed, seed + 1, ...``; since the simulator
draws parameters and motion from their own random streams, run ``r`` sees
the same calibration parameters at every sweep point.
"""

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .baselines import kok_ml, wu_ekf
from .initialization import InitConfig, build_init
from .models import TABLE1_DENSITIES
from .pipeline import joint_map
from .sim import SimConfig, simulate
from .solver import SolverOptions

log = logging.getLogger(__name__)

METHODS = ("joint_map", "wu_ekf", "kok_ml")
JOBS_ENV = "MAGIMU_JOBS"


class ComparisonAborted(RuntimeError):
    """A method failed on more than half of the runs at some sweep point."""

    exit_code = 11


@dataclass
class CompareConfig:
    sweep: str = "ratio"  # "ratio" or "frequency"
    values: tuple = (1, 2, 4, 8)
    rate_hz: float = 80.0
    rate_ratio: int = 1
    duration_s: float = 300.0
    methods: tuple = METHODS
    seed: int = 0
    noise_free: bool = False
    noise_densities: dict = field(default_factory=lambda: dict(TABLE1_DENSITIES))
    dip_angle_deg: float = 72.0
    max_iter: int = 100
    step_tol: float = 1e-6

    def __post_init__(self):
        if self.sweep not in ("ratio", "frequency"):
            raise ValueError("sweep must be 'ratio' or 'frequency'")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        self.values = tuple(self.values)
        self.methods = tuple(self.methods)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return {
            "sweep": self.sweep,
            "values": list(self.values),
            "rate_hz": self.rate_hz,
            "rate_ratio": self.rate_ratio,
            "duration_s": self.duration_s,
            "methods": list(self.methods),
            "seed": self.seed,
            "noise_free": self.noise_free,
            "noise_densities": dict(self.noise_densities),
            "dip_angle_deg": self.dip_angle_deg,
            "max_iter": self.max_iter,
            "step_tol": self.step_tol,
        }

    def sim_config(self, value, run):
        rate_hz, ratio = self.rate_hz, self.rate_ratio
        if self.sweep == "ratio":
            ratio = int(value)
        else:
            rate_hz = float(value)
        return SimConfig(
            seed=self.seed + run,
            rate_hz=rate_hz,
            rate_ratio=ratio,
            duration_s=self.duration_s,
            noise_free=self.noise_free,
            noise_densities=dict(self.noise_densities),
        )


def run_method(method, dataset, init, noise, options):
    """Run one estimator; returns ``(params, info dict)``."""
    if method == "joint_map":
        x, report = joint_map(dataset, noise, init, options)
        return x.params, report.to_dict()
    if method == "wu_ekf":
        params, state = wu_ekf(dataset, init, noise)
        return params, state.to_dict()
    if method == "kok_ml":
        params, result = kok_ml(dataset, init, noise, options)
        return params, result.to_dict()
    raise ValueError(f"unknown method {method!r}")


def run_cell(cfg, value, run):
    """Simulate one dataset and run every configured method on it."""
    sim_cfg = cfg.sim_config(value, run)
    dataset, truth = simulate(sim_cfg)
    noise = sim_cfg.noise()
    options = SolverOptions(max_iter=cfg.max_iter, step_tol=cfg.step_tol)
    out = {}
    try:
        t0 = time.perf_counter()
        init = build_init(dataset, noise, InitConfig(dip_angle_deg=cfg.dip_angle_deg))
        init_time = time.perf_counter() - t0
    except Exception as exc:  # initialization failure sinks every method
        log.warning("run %d at %s: initialization failed: %s", run, value, exc)
        return {m: {"ok": False, "error": f"{type(exc).__name__}: {exc}"} for m in cfg.methods}
    for method in cfg.methods:
        t0 = time.perf_counter()
        try:
            params, info = run_method(method, dataset, init, noise, options)
            errors = metrics.group_errors(params, truth.params)
            ok = all(np.isfinite(v) for v in errors.values())
            out[method] = {
                "ok": bool(ok),
                "errors": errors,
                "wall_time": init_time + time.perf_counter() - t0,
                "info": info,
            }
        except Exception as exc:
            log.warning("run %d at %s: %s failed: %s", run, value, method, exc)
            out[method] = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
    return out


def _cell_task(args):
    cfg_dict, value, run = args
    return run_cell(CompareConfig.from_dict(cfg_dict), value, run)


def default_jobs():
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def compare(cfg, num_runs, jobs=None):
    """
    Run the sweep and tabulate RMSE per (sweep value, method).

    Returns
    -------
    dict
        ``{"config", "num_runs", "rows", "runs"}``. Each row holds the sweep
        value, the method, the RMSE per parameter group, the number of
        successful runs and the mean wall time. Rows are sorted by sweep value
        and then by method order.

    Raises
    ------
    ComparisonAborted
        If a method fails on more than half the runs of a sweep point.
    """
    jobs = default_jobs() if jobs is None else int(jobs)
    tasks = [(cfg.to_dict(), v, r) for v in cfg.values for r in range(num_runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_cell_task, tasks))
    else:
        results = [_cell_task(t) for t in tasks]

    cells = {(t[1], t[2]): res for t, res in zip(tasks, results)}
    rows, runs, failures = [], [], []
    for v in cfg.values:
        for method in cfg.methods:
            per_run = [cells[(v, r)][method] for r in range(num_runs)]
            good = [c for c in per_run if c["ok"]]
            if len(good) * 2 < num_runs:
                errs = [c.get("error", "non-finite estimate") for c in per_run if not c["ok"]]
                failures.append(f"{method} at {cfg.sweep}={v}: {len(errs)}/{num_runs} failed ({errs[0]})")
            rm = metrics.rmse([c["errors"] for c in good])
            rows.append(
                {
                    "sweep": cfg.sweep,
                    "value": v,
                    "method": method,
                    "num_ok": len(good),
                    **{f"rmse_{g}": rm[g] for g in metrics.GROUPS},
                    "wall_time_mean": float(np.mean([c["wall_time"] for c in good])) if good else float("nan"),
                }
            )
            for r, c in enumerate(per_run):
                runs.append({"value": v, "method": method, "run": r, **c})
    if failures:
        raise ComparisonAborted("; ".join(failures))
    return {"config": cfg.to_dict(), "num_runs": num_runs, "rows": rows, "runs": runs}


def rmse_table(result):
    """The deterministic part of a comparison: RMSE columns without wall times."""
    keep = ["sweep", "value", "method", "num_ok"] + [f"rmse_{g}" for g in metrics.GROUPS]
    return [{k: row[k] for k in keep} for row in result["rows"]]


def write_table_csv(result, path):
    import csv

    rows = result["rows"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
