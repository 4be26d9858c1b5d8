"""
Command-line interface: ``simulate``, ``calibrate``, ``compare``, ``evaluate``.

Machine-readable JSON goes to stdout (or ``--out``); logs go to stderr.
Exit codes: 0 success, 1 other error, 2 estimator did not converge, then one
code per input error class (see :mod:`magimu.io`), 9 initialization failure,
10 filter divergence, 11 comparison aborted.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, io, metrics
from .baselines import FilterDivergenceError, KokOptions
from .benchmark import ComparisonAborted, CompareConfig, compare, rmse_table, write_table_csv
from .initialization import InitConfig, InitializationError, StationaryConfig, build_init
from .models import GRAVITY, TABLE1_DENSITIES, NoiseConfig
from .sim import SimConfig, simulate

log = logging.getLogger("magimu")

EXIT_NOT_CONVERGED = 2
EXIT_INIT = 9
EXIT_DIVERGED = 10


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def simulate_cmd(out_dir, seed=0, rate_hz=80.0, rate_ratio=1, duration_s=300.0, noise_free=False, num_axes=6):
    """Simulate one dataset into ``out_dir/data.csv`` with its sidecar. Returns the sidecar dict."""
    cfg = SimConfig(
        seed=seed,
        rate_hz=rate_hz,
        rate_ratio=rate_ratio,
        duration_s=duration_s,
        noise_free=noise_free,
        num_axes=num_axes,
    )
    dataset, truth = simulate(cfg)
    path = Path(out_dir) / "data.csv"
    extra = {
        "simulation": {
            "seed": seed,
            "rate_hz": rate_hz,
            "rate_ratio": rate_ratio,
            "duration_s": duration_s,
            "noise_free": noise_free,
            "num_axes": num_axes,
        },
        "noise_densities": dict(cfg.noise_densities),
    }
    io.write_dataset(dataset, path, truth=truth.params, extra=extra)
    return io.read_meta(path)


def _load_config(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def calibrate_cmd(
    dataset_path,
    config_path=None,
    method="joint_map",
    out_path=None,
    downsample=1,
    freeze=(),
    max_iter=100,
    step_tol=1e-6,
):
    """
    Calibrate one dataset file.

    Noise densities come from the config (``noise_densities``), else from the
    sidecar, else the simulation defaults. Per-sample magnetometer noise is
    fixed before ``--downsample`` is applied because decimation does not
    change the noise of the samples that are kept.

    Returns
    -------
    CalibrationReport
    """
    from .pipeline import joint_map
    from .solver import SolverOptions
    from .baselines import kok_ml, wu_ekf

    config = _load_config(config_path)
    meta = io.read_meta(dataset_path) if io.sidecar_path(dataset_path).exists() else None
    dataset = io.read_dataset(dataset_path, meta)
    dens = dict(TABLE1_DENSITIES)
    dens.update((meta or {}).get("noise_densities", {}))
    dens.update(config.get("noise_densities", {}))
    noise = NoiseConfig.from_densities(
        dens["accel"], dens["gyro"], dens["mag"], dataset.rate_hz, dataset.rate_ratio
    )
    if downsample > 1:
        dataset = dataset.downsample(downsample)
    g0 = float(config.get("gravity", GRAVITY))
    init_cfg = InitConfig(
        dip_angle_deg=float(config.get("dip_angle_deg", 72.0)),
        gravity=g0,
        stationary=StationaryConfig(**config.get("stationary", {})),
    )
    echo = {
        "method": method,
        "downsample": int(downsample),
        "rate_ratio": int(dataset.rate_ratio),
        "freeze": list(freeze),
        "max_iter": int(max_iter),
        "step_tol": float(step_tol),
        "noise_densities": dens,
        "noise_sigmas": {"accel": noise.sigma_a, "gyro": noise.sigma_w, "mag": noise.sigma_m},
        "dip_angle_deg": init_cfg.dip_angle_deg,
        "gravity": g0,
    }
    init = build_init(dataset, noise, init_cfg)
    if method == "joint_map":
        x, rep = joint_map(dataset, noise, init, SolverOptions(max_iter=max_iter, step_tol=step_tol, freeze=tuple(freeze)), g0)
        params, solve, converged = x.params, rep.to_dict(), rep.converged
    elif method == "wu_ekf":
        if freeze:
            log.warning("--freeze is ignored by wu_ekf")
        params, state = wu_ekf(dataset, init, noise, g0=g0)
        solve, converged = state.to_dict(), True
    elif method == "kok_ml":
        if freeze:
            log.warning("--freeze is ignored by kok_ml")
        params, result = kok_ml(dataset, init, noise, KokOptions(max_iter=max_iter, step_tol=step_tol), g0=g0)
        solve = result.to_dict()
        converged = result.termination_reason in ("step_tol", "gtol")
    else:
        raise ValueError(f"unknown method {method!r}")
    report = io.CalibrationReport(
        params=params,
        method=method,
        solve=solve,
        config=echo,
        version=__version__,
        dataset_sha256=io.file_digest(dataset_path),
        converged=converged,
    )
    if out_path is not None:
        io.write_report(report, out_path)
    return report


def compare_cmd(config, num_runs, out_path=None, jobs=None):
    """
    Run a Monte Carlo sweep. ``config`` is a dict or a JSON file path.

    Writes ``<out>.json`` (full result) and ``<out>.csv`` (one row per sweep
    value and method) when ``out_path`` is given. Returns the result dict.
    """
    if not isinstance(config, dict):
        config = _load_config(config)
    cfg = CompareConfig.from_dict(config)
    result = compare(cfg, num_runs, jobs)
    if out_path is not None:
        out = Path(out_path)
        base = out.with_suffix("") if out.suffix in (".json", ".csv") else out
        io.dump_json(result, base.with_suffix(".json"))
        write_table_csv(result, base.with_suffix(".csv"))
    return result


def evaluate_cmd(report_paths, truth_paths):
    """
    Errors of one or more reports against ground-truth sidecars.

    A single truth file may serve every report. With more than one report
    the RMSE per parameter group is included.

    Raises
    ------
    DigestMismatchError
        If a report was computed on a different dataset than the truth file describes.
    """
    report_paths = list(report_paths)
    truth_paths = list(truth_paths)
    if len(truth_paths) == 1:
        truth_paths = truth_paths * len(report_paths)
    if len(truth_paths) != len(report_paths):
        raise ValueError("give one truth file or one per report")
    records = []
    for rp, tp in zip(report_paths, truth_paths):
        report = io.read_report(rp)
        meta = io.read_meta(tp)
        digest = meta.get("dataset_sha256")
        if digest and report.dataset_sha256 and digest != report.dataset_sha256:
            raise io.DigestMismatchError(f"{rp} was computed on a different dataset than {tp}")
        if "truth" not in meta:
            raise io.DataError(f"{tp} has no ground truth")
        truth = io.params_from_dict(meta["truth"])
        records.append(
            {
                "report": str(rp),
                "truth": str(tp),
                "method": report.method,
                "errors": metrics.parameter_errors(report.params, truth),
            }
        )
    out = {"units": metrics.UNITS, "runs": records}
    if len(records) > 1:
        out["rmse"] = metrics.rmse(
            [{g: r["errors"][g]["norm"] for g in metrics.GROUPS} for r in records]
        )
    return out


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _freeze_list(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


def build_parser():
    p = argparse.ArgumentParser(prog="magimu", description="Joint magnetometer-IMU calibration toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a simulated dataset")
    s.add_argument("--out", required=True, help="output directory (data.csv + meta.json)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rate-hz", type=float, default=80.0)
    s.add_argument("--rate-ratio", type=int, default=1)
    s.add_argument("--duration", type=float, default=300.0, help="seconds of motion")
    s.add_argument("--axes", type=int, default=6, help="number of rotation axes")
    s.add_argument("--noise-free", action="store_true")

    c = sub.add_parser("calibrate", help="calibrate one dataset")
    c.add_argument("dataset", help="dataset CSV")
    c.add_argument("--config", help="JSON config")
    c.add_argument("--method", choices=("joint_map", "wu_ekf", "kok_ml"), default="joint_map")
    c.add_argument("--out", help="report JSON (default: stdout)")
    c.add_argument("--downsample", type=int, default=1, help="keep every N-th accel/mag sample")
    c.add_argument("--freeze", type=_freeze_list, default=(), help="comma-separated parameter blocks")
    c.add_argument("--max-iter", type=int, default=100)
    c.add_argument("--step-tol", type=float, default=1e-6)

    m = sub.add_parser("compare", help="Monte Carlo comparison of all methods")
    m.add_argument("--config", help="JSON config (sweep, values, methods, ...)")
    m.add_argument("--num-runs", type=int, default=10)
    m.add_argument("--out", required=True, help="output prefix for .json and .csv")
    m.add_argument("--jobs", type=int, default=None, help="worker processes (default $MAGIMU_JOBS or 1)")

    e = sub.add_parser("evaluate", help="errors of reports against ground truth")
    e.add_argument("reports", nargs="+")
    e.add_argument("--truth", nargs="+", required=True, help="meta.json file(s)")
    e.add_argument("--out", help="write JSON here instead of stdout")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "simulate":
            meta = simulate_cmd(
                args.out, args.seed, args.rate_hz, args.rate_ratio, args.duration, args.noise_free, args.axes
            )
            print(io.dump_json({"dataset": str(Path(args.out) / meta["dataset_file"]), **meta}))
            return 0
        if args.command == "calibrate":
            report = calibrate_cmd(
                args.dataset,
                args.config,
                args.method,
                args.out,
                args.downsample,
                args.freeze,
                args.max_iter,
                args.step_tol,
            )
            if args.out is None:
                print(io.dump_json(report.to_dict()))
            if not report.converged:
                log.error("estimator did not converge: %s", report.solve.get("termination_reason"))
                return EXIT_NOT_CONVERGED
            return 0
        if args.command == "compare":
            result = compare_cmd(args.config, args.num_runs, args.out, args.jobs)
            print(io.dump_json(rmse_table(result)))
            return 0
        if args.command == "evaluate":
            out = evaluate_cmd(args.reports, args.truth)
            text = io.dump_json(out, args.out)
            if args.out is None:
                print(text)
            return 0
    except io.DataError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except InitializationError as exc:
        log.error("initialization failed: %s", exc)
        return EXIT_INIT
    except FilterDivergenceError as exc:
        log.error("filter diverged: %s", exc)
        return EXIT_DIVERGED
    except ComparisonAborted as exc:
        log.error("comparison aborted: %s", exc)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
