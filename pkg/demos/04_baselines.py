"""
Comparing against filter-based calibration
==========================================

Two marginal-posterior baselines run on the same data: an EKF whose state
carries the parameters next to the orientation, and maximum likelihood with
an orientation EKF as the likelihood evaluator. The second needs two filter
passes per parameter for every gradient, so pass ``--with-ml`` to include it.
"""

import sys

from magimu.baselines import kok_ml, wu_ekf
from magimu.initialization import build_init
from magimu.metrics import rmse, group_errors
from magimu.pipeline import joint_map
from magimu.sim import SimConfig, simulate

with_ml = "--with-ml" in sys.argv
runs = {"joint_map": [], "wu_ekf": [], "kok_ml": []}
for seed in range(3):
    cfg = SimConfig(seed=seed)
    dataset, truth = simulate(cfg)
    noise = cfg.noise()
    init = build_init(dataset, noise)
    x, _ = joint_map(dataset, noise, init)
    runs["joint_map"].append(group_errors(x.params, truth.params))
    params, state = wu_ekf(dataset, init, noise)
    runs["wu_ekf"].append(group_errors(params, truth.params))
    if with_ml:
        params, result = kok_ml(dataset, init, noise)
        runs["kok_ml"].append(group_errors(params, truth.params))
        print(f"seed {seed}: ML used {result.ekf_passes} filter passes")

for method, errs in runs.items():
    if errs:
        r = rmse(errs)
        print(f"{method:10s} " + "  ".join(f"{g} {v:.2e}" for g, v in r.items()))
