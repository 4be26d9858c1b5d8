"""
The command-line workflow
=========================

``magimu simulate`` writes a CSV plus a ``meta.json`` sidecar,
``magimu calibrate`` writes a JSON report, and ``magimu evaluate`` scores
reports against the ground truth in the sidecar. The same entry point is
called here in-process; from a shell, drop the ``main([...])`` wrapper.
"""

import json
import tempfile
from pathlib import Path

from magimu.cli import main

work = Path(tempfile.mkdtemp())
main(["simulate", "--out", str(work / "board"), "--seed", "4"])
main(["calibrate", str(work / "board" / "data.csv"), "--out", str(work / "map.json")])
main(["calibrate", str(work / "board" / "data.csv"), "--method", "wu_ekf", "--out", str(work / "ekf.json")])
main(["calibrate", str(work / "board" / "data.csv"), "--downsample", "3", "--out", str(work / "ds3.json")])
main(["evaluate", str(work / "map.json"), str(work / "ekf.json"), str(work / "ds3.json"),
      "--truth", str(work / "board" / "meta.json"), "--out", str(work / "eval.json")])

scores = json.loads((work / "eval.json").read_text())
for run in scores["runs"]:
    print(Path(run["report"]).name, {g: f"{e['norm']:.1e}" for g, e in run["errors"].items()})

# A small Monte Carlo sweep over the rate ratio (the ML baseline is left out for speed).
cfg = work / "sweep.json"
cfg.write_text(json.dumps({"sweep": "ratio", "values": [1, 4], "methods": ["joint_map", "wu_ekf"]}))
main(["compare", "--config", str(cfg), "--num-runs", "2", "--out", str(work / "sweep")])
print((work / "sweep.csv").read_text())
