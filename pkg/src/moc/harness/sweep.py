"""Grid sweeps over dotted config paths, ranked by final-window performance."""

from __future__ import annotations

import csv
import itertools
import json
from pathlib import Path

from .aggregate import fmt
from .config import ConfigError, set_path, validate_config
from .runner import cmd_run, final_score


def expand_grid(cfg):
    """Configs for the Cartesian product of ``harness.grid``, with their parameter dicts."""
    grid = cfg["harness"].get("grid") or {}
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("config error at harness/grid: grid is empty")
    keys = sorted(grid)
    combos = list(itertools.product(*(grid[k] for k in keys)))
    cap = cfg["harness"]["max_grid_runs"]
    if len(combos) > cap:
        raise ConfigError(f"config error at harness/grid: {len(combos)} runs exceed max_grid_runs={cap}")
    out = []
    for values in combos:
        point = dict(zip(keys, values))
        doc = {k: v for k, v in cfg.items()}
        doc["harness"] = {k: v for k, v in cfg["harness"].items() if k != "grid"}
        for path, value in point.items():
            doc = set_path(doc, path, value)
        out.append((point, validate_config(doc)))
    return out


def cmd_sweep(cfg, output_dir=None, force=False, workers=None):
    """Run every grid point into its own directory and write ``ranking.csv``."""
    root = Path(output_dir or cfg["harness"]["output_dir"])
    points = expand_grid(cfg)
    rows = []
    for i, (point, sub) in enumerate(points):
        run_dir = root / f"run_{i:03d}"
        _, results = cmd_run(sub, run_dir, force=force, workers=workers)
        metric, score = final_score(results, sub)
        rows.append((point, run_dir.name, metric, score))
    lower_better = rows[0][2] == "steps"
    rows.sort(key=lambda r: r[3] if lower_better else -r[3])
    with open(root / "ranking.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "run", "params", "metric", "score"])
        for rank, (point, name, metric, score) in enumerate(rows, 1):
            w.writerow([rank, name, json.dumps(point, sort_keys=True), metric, fmt(score)])
    return rows
