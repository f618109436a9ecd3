"""Across-seed aggregation with percentile-bootstrap confidence bands."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .config import ConfigError, config_hash

N_RESAMPLES = 1000
LEVEL = 0.8


def fmt(x) -> str:
    """17 significant digits (exact float round-trip); blanks for missing values."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if np.isnan(x):
        return ""
    return format(x, ".17g")


def parse(text: str):
    return float(text) if text != "" else np.nan


def bootstrap_band(values, n_resamples=N_RESAMPLES, level=LEVEL, rng=0):
    """Mean and percentile-bootstrap interval of the mean, per column.

    ``values`` is ``(n_seeds, n_points)``; NaNs mark missing entries and
    are dropped column by column.  Returns ``(mean, lo, hi, n)``.  The
    bounds are widened to contain the mean when resampling is degenerate.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    rng = np.random.default_rng(rng)
    q = 100.0 * np.array([(1.0 - level) / 2.0, (1.0 + level) / 2.0])
    n_points = values.shape[1]
    mean = np.full(n_points, np.nan)
    lo = np.full(n_points, np.nan)
    hi = np.full(n_points, np.nan)
    count = (~np.isnan(values)).sum(axis=0)
    complete = count == values.shape[0]
    if complete.any() and values.shape[0] > 0:
        block = values[:, complete]
        idx = rng.integers(0, block.shape[0], size=(n_resamples, block.shape[0]))
        boot = block[idx].mean(axis=1)
        mean[complete] = block.mean(axis=0)
        lo[complete], hi[complete] = np.percentile(boot, q, axis=0)
    for j in np.nonzero(~complete & (count > 0))[0]:
        col = values[~np.isnan(values[:, j]), j]
        idx = rng.integers(0, col.size, size=(n_resamples, col.size))
        mean[j] = col.mean()
        lo[j], hi[j] = np.percentile(col[idx].mean(axis=1), q)
    lo = np.fmin(lo, mean)
    hi = np.fmax(hi, mean)
    return mean, lo, hi, count


# --- reading runs ------------------------------------------------------------------

def read_seed_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    cols = {}
    for key in rows[0]:
        if key == "phase":
            cols[key] = [r[key] for r in rows]
        else:
            cols[key] = np.array([parse(r[key]) for r in rows])
    return cols


def read_run(run_dir):
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"{run_dir} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    seeds = [read_seed_csv(run_dir / name) for name in manifest["seed_files"]]
    return manifest, seeds


METRIC_SKIP = {"episode", "phase", "timestep"}


def _metrics(seeds):
    names = [k for k in seeds[0] if k not in METRIC_SKIP]
    return names


def episode_matrix(seeds, name):
    n = max(len(s["episode"]) for s in seeds)
    out = np.full((len(seeds), n), np.nan)
    for i, s in enumerate(seeds):
        out[i, :len(s[name])] = s[name]
    return np.arange(1, n + 1), out


def timestep_matrix(seeds, name, resolution):
    """Bin episode-level values by the cumulative timestep at which each episode ended.

    A bin holds the mean over episodes ending inside it; empty bins carry
    the previous bin's value forward.
    """
    end = max(s["timestep"][-1] for s in seeds)
    edges = np.arange(resolution, end + resolution, resolution)
    out = np.full((len(seeds), edges.size), np.nan)
    for i, s in enumerate(seeds):
        t, v = s["timestep"], s[name]
        b = np.searchsorted(edges, t, side="left")
        ok = ~np.isnan(v)
        sums = np.bincount(b[ok], weights=v[ok], minlength=edges.size)[:edges.size]
        cnt = np.bincount(b[ok], minlength=edges.size)[:edges.size]
        last = np.nan
        for j in range(edges.size):
            if cnt[j]:
                last = sums[j] / cnt[j]
            out[i, j] = last
    return edges, out


def aggregate_seeds(seeds, x_axis="episode", resolution=None, rng=0):
    """Long-format rows ``(metric, x, mean, lo80, hi80, n)``."""
    rows = []
    for name in _metrics(seeds):
        if x_axis == "episode":
            x, mat = episode_matrix(seeds, name)
        else:
            x, mat = timestep_matrix(seeds, name, resolution)
        if np.all(np.isnan(mat)):
            continue
        mean, lo, hi, n = bootstrap_band(mat, rng=rng)
        for j in range(x.size):
            if n[j]:
                rows.append((name, x[j], mean[j], lo[j], hi[j], n[j]))
    return rows


def write_aggregate(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "x", "mean", "lo80", "hi80", "n"])
        for name, x, mean, lo, hi, n in rows:
            w.writerow([name, fmt(x), fmt(mean), fmt(lo), fmt(hi), fmt(n)])


def default_axis(cfg):
    if "timesteps" in cfg["harness"]:
        return "timestep", max(1, cfg["harness"]["timesteps"] // 100)
    return "episode", None


def cmd_aggregate(run_dirs, out, resolution=None):
    """Pool the seeds of several run directories that share one configuration."""
    if not run_dirs:
        raise ConfigError("aggregate needs at least one run directory")
    manifests, seeds = [], []
    for d in run_dirs:
        m, s = read_run(d)
        manifests.append(m)
        seeds.extend(s)
    hashes = {config_hash(m["config"]) for m in manifests}
    if len(hashes) != 1:
        raise ConfigError("run directories were produced by different configurations")
    if len(seeds) < 2:
        raise ConfigError("at least 2 seeds are needed for an interval")
    x_axis, default_res = default_axis(manifests[0]["config"])
    rows = aggregate_seeds(seeds, x_axis, resolution or default_res)
    write_aggregate(rows, out)
    return rows
