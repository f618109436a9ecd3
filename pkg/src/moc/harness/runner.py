"""Seeded experiment runs: one learner per derived seed, CSV output and a manifest."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__
from ..agents import make_agent
from ..analysis import information_radius
from ..env import make_env
from .aggregate import aggregate_seeds, default_axis, fmt, write_aggregate
from .config import ConfigError, config_hash

log = logging.getLogger(__name__)


def agent_params(cfg) -> dict:
    """Constructor arguments for :func:`moc.agents.make_agent` from a validated config."""
    ln, op, ft = cfg["learner"], cfg["options"], cfg["features"]
    shared = dict(lr=ln["lr"], lr_values=ln["lr_values"], lr_policy=ln["lr_policy"],
                  discount=ln["discount"], n_step=ln["n_step"], features=ft["kind"], hidden=ft["hidden"],
                  rbf_radii=tuple(ft["radii"]), kernels_per_radius=ft["kernels_per_radius"],
                  rbf_samples=ft["n_samples"])
    if ln["algorithm"] == "AC":
        return dict(shared, value_loss_coef=ln["value_loss_coef"])
    return dict(shared, eta=ln["eta"], lr_termination=ln["lr_termination"], lr_meta=ln["lr_meta"],
                n_options=op["n_options"], options=op["kind"], meta=op["meta"], tau=op["tau"],
                epsilon_mu=op["epsilon_mu"], epsilon_action=op["epsilon_action"],
                hallway_termination=op["hallway_termination"], is_ratio_cap=ln["is_ratio_cap"],
                policy_is_correction=ln["policy_is_correction"],
                action_ratio_on_bootstrap=ln["action_ratio_on_bootstrap"], init_scale=op["init_scale"])


def seed_sequences(cfg):
    """Independent per-seed streams split from the master seed."""
    return np.random.SeedSequence(cfg["harness"]["seed"]).spawn(cfg["harness"]["n_seeds"])


def _radius_states(agent, env, cfg, rng):
    """Feature inputs and weights over which the information radius is averaged."""
    fm = agent.feature_map_
    if cfg["features"]["kind"] == "one_hot":
        n = env.n_states
        return list(range(n)), np.full(n, 1.0 / n)
    visited = fm.visited_
    k = min(cfg["harness"]["info_radius_states"], visited.shape[0])
    sample = visited[rng.choice(visited.shape[0], size=k, replace=False)]
    return [fm.phi(s) for s in sample], np.full(k, 1.0 / k)


def run_seed(cfg, seed_seq):
    """Train one learner and return its per-episode columns."""
    env_ss, agent_ss, eval_ss = seed_seq.spawn(3)
    env = make_env({"name": cfg["env"]["name"], "params": cfg["env"]["params"]},
                   seed=np.random.default_rng(env_ss))
    agent = make_agent(cfg["learner"]["algorithm"], random_state=np.random.default_rng(agent_ss),
                       **agent_params(cfg))
    h = cfg["harness"]
    transfer = cfg["env"]["transfer"]
    every = h["info_radius_every"]
    has_options = cfg["learner"]["algorithm"] != "AC"
    eval_rng = np.random.default_rng(eval_ss)
    radius_inputs = None
    timesteps, radius = [], []
    total, episode = 0, 0

    def transfer_due():
        if transfer is None or env.phase != "source":
            return False
        if "episode" in transfer:
            return episode >= transfer["episode"]
        if "timesteps" in h:
            return total >= transfer["fraction"] * h["timesteps"]
        return episode >= round(transfer["fraction"] * h["episodes"])

    def budget_left():
        return episode < h["episodes"] if "episodes" in h else total < h["timesteps"]

    while budget_left():
        if transfer_due():
            env.apply_transfer()
        agent.partial_fit(env, 1)
        episode += 1
        total += agent.history_.steps[-1]
        timesteps.append(total)
        value = None
        if has_options and every and episode % every == 0:
            if radius_inputs is None:
                radius_inputs = _radius_states(agent, env, cfg, eval_rng)
            value = information_radius(agent.option_set_, radius_inputs[1], radius_inputs[0])
        radius.append(value)
    hist = agent.history_
    cols = {
        "episode": list(range(1, episode + 1)),
        "steps": hist.steps,
        "return": hist.returns,
        "phase": hist.phases,
    }
    if has_options:
        durations = np.array(hist.durations).reshape(episode, -1)
        for k in range(durations.shape[1]):
            cols[f"option_{k}_mean_duration"] = durations[:, k]
    cols["info_radius"] = radius
    cols["timestep"] = timesteps
    return cols


def write_seed_csv(cols, path):
    names = list(cols)
    n = len(cols["episode"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(n):
            w.writerow([cols[c][i] if c == "phase" else fmt(cols[c][i]) for c in names])


def _run_one(args):
    cfg, seq = args
    return run_seed(cfg, seq)


def _prepare_dir(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
        for p in list(out.glob("seed_*.csv")) + [out / "aggregate.csv", out / "manifest.json"]:
            if p.exists():
                p.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(cfg, output_dir=None, force=False, workers=None):
    """Run every seed of ``cfg`` and write per-seed CSVs, an aggregate CSV and a manifest."""
    out = _prepare_dir(output_dir or cfg["harness"]["output_dir"], force)
    seqs = seed_sequences(cfg)
    workers = workers or cfg["harness"]["workers"]
    jobs = [(cfg, s) for s in seqs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    files = []
    for i, cols in enumerate(results):
        name = f"seed_{i:03d}.csv"
        write_seed_csv(cols, out / name)
        files.append(name)
    if len(results) >= 2:
        x_axis, res = default_axis(cfg)
        seeds = [{k: (v if k == "phase" else np.array(v, dtype=float)) for k, v in c.items()} for c in results]
        write_aggregate(aggregate_seeds(seeds, x_axis, res), out / "aggregate.csv")
    manifest = {
        "version": __version__,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "master_seed": cfg["harness"]["seed"],
        "seeds": [{"entropy": s.entropy, "spawn_key": list(s.spawn_key)} for s in seqs],
        "seed_files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    log.info("wrote %d seed files to %s", len(files), out)
    return out, results


def final_score(results, cfg):
    """Mean over seeds of the final-window performance in the last phase.

    Steps per episode (lower is better) on FourRooms, return otherwise.
    """
    metric = "steps" if cfg["env"]["name"] == "four_rooms" else "return"
    frac = cfg["harness"]["final_fraction"]
    scores = []
    for cols in results:
        phases = np.asarray(cols["phase"])
        vals = np.asarray(cols[metric], dtype=float)[phases == phases[-1]]
        k = max(1, int(round(frac * vals.size)))
        scores.append(vals[-k:].mean())
    return metric, float(np.mean(scores))
