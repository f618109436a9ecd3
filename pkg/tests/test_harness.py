import json

import numpy as np
import pytest

from moc import options as opt
from moc.harness import aggregate, cli
from moc.harness.aggregate import bootstrap_band, cmd_aggregate, fmt, read_seed_csv, timestep_matrix
from moc.harness.config import ConfigError, config_hash, load_config, validate_config
from moc.harness.runner import cmd_run, final_score
from moc.harness.sweep import expand_grid


def _doc(**harness):
    h = dict(n_seeds=2, seed=5, episodes=3, info_radius_every=1)
    h.update(harness)
    return {"env": {"name": "four_rooms", "params": {"max_episode_steps": 60}},
            "learner": {"algorithm": "MOC", "eta": 0.5}, "harness": h}


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


# --- configuration -----------------------------------------------------------------------

@pytest.mark.parametrize("mutate, where", [
    (lambda d: d["learner"].update(eta=2.0), "learner/eta"),
    (lambda d: d["learner"].update(bogus=1), "learner"),
    (lambda d: d.update(extra={}), "<root>"),
    (lambda d: d["env"].update(name="atari"), "env/name"),
    (lambda d: d["harness"].update(timesteps=100), "harness"),
    (lambda d: d["env"].update(transfer={"episode": 10}), "env/transfer/episode"),
])
def test_invalid_configs_name_the_path(mutate, where):
    doc = _doc()
    mutate(doc)
    with pytest.raises(ConfigError, match=f"config error at {where}"):
        validate_config(doc)


def test_hallway_rules():
    doc = _doc()
    doc["options"] = {"kind": "hallway"}
    doc["learner"]["algorithm"] = "AC"
    with pytest.raises(ConfigError):
        validate_config(doc)
    doc["learner"]["algorithm"] = "MOC"
    doc["env"] = {"name": "mountain_car_sparse"}
    with pytest.raises(ConfigError):
        validate_config(doc)


def test_defaults_filled_and_hash_ignores_seed():
    a = validate_config(_doc())
    assert a["options"]["n_options"] == 4 and a["learner"]["discount"] == 0.99
    b = validate_config(_doc(seed=99, n_seeds=7, output_dir="elsewhere"))
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(validate_config(_doc(episodes=4)))


def test_cli_exit_code_on_bad_config(tmp_path, capsys):
    doc = _doc()
    doc["learner"]["lr"] = -1
    assert cli.main(["run", str(_write(tmp_path, doc))]) == 2
    assert "learner/lr" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.json")]) == 2


def test_shipped_configs_validate():
    from importlib.resources import files
    names = [p for p in files("moc.configs").iterdir() if p.name.endswith(".json")]
    assert len(names) >= 3
    for p in names:
        load_config(p)


# --- runs --------------------------------------------------------------------------------

def test_run_outputs_and_determinism(tmp_path):
    cfg = validate_config(_doc())
    out1, res = cmd_run(cfg, tmp_path / "a")
    out2, _ = cmd_run(cfg, tmp_path / "b", workers=2)
    for name in ("seed_000.csv", "seed_001.csv", "aggregate.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    man = json.loads((out1 / "manifest.json").read_text())
    assert man["config_hash"] == config_hash(cfg) and man["seed_files"] == ["seed_000.csv", "seed_001.csv"]
    assert len(man["seeds"]) == 2
    cols = read_seed_csv(out1 / "seed_000.csv")
    assert list(cols["episode"]) == [1, 2, 3]
    assert {"steps", "return", "info_radius", "option_3_mean_duration", "timestep"} <= set(cols)
    assert np.all(cols["info_radius"] >= 0)
    assert (out1 / "seed_000.csv").read_bytes() != (out1 / "seed_001.csv").read_bytes()
    metric, score = final_score(res, cfg)
    assert metric == "steps" and score > 0


def test_run_refuses_nonempty_dir_without_force(tmp_path):
    cfg = validate_config(_doc(n_seeds=1, episodes=1))
    cmd_run(cfg, tmp_path / "r")
    with pytest.raises(ConfigError):
        cmd_run(cfg, tmp_path / "r")
    cmd_run(cfg, tmp_path / "r", force=True)


def test_transfer_phase_column(tmp_path):
    doc = _doc(n_seeds=1, episodes=4)
    doc["env"]["transfer"] = {"episode": 2}
    _, res = cmd_run(validate_config(doc), tmp_path / "t")
    assert res[0]["phase"] == ["source", "source", "transfer", "transfer"]


def test_timestep_budget(tmp_path):
    doc = _doc(n_seeds=2)
    del doc["harness"]["episodes"]
    doc["harness"]["timesteps"] = 150
    doc["env"]["transfer"] = {"fraction": 0.5}
    _, res = cmd_run(validate_config(doc), tmp_path / "ts")
    for cols in res:
        assert cols["timestep"][-1] >= 150 and cols["timestep"][-2] < 150


# --- sweeps ------------------------------------------------------------------------------

def test_grid_expansion_and_limits():
    cfg = validate_config(_doc(grid={"learner.eta": [0.0, 1.0], "learner.lr": [0.1, 0.2, 0.4]}))
    points = expand_grid(cfg)
    assert len(points) == 6
    assert {(p["learner.eta"], p["learner.lr"]) for p, _ in points} == {(e, l) for e in (0.0, 1.0)
                                                                         for l in (0.1, 0.2, 0.4)}
    assert points[0][1]["learner"]["lr"] == 0.1
    with pytest.raises(ConfigError, match="max_grid_runs"):
        expand_grid(validate_config(_doc(grid={"learner.lr": [0.1, 0.2, 0.4]}, max_grid_runs=2)))
    with pytest.raises(ConfigError, match="empty"):
        expand_grid(validate_config(_doc()))
    with pytest.raises(ConfigError):
        expand_grid(validate_config(_doc(grid={"learner.eta": [3.0]})))


def test_sweep_writes_ranking(tmp_path):
    doc = _doc(n_seeds=1, episodes=2, grid={"learner.eta": [0.0, 1.0]})
    assert cli.main(["sweep", str(_write(tmp_path, doc)), "--out", str(tmp_path / "sw")]) == 0
    lines = (tmp_path / "sw" / "ranking.csv").read_text().splitlines()
    assert lines[0] == "rank,run,params,metric,score" and len(lines) == 3


# --- aggregation -------------------------------------------------------------------------

def test_fmt_round_trips():
    x = 0.1 + 0.2
    assert float(fmt(x)) == x and fmt(None) == "" and fmt(np.nan) == "" and fmt(3) == "3"


def test_constant_curve_has_zero_width_band():
    mean, lo, hi, n = bootstrap_band(np.full((5, 4), 2.5))
    assert np.all(mean == 2.5) and np.all(lo == 2.5) and np.all(hi == 2.5) and np.all(n == 5)


def test_band_shrinks_with_more_seeds():
    rng = np.random.default_rng(0)
    _, lo1, hi1, _ = bootstrap_band(rng.normal(size=(5, 1)))
    _, lo2, hi2, _ = bootstrap_band(rng.normal(size=(200, 1)))
    assert (hi2 - lo2)[0] < (hi1 - lo1)[0]


def test_band_coverage_is_near_nominal():
    rng = np.random.default_rng(1)
    hits = 0
    trials = 500
    for t in range(trials):
        _, lo, hi, _ = bootstrap_band(rng.normal(size=(30, 1)), n_resamples=400, rng=t)
        hits += lo[0] <= 0.0 <= hi[0]
    assert 0.72 <= hits / trials <= 0.88


def test_missing_values_are_counted():
    vals = np.array([[1.0, 2.0], [3.0, np.nan]])
    mean, lo, hi, n = bootstrap_band(vals)
    assert list(n) == [2, 1] and mean[1] == 2.0 and lo[0] <= mean[0] <= hi[0]


def test_timestep_binning_carries_forward():
    seeds = [{"timestep": np.array([10.0, 35.0]), "steps": np.array([10.0, 25.0])}]
    edges, mat = timestep_matrix(seeds, "steps", 10)
    assert list(edges) == [10, 20, 30, 40]
    assert list(mat[0]) == [10.0, 10.0, 10.0, 25.0]


def test_aggregate_cli_pools_and_rejects_mismatch(tmp_path):
    a = _doc(n_seeds=1, episodes=2)
    b = _doc(n_seeds=1, episodes=2, seed=6)
    cmd_run(validate_config(a), tmp_path / "a")
    cmd_run(validate_config(b), tmp_path / "b")
    out = tmp_path / "agg.csv"
    assert cli.main(["aggregate", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "metric,x,mean,lo80,hi80,n" and rows[1].endswith(",2")
    c = _doc(n_seeds=1, episodes=3)
    cmd_run(validate_config(c), tmp_path / "c")
    with pytest.raises(ConfigError, match="different"):
        cmd_aggregate([tmp_path / "a", tmp_path / "c"], out)
    with pytest.raises(ConfigError, match="2 seeds"):
        cmd_aggregate([tmp_path / "a"], out)
    assert cli.main(["aggregate", str(tmp_path / "a"), "--out", str(out)]) == 2


# --- verification ------------------------------------------------------------------------

def test_verify_small_passes(tmp_path):
    report = tmp_path / "r.json"
    assert cli.main(["verify", "--scale", "small", "--report", str(report)]) == 0
    data = json.loads(report.read_text())
    assert data["passed"] and {c["name"] for c in data["checks"]} == {
        "decomposition", "a_matrix", "is_unbiasedness", "gradients", "gate_closed"}


def test_verify_fails_on_broken_gradient(monkeypatch, capsys):
    real = opt.policy_log_grad
    monkeypatch.setattr(opt, "policy_log_grad", lambda *a: 1.01 * real(*a))
    assert cli.main(["verify", "--scale", "small"]) == 3
    data = json.loads(capsys.readouterr().out)
    assert data["failed"] == ["gradients"]
    grad = next(c for c in data["checks"] if c["name"] == "gradients")
    assert grad["failing"] == ["softmax_policy"]
