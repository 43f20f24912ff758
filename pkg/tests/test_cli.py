import csv
import json

import numpy as np
import pytest

from hybriddyn import cli
from hybriddyn.data import read_dataset
from hybriddyn.errors import FilterUnderflow, ParseError


def _run(capsys, *argv):
    code = cli.run([str(a) for a in argv])
    return code, capsys.readouterr().err


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def ball_data(tmp_path, capsys):
    path = tmp_path / "ball.jsonl"
    code, _ = _run(capsys, "simulate", "--env", "bouncing_ball", "--n", 6, "--t", 60,
                   "--out", path, "--seed", 3)
    assert code == 0
    return path


def test_simulate_shapes(tmp_path, capsys):
    out = tmp_path / "d.jsonl"
    code, _ = _run(capsys, "simulate", "--env", "pendulum_polar", "--policy", "random",
                   "--n", 25, "--t", 250, "--out", out, "--seed", 7)
    assert code == 0
    data = read_dataset(out)
    assert len(data) == 25 and all(t.x.shape == (250, 2) and t.u.shape == (250, 1) for t in data)


def test_same_seed_same_files(tmp_path, capsys, ball_data):
    outs = []
    for name in ("a", "b"):
        model = tmp_path / f"{name}.json"
        code, _ = _run(capsys, "sysid", "--data", ball_data, "--k", 2, "--iters", 5,
                       "--out", model, "--seed", 1)
        assert code == 0
        outs.append(model.read_bytes())
    assert outs[0] == outs[1]
    again = tmp_path / "again.jsonl"
    _run(capsys, "simulate", "--env", "bouncing_ball", "--n", 6, "--t", 60, "--out", again,
         "--seed", 3)
    assert again.read_bytes() == ball_data.read_bytes()


def test_sysid_then_forecast(tmp_path, capsys, ball_data):
    model, nmse = tmp_path / "m.json", tmp_path / "nmse.csv"
    assert _run(capsys, "sysid", "--data", ball_data, "--k", 2, "--iters", 10, "--out", model)[0] == 0
    diag = _rows(str(model) + ".diagnostics.csv")
    assert list(diag[0]) == ["iter", "log_posterior", "loglik", "dQ", "gamma_entropy", "seconds"]
    assert [int(r["iter"]) for r in diag] == list(range(len(diag)))
    fitted, hyper = cli.read_model(model)
    assert fitted.K == 2 and hyper is not None
    assert json.loads(model.read_text())["parameter_count"] > 0
    code, _ = _run(capsys, "forecast", "--model", model, "--data", ball_data, "--train", ball_data,
                   "--horizons", "1,20", "--out", nmse)
    assert code == 0
    rows = _rows(nmse)
    assert [(r["model"], r["horizon"]) for r in rows] == [
        ("rarhmm", "1"), ("rarhmm", "20"), ("affine", "1"), ("affine", "20")]
    assert all(float(r["mean"]) >= 0 for r in rows)


def test_clone_fits_controller(tmp_path, capsys):
    data, model = tmp_path / "demo.jsonl", tmp_path / "policy.json"
    _run(capsys, "simulate", "--env", "pendulum_polar", "--policy", "expert", "--init", "hanging",
         "--n", 3, "--t", 80, "--out", data)
    assert _run(capsys, "clone", "--data", data, "--k", 2, "--iters", 3, "--degree", 2,
                "--out", model)[0] == 0
    m, _ = cli.read_model(model)
    assert m.closed_loop and m.Kc.shape == (2, 1, 6)
    rolled = tmp_path / "rolled.jsonl"
    assert _run(capsys, "simulate", "--env", "pendulum_polar", "--policy", model, "--n", 2,
                "--t", 20, "--out", rolled)[0] == 0


def test_eval_split_protocol(tmp_path, capsys, ball_data):
    out = tmp_path / "eval.csv"
    code, _ = _run(capsys, "eval", "--data", ball_data, "--k", 2, "--iters", 3, "--splits", 2,
                   "--horizons", "1,5", "--out", out)
    assert code == 0
    rows = _rows(out)
    assert len(rows) == 4 and all(r["splits"] == "2" for r in rows)


def test_rl_writes_learning_curve(tmp_path, capsys):
    data, model, curve = tmp_path / "d.jsonl", tmp_path / "m.json", tmp_path / "curve.csv"
    _run(capsys, "simulate", "--env", "pendulum_polar", "--n", 3, "--t", 100, "--dt", 0.02,
         "--out", data)
    _run(capsys, "sysid", "--data", data, "--k", 2, "--iters", 3, "--out", model)
    code, err = _run(capsys, "rl", "--env", "pendulum_polar", "--dt", 0.02, "--model", model,
                     "--iters", 2, "--samples", 300, "--eval-rollouts", 1, "--value-degree", 2,
                     "--policy-degree", 2, "--out", curve, "--policy-out", tmp_path / "p.json")
    assert code == 0, err
    rows = _rows(curve)
    assert [r["iter"] for r in rows] == ["0", "1"]
    for key in ("mean_reward", "std_reward", "eta", "dual", "kl_empirical", "ess"):
        assert key in rows[0]
    assert "value" in json.loads((tmp_path / "p.json").read_text())


def test_usage_errors_exit_one(tmp_path, capsys):
    code, err = _run(capsys, "simulate", "--env", "pendulum_polar", "--bogus", 1, "--out", "x")
    assert code == 1 and json.loads(err)["error"] == "UsageError"
    assert _run(capsys, "launch")[0] == 1
    assert _run(capsys, "simulate", "--env", "acrobot", "--out", tmp_path / "x")[0] == 1
    code, err = _run(capsys, "sysid", "--data", tmp_path / "missing.jsonl", "--out", tmp_path / "m")
    assert code == 1 and json.loads(err)["error"] == "IOError"


def test_empty_dataset(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code, err = _run(capsys, "sysid", "--data", empty, "--out", tmp_path / "m.json")
    assert code == 1
    assert json.loads(err) == {"error": "ParseError", "message": "empty dataset"}


def test_mismatched_record_names_trajectory(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"id": "traj-7", "env": "", "dt": 0.1, "weight": 1.0,
                               "x": [[0.0], [1.0]], "u": [[0.0]]}) + "\n")
    with pytest.raises(ParseError, match="traj-7"):
        read_dataset(bad)


def test_numerical_failure_exits_two(tmp_path, capsys, monkeypatch, ball_data):
    def boom(args):
        raise FilterUnderflow("zero likelihood")
    monkeypatch.setitem(cli.COMMANDS, "sysid", boom)
    code, err = _run(capsys, "sysid", "--data", ball_data, "--out", tmp_path / "m.json")
    assert code == 2 and json.loads(err)["error"] == "FilterUnderflow"


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# experiment manifest\nem.sgd.batch = 64\nem.k = 4\nseed = 9\n")
    args = cli.parse_args(["sysid", "--data", "d", "--out", "o", "--config", str(cfg)])
    assert (args.sgd_batch, args.k, args.seed) == (64, 4, 9)
    args = cli.parse_args(["sysid", "--data", "d", "--out", "o", "--config", str(cfg), "--k", "3"])
    assert (args.sgd_batch, args.k) == (64, 3)
    assert cli.parse_args(["sysid", "--data", "d", "--out", "o"]).sgd_batch == 256


def test_config_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("em.bogus = 1\n")
    code, err = _run(capsys, "sysid", "--data", "d", "--out", "o", "--config", cfg)
    assert code == 1 and "unknown key" in json.loads(err)["message"]


def test_threads_must_be_positive(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("HYBRIDDYN_THREADS", "0")
    assert _run(capsys, "simulate", "--env", "bouncing_ball", "--out", tmp_path / "x")[0] == 1


def test_model_document_round_trip(tmp_path, rng):
    from conftest import random_model
    m = random_model(rng, K=3, degree=2)
    path = tmp_path / "m.json"
    cli.write_model(path, m)
    back, hyper = cli.read_model(path)
    assert hyper is None
    cli.write_model(tmp_path / "m2.json", back)
    assert path.read_bytes() == (tmp_path / "m2.json").read_bytes()
    doc = json.loads(path.read_text())
    doc["format_version"] = -1
    path.write_text(json.dumps(doc))
    with pytest.raises(ParseError):
        cli.read_model(path)


def test_metrics_full_precision(tmp_path):
    path = tmp_path / "m.csv"
    cli.emit_metrics([{"iter": 0, "v": 0.1 + 0.2}, {"iter": 1, "v": np.float64(1 / 3)}], path)
    rows = _rows(path)
    assert float(rows[0]["v"]) == 0.1 + 0.2 and float(rows[1]["v"]) == 1 / 3
