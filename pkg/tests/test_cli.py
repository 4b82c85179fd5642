import json

import numpy as np
import pytest

from icrl import cli, datagen
from icrl.evaluation import read_curve_csv

SMALL_DATA = ["--n-maps", "3", "--size-min", "3", "--size-max", "3", "--episodes-per-map", "20",
              "--n-sets", "6", "--slice-len", "512"]
SMALL_MODEL = ["--n-layers", "1", "--n-heads", "1", "--d-model", "8", "--d-ff", "16", "--max-context", "512",
               "--batch-slices", "2"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["datagen", "--out", str(d / "ds"), *SMALL_DATA]) == 0
    assert cli.main(["train", "--data", str(d / "ds"), "--out", str(d / "run"), *SMALL_MODEL,
                     "--total-batches", "4", "--ckpt-every", "2"]) == 0
    return d


def _config(path):
    return dict(line.split(" = ", 1) for line in path.read_text().splitlines())


def test_datagen_outputs(run_dir):
    ds = datagen.Dataset.load(run_dir / "ds")
    assert ds.manifest["map_count"] == 3 and ds.slice_len == 512
    cfg = _config(run_dir / "ds" / "config.txt")
    assert cfg["n_maps"] == "3" and cfg["profile"] == "paper"


def test_train_outputs(run_dir):
    run = run_dir / "run"
    assert {p.name for p in run.iterdir()} >= {"model.ckpt", "metrics.csv", "config.txt", "maps.jsonl",
                                               "ckpt_000002.ckpt", "ckpt_000004.ckpt"}
    rows = (run / "metrics.csv").read_text().splitlines()
    assert rows[0] == "batch,loss,mean_abs_target,lr,alpha" and len(rows) == 5


def test_resolved_config_reproduces_dataset(run_dir, tmp_path):
    cfg = run_dir / "ds" / "config.txt"
    assert cli.main(["datagen", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    a = (run_dir / "ds" / "tokens.u16").read_bytes()
    assert a == (tmp_path / "again" / "tokens.u16").read_bytes()


def test_precedence(tmp_path, monkeypatch):
    # flag > config file > profile > built-in default
    conf = tmp_path / "c.txt"
    conf.write_text("# settings\nn_maps = 2\nprofile = desk\nslice-len = 512\n")
    base = ["datagen", "--config", str(conf), "--episodes-per-map", "20", "--n-sets", "3"]
    assert cli.main([*base, "--out", str(tmp_path / "a")]) == 0
    got = _config(tmp_path / "a" / "config.txt")
    assert (got["n_maps"], got["profile"], got["hole_prob"], got["tier"]) == ("2", "desk", "0.4", "mid")
    assert cli.main([*base, "--n-maps", "1", "--profile", "paper", "--out", str(tmp_path / "b")]) == 0
    got = _config(tmp_path / "b" / "config.txt")
    assert (got["n_maps"], got["profile"], got["hole_prob"]) == ("1", "paper", "0.2")


def test_workers_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("ICRL_WORKERS", "3")
    args = ["datagen", *SMALL_DATA, "--n-maps", "1"]
    assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
    assert _config(tmp_path / "a" / "config.txt")["workers"] == "3"
    assert cli.main([*args, "--workers", "1", "--out", str(tmp_path / "b")]) == 0
    assert _config(tmp_path / "b" / "config.txt")["workers"] == "1"
    assert (tmp_path / "a" / "tokens.u16").read_bytes() == (tmp_path / "b" / "tokens.u16").read_bytes()


@pytest.mark.parametrize("argv, needle", [
    (["train", "--data", "x", "--out", "y", "--learning-rate", "3"], "--learning-rate"),
    (["datagen", "--out", "y", "--tier", "best"], "tier"),
    (["datagen"], "--out"),
    (["bogus"], "bogus"),
    (["experiment"], "run"),
])
def test_usage_errors_exit_1(argv, needle, capsys):
    assert cli.main(argv) == 1
    assert needle in capsys.readouterr().err


def test_bad_config_key_exit_1(tmp_path, capsys):
    conf = tmp_path / "c.txt"
    conf.write_text("n_mapz = 3\n")
    assert cli.main(["datagen", "--config", str(conf), "--out", str(tmp_path / "o")]) == 1
    assert "n_mapz" in capsys.readouterr().err
    conf.write_text("n_maps = three\n")
    assert cli.main(["datagen", "--config", str(conf), "--out", str(tmp_path / "o")]) == 1


def test_missing_checkpoint_exit_1(tmp_path):
    assert cli.main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "o")]) == 1


def test_runtime_failure_exit_2(run_dir, tmp_path, monkeypatch):
    import icrl.trainer

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(icrl.trainer, "train", boom)
    assert cli.main(["train", "--data", str(run_dir / "ds"), "--out", str(tmp_path / "r"), *SMALL_MODEL]) == 2


def test_eval_and_report(run_dir, tmp_path, capsys):
    out = tmp_path / "ev"
    argv = ["eval", "--ckpt", str(run_dir / "run" / "model.ckpt"), "--train-data", str(run_dir / "ds"),
            "--out", str(out), "--n-maps", "2", "--episodes", "4", "--size-min", "3", "--size-max", "3",
            "--warmup-episodes", "2"]
    assert cli.main(argv) == 0
    rep = json.loads((out / "report.json").read_text())
    label = next(iter(rep["models"]))
    curve = read_curve_csv(out / f"curve_{label}.csv")
    assert len(curve["mean_reward"]) == 4 and (curve["n"] == 2).all()
    before = (out / "curves.svg").read_text()
    (out / "curves.svg").unlink()
    assert cli.main(["report", "--dir", str(out)]) == 0
    assert (out / "curves.svg").read_text().count("<polyline") == before.count("<polyline")
    assert cli.main(["report", "--dir", str(tmp_path)]) == 1


def test_experiment_run(run_dir, tmp_path):
    out = tmp_path / "ns"
    argv = ["experiment", "run", "--kind", "nonstat", "--ckpt", str(run_dir / "run" / "model.ckpt"),
            "--profile", "desk", "--seed", "5", "--out", str(out), "--n-maps", "2", "--episodes", "8"]
    # switch_at 30 does not fit inside 8 episodes
    assert cli.main(argv) == 1
    argv = ["experiment", "run", "--kind", "unseen", "--ckpt", str(run_dir / "run" / "model.ckpt"),
            "--profile", "desk", "--seed", "5", "--out", str(out), "--n-maps", "2", "--trials", "1",
            "--episodes", "3", "--train-data", str(run_dir / "ds")]
    assert cli.main(argv) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["spec"]["seed"] == 5 and rep["spec"]["size_range"] == [3, 4]
    assert _config(out / "config.txt")["kind"] == "unseen"
    assert cli.main(["experiment", "run", "--kind", "ood", "--out", str(out)]) == 1  # needs --ckpt


def test_alpha_sweep_labels(run_dir, tmp_path):
    ck = str(run_dir / "run" / "model.ckpt")
    models = cli._load_models(f"{ck},{ck}")
    assert len(models) == 2 and all(k.startswith("alpha=0.1") for k in models)
    q = [m.decoder().extend(np.array([1, 3, 2, 4])) for m in models.values()]
    np.testing.assert_array_equal(q[0], q[1])
