import json

import pytest

from icrl import data
from icrl.cli import main

TINY = {
    "train": {
        "n_layers": 1, "n_heads": 2, "d_model": 16, "seq_len": 16, "batch_size": 4,
        "epochs": 2, "steps_per_epoch": 2, "eval_every": 0, "target_sync_period": 2,
    },
    "eval": {"episodes": 3, "tracked": [1, 3]},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--name", "DR9-4-1", "--seed", "1", "--episodes", "9", "--out", str(d / "data")]) == 0
    (d / "cfg.json").write_text(json.dumps(TINY))
    return d


def test_generate_manifest_round_trip(workdir):
    path = workdir / "data" / "DR9-4-1.icrl"
    ds = data.read_dataset(path)
    n = data.parse_name(ds.manifest.name)
    assert (n.env, n.grid_size, n.n_targets, n.histories_per_target, n.expertise) == ("DR", 9, 4, 1, "complete")
    run = json.loads((workdir / "data" / "DR9-4-1.icrl.run.json").read_text())
    assert run["command"] == "generate" and run["seeds"] == [1]
    assert set(run["versions"]) >= {"icrl", "python", "numpy"}


def test_generate_is_byte_identical(workdir, tmp_path):
    assert main(["generate", "--name", "DR9-4-1", "--seed", "1", "--episodes", "9", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "DR9-4-1.icrl").read_bytes() == (workdir / "data" / "DR9-4-1.icrl").read_bytes()


def test_split_and_reorder(workdir):
    src = str(workdir / "data" / "DR9-4-1.icrl")
    assert main(["split", "--dataset", src, "--level", "late", "--out", str(workdir / "data")]) == 0
    late = data.read_dataset(workdir / "data" / "DR9-4-1-late.icrl")
    assert late.manifest.expertise == "late"
    assert main(["reorder", "--dataset", src, "--mode", "sorted_random", "--out", str(workdir / "data")]) == 0
    ro = data.read_dataset(workdir / "data" / "DR9-4-1-sorted_random.icrl")
    assert ro.manifest.ordering == "sorted_random"
    run = json.loads((workdir / "data" / "DR9-4-1-sorted_random.icrl.run.json").read_text())
    assert src in run["inputs"]


@pytest.mark.parametrize("method", ["AD", "ic-dqn", "ic-cql", "ic-iql"])
def test_train_eval_report(workdir, method, capsys):
    src = str(workdir / "data" / "DR9-4-1.icrl")
    out = workdir / f"run_{method}"
    code = main(["train", "--method", method, "--dataset", src, "--config", str(workdir / "cfg.json"), "--seed", "0", "--out", str(out)])
    assert code == 0
    assert (out / "epoch_001.ickp").exists() and (out / "train_log.jsonl").exists()
    run = json.loads((out / "run.json").read_text())
    assert len(run["config_hash"]) == 64 and run["config"]["train"]["model"]["d_model"] == 16
    ev_dir = workdir / "eval"
    code = main(["eval", "--checkpoint", str(out / "epoch_001.ickp"), "--dataset", src, "--seeds", "100,101",
                 "--episodes", "3", "--max-tasks", "2", "--out", str(ev_dir)])
    assert code == 0
    reports = sorted(ev_dir.glob("*.json"))
    reports = [p for p in reports if not p.name.endswith(".run.json")]
    assert reports
    capsys.readouterr()
    assert main(["report", "--in", *map(str, reports), "--format", "csv"]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0] == "dataset,method,metric,mean,std,ci_lo,ci_hi"


def test_hpsearch(workdir):
    src = str(workdir / "data" / "DR9-4-1.icrl")
    cfg = json.loads(json.dumps(TINY))
    cfg["train"].update(eval_every=1, epochs=1, steps_per_epoch=1, eval_max_tasks=1)
    (workdir / "hp.json").write_text(json.dumps(cfg))
    (workdir / "grid.json").write_text(json.dumps({"gamma": [0.7, 0.9]}))
    out = workdir / "hp"
    code = main(["hpsearch", "--dataset", src, "--method", "ic-cql", "--config", str(workdir / "hp.json"),
                 "--grid", str(workdir / "grid.json"), "--tuning-seeds", "0", "--eval-seeds", "100", "--out", str(out)])
    assert code == 0
    assert len((out / "leaderboard.csv").read_text().splitlines()) == 3
    assert main(["hpsearch", "--dataset", src, "--method", "ic-cql", "--tuning-seeds", "0,1",
                 "--eval-seeds", "1", "--out", str(out)]) == 2


def test_exit_codes(workdir, tmp_path, capsys):
    assert main(["frobnicate"]) == 2
    assert main(["train", "--dataset", "x.icrl", "--bogus", "--out", "o"]) == 2
    assert main(["train", "--dataset", str(tmp_path / "missing.icrl"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.icrl"
    bad.write_bytes(b"NOTADATASET")
    assert main(["split", "--dataset", str(bad), "--level", "early", "--out", str(tmp_path)]) == 3
    (tmp_path / "typo.json").write_text(json.dumps({"train": {"gama": 0.5}}))
    src = str(workdir / "data" / "DR9-4-1.icrl")
    assert main(["train", "--dataset", src, "--config", str(tmp_path / "typo.json"), "--out", str(tmp_path)]) == 2
    assert "did you mean 'gamma'" in capsys.readouterr().err
    (tmp_path / "k2d.json").write_text(json.dumps({"env": {"kind": "K2D"}}))
    assert main(["train", "--dataset", src, "--config", str(tmp_path / "k2d.json"), "--out", str(tmp_path)]) == 2


def test_numerical_failure_exit_code(workdir, tmp_path, monkeypatch):
    from icrl import training
    from icrl.autodiff import scale

    real = training.total_loss
    monkeypatch.setattr(training, "total_loss", lambda *a, **k: (lambda lc: (scale(lc[0], float("nan")), lc[1]))(real(*a, **k)))
    src = str(workdir / "data" / "DR9-4-1.icrl")
    assert main(["train", "--dataset", src, "--config", str(workdir / "cfg.json"), "--out", str(tmp_path)]) == 4
    assert (tmp_path / "nan_snapshot.json").exists()


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS gradcheck attention" in out
