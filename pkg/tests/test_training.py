import json
import math

import numpy as np
import pytest

from helpers import tiny_dataset
from icrl import autodiff as ad
from icrl import objectives as obj
from icrl import training
from icrl.errors import ConfigError, NumericalError, UsageError
from icrl.model import ModelConfig
from icrl.training import TrainConfig


def _cfg(method=obj.AD, **kw):
    base = dict(
        method=obj.MethodConfig(method, target_sync_period=5),
        model=ModelConfig(n_states=81, n_layers=1, n_heads=2, d_model=16, seq_len=16),
        batch_size=8,
        epochs=2,
        steps_per_epoch=6,
        eval_every=0,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def ds():
    from icrl import envs

    d = tiny_dataset(n_episodes=30)
    d.manifest.test_tasks = [envs.dark_room(9, (0, 0)).to_json(), envs.dark_room(9, (8, 8)).to_json()]
    return d


def test_steps_per_epoch_formula(ds):
    cfg = _cfg(steps_per_epoch=None, batch_size=4)
    assert training.steps_per_epoch(ds, cfg) == math.ceil(ds.n_transitions / (4 * 16))


def test_ad_cross_entropy_falls_below_uniform(ds):
    res = training.train(ds, _cfg(epochs=1, steps_per_epoch=40, lr=3e-3))
    losses = [r["loss"] for r in res.log if r["type"] == "step"]
    assert np.mean(losses[-5:]) < math.log(5)


def test_same_seed_same_checkpoints(ds, tmp_path):
    a = training.train(ds, _cfg(obj.IC_CQL), tmp_path / "a")
    b = training.train(ds, _cfg(obj.IC_CQL), tmp_path / "b")
    c = training.train(ds, _cfg(obj.IC_CQL, seed=1), tmp_path / "c")
    for pa, pb in zip(a.checkpoints, b.checkpoints):
        assert open(pa, "rb").read() == open(pb, "rb").read()
    assert open(a.checkpoints[-1], "rb").read() != open(c.checkpoints[-1], "rb").read()
    assert (tmp_path / "a" / "train_log.jsonl").read_text() == (tmp_path / "b" / "train_log.jsonl").read_text()


def test_log_structure_and_cql_component(ds, tmp_path):
    res = training.train(ds, _cfg(obj.IC_CQL), tmp_path)
    steps = [r for r in res.log if r["type"] == "step"]
    assert [r["step"] for r in steps] == list(range(1, 13))
    epochs = [r for r in res.log if r["type"] == "epoch"]
    assert [r["step"] for r in epochs] == [6, 12]
    assert all(r["components"]["cql_penalty"] >= 0 for r in steps)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in lines] == json.loads(json.dumps(res.log))
    assert len(res.checkpoints) == 2


def test_dqn_q_values_stay_bounded(ds):
    # gamma 0.7 with rewards in {0, 1} bounds values by 1/(1 - 0.7)
    res = training.train(ds, _cfg(obj.IC_DQN, epochs=1, steps_per_epoch=30, lr=1e-3))
    q = [r["components"]["q_mean"] for r in res.log if r["type"] == "step"]
    assert max(abs(v) for v in q) <= 1 / (1 - 0.7) + 0.5


@pytest.mark.parametrize("method", [obj.IC_IQL, obj.IC_DQN])
def test_rl_methods_train(ds, method):
    res = training.train(ds, _cfg(method, epochs=1))
    assert all(math.isfinite(r["loss"]) for r in res.log if r["type"] == "step")
    assert set(res.model.cfg.heads) == set(obj.REQUIRED_HEADS[method])


def test_checkpoint_reloads(ds, tmp_path):
    res = training.train(ds, _cfg(obj.IC_DQN, epochs=1), tmp_path)
    model, header = training.load_model(res.checkpoints[0])
    assert header["dataset"] == ds.name and header["epoch"] == 0
    assert all(np.array_equal(model.params[k].data, p.data) for k, p in res.model.params.items())


def test_nan_loss_aborts_with_snapshot(ds, tmp_path, monkeypatch):
    real = training.total_loss

    def broken(*a, **k):
        loss, comps = real(*a, **k)
        return ad.scale(loss, float("nan")), comps

    monkeypatch.setattr(training, "total_loss", broken)
    with pytest.raises(NumericalError):
        training.train(ds, _cfg(), tmp_path)
    snap = json.loads((tmp_path / "nan_snapshot.json").read_text())
    assert snap["step"] == 0 and len(snap["history_index"]) == 8


def test_n_states_mismatch(ds):
    with pytest.raises(ConfigError):
        training.train(ds, _cfg(model=ModelConfig(n_states=169, n_layers=1, n_heads=2, d_model=16, seq_len=16)))


def test_eval_epochs_recorded(ds):
    res = training.train(ds, _cfg(eval_every=1, eval_episodes=3, epochs=2, steps_per_epoch=2))
    assert [e for e, _ in res.epoch_nauc] == [0, 1]
    assert all(0 <= n <= 1 for _, n in res.epoch_nauc)
    assert res.best_epoch in (0, 1)
    assert all(r["nauc"] == n for r, (_, n) in zip([r for r in res.log if "nauc" in r], res.epoch_nauc))


@pytest.mark.parametrize(
    "values,best", [([0.1, 0.4, 0.3], 1), ([0.4, 0.4], 0), ([0.7], 0), ([[0.2, 0.4], [0.5, 0.0], [0.3, 0.3]], 0)]
)
def test_select_best_epoch(values, best):
    assert training.select_best_epoch(values) == best


def test_select_best_epoch_empty():
    with pytest.raises(UsageError):
        training.select_best_epoch([])


def test_grid_sizes():
    from icrl import config

    assert len(training.grid_points({})) == 1
    assert len(training.grid_points({"gamma": [0.7, 0.8, 0.9], "cql_weight": [0.1, 0.3, 0.5]})) == 9
    assert len(training.grid_points(config.hp_grid(obj.IC_CQL, "DarkRoom"))) == 9
    assert len(training.grid_points(config.hp_grid(obj.IC_IQL, "DarkRoom", best_cql_weight=0.3))) == 18
    with pytest.raises(ConfigError):
        training.grid_points({"gamma": []})


def test_hp_search_grid_of_one_and_leaderboard(ds, tmp_path):
    base = _cfg(obj.IC_CQL, epochs=1, steps_per_epoch=2, eval_every=1, eval_episodes=2, eval_seeds=(50,))
    res = training.hp_search(ds, {"gamma": [0.7]}, base, tuning_seeds=[0], eval_seeds=[100], out_dir=tmp_path)
    assert res.best_point == {"gamma": 0.7} and res.best_config.method.gamma == 0.7
    assert len(res.leaderboard) == 1
    lines = (tmp_path / "leaderboard.csv").read_text().splitlines()
    assert lines[0] == "gamma,nauc_mean,nauc_std,best_epoch" and len(lines) == 2
    res2 = training.hp_search(ds, {"gamma": [0.7, 0.9], "cql_weight": [0.1]}, base, [0, 1], [100])
    assert len(res2.leaderboard) == 2
    means = [r["nauc_mean"] for r in res2.leaderboard]
    assert means == sorted(means, reverse=True)


def test_hp_search_seed_overlap(ds):
    with pytest.raises(UsageError, match="overlap"):
        training.hp_search(ds, {}, _cfg(eval_every=1), tuning_seeds=[0, 1], eval_seeds=[1, 2])
    with pytest.raises(UsageError):
        training.hp_search(ds, {}, _cfg(eval_every=1, eval_seeds=(100,)), tuning_seeds=[0], eval_seeds=[100])


def test_config_round_trip():
    cfg = _cfg(obj.IC_IQL)
    assert TrainConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
    with pytest.raises(ConfigError):
        _cfg(epochs=0)
