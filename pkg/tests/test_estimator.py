import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from helpers import tiny_dataset
from icrl import InContextRLAgent, data, envs
from icrl.errors import ConfigError, UsageError

SMALL = dict(n_layers=1, n_heads=2, d_model=16, seq_len=12, batch_size=4, epochs=1, steps_per_epoch=3)


@pytest.fixture(scope="module")
def ds():
    return tiny_dataset()


def test_get_set_params_and_clone():
    agent = InContextRLAgent(method="IC-CQL", **SMALL)
    params = agent.get_params()
    assert params["method"] == "IC-CQL" and params["d_model"] == 16
    other = clone(agent).set_params(gamma=0.9)
    assert other.gamma == 0.9 and agent.gamma == 0.7


@pytest.mark.parametrize("method", ["AD", "IC-DQN", "IC-CQL", "IC-IQL"])
def test_fit_predict_transform(ds, method):
    agent = InContextRLAgent(method=method, **SMALL).fit(ds)
    assert agent.n_features_in_ == 81
    batch = data.sample_context_batch(ds, 5, 12, seed=0)
    actions = agent.predict(batch)
    assert actions.shape == (5,) and np.all((actions >= 0) & (actions < 5))
    emb = agent.transform(batch)
    assert emb.shape == (5, 12, 16)
    assert np.array_equal(agent.predict(batch), actions)


def test_fit_is_deterministic(ds):
    batch = data.sample_context_batch(ds, 3, 12, seed=1)
    a = InContextRLAgent(**SMALL, random_state=3).fit(ds).transform(batch)
    b = InContextRLAgent(**SMALL, random_state=3).fit(ds).transform(batch)
    assert np.array_equal(a, b)


def test_score_and_evaluate(ds):
    agent = InContextRLAgent(**SMALL).fit(ds)
    tasks = [envs.dark_room(9, (0, 0)), envs.dark_room(9, (4, 0))]
    rep = agent.evaluate(tasks, seeds=[100], n_episodes=3)
    assert len(rep.curves) == 2
    s = agent.score(tasks)
    assert 0.0 <= s <= 1.0


def test_validation(ds):
    with pytest.raises(NotFittedError):
        InContextRLAgent().predict(None)
    with pytest.raises(UsageError):
        InContextRLAgent(**SMALL).fit(np.zeros((3, 3)))
    agent = InContextRLAgent(**SMALL).fit(ds)
    with pytest.raises(UsageError):
        agent.predict(np.zeros((2, 12)))
    with pytest.raises(ConfigError):
        InContextRLAgent(method="PPO", **SMALL).fit(ds)
    with pytest.raises(UsageError):
        InContextRLAgent(**SMALL).fit(data.make_dataset("DR9-0-1", []))
