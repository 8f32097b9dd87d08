"""scikit-learn style facade over training and in-context evaluation."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import no_grad
from .data import ContextBatch, Dataset
from .errors import UsageError
from .evaluation import EvalReport, ModelPolicy, evaluate_suite
from .model import ModelConfig
from .objectives import MethodConfig
from .training import TrainConfig, train


def _check_dataset(X) -> Dataset:
    if not isinstance(X, Dataset):
        raise UsageError(f"expected a Dataset, got {type(X).__name__}")
    if not X.histories:
        raise UsageError("dataset has no learning histories")
    return X


class InContextRLAgent(BaseEstimator):
    """Fit on a learning-history dataset; predict greedy next actions for context windows.

    >>> agent = InContextRLAgent(method="IC-CQL", epochs=1).fit(dataset)   # doctest: +SKIP
    >>> agent.score(dataset.test_tasks())                                  # doctest: +SKIP
    """

    def __init__(
        self,
        method: str = "AD",
        n_layers: int = 2,
        n_heads: int = 4,
        d_model: int = 64,
        seq_len: int = 120,
        dropout_attn: float = 0.0,
        dropout_embed: float = 0.0,
        dropout_resid: float = 0.0,
        gamma: float = 0.7,
        cql_weight: float = 0.3,
        iql_tau: float = 0.9,
        label_smoothing: float = 0.0,
        target_sync_period: int = 1000,
        batch_size: int = 64,
        lr: float = 3e-4,
        epochs: int = 1,
        steps_per_epoch: Optional[int] = None,
        temperature: float = 0.0,
        random_state: int = 0,
    ):
        self.method = method
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.seq_len = seq_len
        self.dropout_attn = dropout_attn
        self.dropout_embed = dropout_embed
        self.dropout_resid = dropout_resid
        self.gamma = gamma
        self.cql_weight = cql_weight
        self.iql_tau = iql_tau
        self.label_smoothing = label_smoothing
        self.target_sync_period = target_sync_period
        self.batch_size = batch_size
        self.lr = lr
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.temperature = temperature
        self.random_state = random_state

    def _train_config(self, n_states: int) -> TrainConfig:
        return TrainConfig(
            method=MethodConfig(
                method=self.method,
                gamma=self.gamma,
                cql_weight=self.cql_weight,
                iql_tau=self.iql_tau,
                label_smoothing=self.label_smoothing,
                target_sync_period=self.target_sync_period,
            ),
            model=ModelConfig(
                n_states=n_states,
                n_layers=self.n_layers,
                n_heads=self.n_heads,
                d_model=self.d_model,
                seq_len=self.seq_len,
                dropout_attn=self.dropout_attn,
                dropout_embed=self.dropout_embed,
                dropout_resid=self.dropout_resid,
            ),
            batch_size=self.batch_size,
            lr=self.lr,
            epochs=self.epochs,
            steps_per_epoch=self.steps_per_epoch,
            seed=self.random_state,
            eval_every=0,
        )

    def fit(self, X, y=None, out_dir=None):
        ds = _check_dataset(X)
        cfg = self._train_config(ds.grid_size**2)
        result = train(ds, cfg, out_dir)
        self.model_ = result.model
        self.method_ = cfg.method.method
        self.train_log_ = result.log
        self.n_features_in_ = cfg.model.n_states
        return self

    def _check_batch(self, X) -> ContextBatch:
        check_is_fitted(self, "model_")
        if not isinstance(X, ContextBatch):
            raise UsageError(f"expected a ContextBatch, got {type(X).__name__}")
        return X

    def transform(self, X: ContextBatch) -> np.ndarray:
        """Context embeddings ``[batch, seq, d_model]`` from the frozen backbone."""
        batch = self._check_batch(X)
        with no_grad():
            return self.model_.forward(batch).data.copy()

    def predict(self, X: ContextBatch) -> np.ndarray:
        """Greedy action at the last position of every row (``temperature`` only affects rollouts)."""
        batch = self._check_batch(X)
        return ModelPolicy(self.model_, self.method_).act(batch)

    def evaluate(self, tasks, seeds: Sequence[int] = (100,), n_episodes: int = 100, ctx_len=None) -> EvalReport:
        check_is_fitted(self, "model_")
        return evaluate_suite(
            self.model_, list(tasks), list(seeds), n_episodes, ctx_len, self.method_, temperature=self.temperature
        )

    def score(self, X, y=None, seeds: Sequence[int] = (100,)) -> float:
        """Mean NAUC over the tasks ``X`` (a list of EnvSpec or a Dataset's test tasks)."""
        tasks = X.test_tasks() if isinstance(X, Dataset) else list(X)
        if not tasks:
            raise UsageError("score needs at least one task")
        return self.evaluate(tasks, seeds).aggregates()["nauc"]["mean"]
