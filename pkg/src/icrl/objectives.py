"""Training objectives: AD, IC-DQN, IC-CQL and IC-IQL.

All losses are dense over the context window. Position ``t`` bootstraps from
position ``t + 1`` of the same row; ``td_mask`` drops positions without a
successor and padding.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

AD = "AD"
IC_DQN = "IC-DQN"
IC_CQL = "IC-CQL"
IC_IQL = "IC-IQL"
METHODS = (AD, IC_DQN, IC_CQL, IC_IQL)

REQUIRED_HEADS = {AD: ("logits",), IC_DQN: ("q1", "q2"), IC_CQL: ("q1", "q2"), IC_IQL: ("q1", "q2", "v")}


def normalize_method(name: str) -> str:
    for m in METHODS:
        if name.replace("_", "-").upper() == m.upper():
            return m
    raise ConfigError(f"unknown method {name!r}; expected one of {list(METHODS)}")


@dataclass(frozen=True)
class MethodConfig:
    method: str = AD
    gamma: float = 0.7
    cql_weight: float = 0.3
    iql_tau: float = 0.9
    label_smoothing: float = 0.3
    target_sync: str = "hard"
    target_sync_period: int = 1000
    polyak_rho: float = 0.995

    def __post_init__(self):
        object.__setattr__(self, "method", normalize_method(self.method))
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.cql_weight < 0:
            raise ConfigError("cql_weight must be non-negative")
        if not 0.0 < self.iql_tau < 1.0:
            raise ConfigError("iql_tau must lie in (0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.target_sync not in ("hard", "polyak"):
            raise ConfigError(f"target_sync must be 'hard' or 'polyak', got {self.target_sync!r}")
        if self.target_sync_period < 1:
            raise ConfigError("target_sync_period must be positive")
        if not 0.0 <= self.polyak_rho <= 1.0:
            raise ConfigError("polyak_rho must lie in [0, 1]")

    @property
    def heads(self) -> tuple:
        return REQUIRED_HEADS[self.method]

    @property
    def uses_targets(self) -> bool:
        return self.method != AD

    def to_json(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "MethodConfig":
        return replace(self, **changes)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def ad_loss(logits: Tensor, target_actions, label_smoothing: float = 0.0, mask=None) -> Tensor:
    return ad.cross_entropy(logits, target_actions, mask, label_smoothing)


def _next_values(values: np.ndarray) -> np.ndarray:
    """Shift ``[B, T]`` left by one; the last column is zero (masked out anyway)."""
    out = np.zeros_like(values)
    out[:, :-1] = values[:, 1:]
    return out


def td_targets(rewards, dones, next_values, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards)
    return rewards + gamma * (1.0 - np.asarray(dones)) * next_values


def dqn_loss(q1: Tensor, q2: Tensor, q1_target, q2_target, actions, rewards, dones, gamma, td_mask) -> Tensor:
    """Twin-Q TD loss with the clipped double-Q target."""
    q_min = np.minimum(_data(q1_target), _data(q2_target))
    a_star = q_min.argmax(-1)
    boot = np.take_along_axis(q_min, a_star[..., None], -1)[..., 0]
    y = td_targets(rewards, dones, _next_values(boot), gamma).astype(q1.dtype)
    a = np.asarray(actions)
    l1 = ad.mse(ad.take_along(q1, a), y, td_mask)
    l2 = ad.mse(ad.take_along(q2, a), y, td_mask)
    return ad.scale(ad.add(l1, l2), 0.5)


def cql_penalty(q: Tensor, data_actions, mask=None) -> Tensor:
    """Mean of ``logsumexp_a q - q(a_data)``; equals softmax cross-entropy on the data action."""
    gap = ad.sub(ad.log_sum_exp(q), ad.take_along(q, np.asarray(data_actions)))
    return ad.masked_mean(gap, mask)


def twin_cql_penalty(q1: Tensor, q2: Tensor, data_actions, mask=None) -> Tensor:
    return ad.scale(ad.add(cql_penalty(q1, data_actions, mask), cql_penalty(q2, data_actions, mask)), 0.5)


def expectile_weights(u: np.ndarray, tau: float) -> np.ndarray:
    return np.where(u < 0, 1.0 - tau, tau).astype(u.dtype)


def expectile_loss(u, tau: float, mask=None) -> Tensor:
    """Mean of ``|tau - 1[u < 0]| * u**2``."""
    u = u if isinstance(u, Tensor) else Tensor(u)
    w = expectile_weights(u.data, tau)
    return ad.masked_mean(ad.mul(ad.square(u), Tensor(w)), mask)


def iql_losses(
    q1, q2, q1_target, q2_target, v, actions, rewards, dones, gamma, tau, td_mask, v_mask=None, v_boot=None
):
    """Return ``(v_loss, q_loss)``.

    V regresses toward the min target-Q of the data action by expectile
    regression; the Q heads regress toward ``r + gamma * (1 - done) * V(t+1)``
    with V held constant. ``v_boot`` overrides the bootstrap values (by
    default the current V, detached).
    """
    a = np.asarray(actions)
    q_min = np.minimum(_data(q1_target), _data(q2_target))
    q_data = np.take_along_axis(q_min, a[..., None], -1)[..., 0].astype(v.dtype)
    v_mask = td_mask if v_mask is None else v_mask
    v_loss = expectile_loss(ad.sub(Tensor(q_data), v), tau, v_mask)
    boot = _data(v) if v_boot is None else np.asarray(v_boot)
    y = td_targets(rewards, dones, _next_values(boot), gamma).astype(q1.dtype)
    l1 = ad.mse(ad.take_along(q1, a), y, td_mask)
    l2 = ad.mse(ad.take_along(q2, a), y, td_mask)
    return v_loss, ad.scale(ad.add(l1, l2), 0.5)


def total_loss(cfg: MethodConfig, outputs: dict, batch, targets: dict | None = None) -> tuple[Tensor, dict]:
    """Method loss and its named scalar components.

    ``outputs`` holds online head tensors; ``targets`` the target-network
    ``q1``/``q2`` arrays (required by the RL methods) and, optionally, a
    detached ``v`` used as the IQL bootstrap.
    """
    missing = [h for h in cfg.heads if h not in outputs]
    if missing:
        raise ConfigError(f"{cfg.method} needs heads {missing} that the model does not provide")
    if cfg.uses_targets and (targets is None or not {"q1", "q2"} <= set(targets)):
        raise ConfigError(f"{cfg.method} needs target q1/q2 values")
    pad, td = batch.pad_mask, batch.td_mask
    comps: dict[str, float] = {}
    if cfg.method == AD:
        loss = ad_loss(outputs["logits"], batch.actions, cfg.label_smoothing, pad)
        comps["ad"] = loss.item()
        return loss, comps

    q1, q2 = outputs["q1"], outputs["q2"]
    comps["q_mean"] = float(np.mean((q1.data + q2.data) / 2)) if q1.data.size else 0.0
    if cfg.method == IC_IQL:
        v_loss, q_loss = iql_losses(
            q1, q2, targets["q1"], targets["q2"], outputs["v"], batch.actions, batch.rewards,
            batch.dones, cfg.gamma, cfg.iql_tau, td, v_mask=pad, v_boot=targets.get("v"),
        )
        loss = ad.add(v_loss, q_loss)
        comps["v_loss"], comps["q_loss"] = v_loss.item(), q_loss.item()
    else:
        loss = dqn_loss(q1, q2, targets["q1"], targets["q2"], batch.actions, batch.rewards, batch.dones, cfg.gamma, td)
        comps["td"] = loss.item()
    if cfg.method in (IC_CQL, IC_IQL) and cfg.cql_weight > 0:
        pen = twin_cql_penalty(q1, q2, batch.actions, pad)
        comps["cql_penalty"] = pen.item()
        loss = ad.add(loss, ad.scale(pen, cfg.cql_weight))
    elif cfg.method == IC_CQL:
        comps["cql_penalty"] = twin_cql_penalty(q1, q2, batch.actions, pad).item()
    return loss, comps
