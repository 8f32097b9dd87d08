"""Causal transformer over learning-history tokens, with action and value heads.

Each token fuses the current observation with the previous action, reward and
done flag and the normalized episode step. Heads read the per-position
context embedding: ``logits`` for AD, twin ``q1``/``q2`` and ``v`` for the RL
objectives.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SENTINEL_ACTION, ContextBatch
from .envs import N_ACTIONS
from .errors import ConfigError, UsageError

HEAD_OUTPUTS = {"logits": N_ACTIONS, "q1": N_ACTIONS, "q2": N_ACTIONS, "v": 1}
N_SCALARS = 3  # prev_reward, prev_done, step / episode_len
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_states: int = 81
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    seq_len: int = 120
    dropout_attn: float = 0.0
    dropout_embed: float = 0.0
    dropout_resid: float = 0.0
    n_actions: int = N_ACTIONS
    heads: tuple = ("logits", "q1", "q2", "v")

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be at least 2")
        if min(self.n_states, self.n_layers, self.n_heads, self.d_model) < 1:
            raise ConfigError("model sizes must be positive")
        for name in ("dropout_attn", "dropout_embed", "dropout_resid"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        unknown = set(self.heads) - set(HEAD_OUTPUTS)
        if unknown:
            raise ConfigError(f"unknown heads {sorted(unknown)}")
        if self.n_actions != N_ACTIONS:
            raise ConfigError("the gridworlds have exactly 5 actions")

    def to_json(self) -> dict:
        out = asdict(self)
        out["heads"] = list(self.heads)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable parameters (target copies excluded)."""
    d = cfg.d_model
    embed = cfg.n_states * d + (cfg.n_actions + 1) * d + (2 * d + N_SCALARS) * d + d + cfg.seq_len * d
    block = 12 * d * d + 13 * d
    heads = sum(d * d + d + d * HEAD_OUTPUTS[h] + HEAD_OUTPUTS[h] for h in cfg.heads)
    return embed + cfg.n_layers * block + 2 * d + heads


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) redrawn outside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return out * std


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    shapes: dict[str, tuple] = {
        "embed.state": (cfg.n_states, d),
        "embed.action": (cfg.n_actions + 1, d),
        "embed.proj.w": (2 * d + N_SCALARS, d),
        "embed.proj.b": (d,),
        "embed.pos": (cfg.seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"block{i}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "qkv.w": (d, 3 * d),
                p + "qkv.b": (3 * d,),
                p + "proj.w": (d, d),
                p + "proj.b": (d,),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "fc1.w": (d, 4 * d),
                p + "fc1.b": (4 * d,),
                p + "fc2.w": (4 * d, d),
                p + "fc2.b": (d,),
            }
        )
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    for h in cfg.heads:
        n = HEAD_OUTPUTS[h]
        shapes.update(
            {f"head.{h}.w1": (d, d), f"head.{h}.b1": (d,), f"head.{h}.w2": (d, n), f"head.{h}.b2": (n,)}
        )
    out = {}
    # shapes is insertion ordered, so draws are reproducible
    for name, shape in shapes.items():
        if name.endswith(".g"):
            out[name] = np.ones(shape)
        elif name.endswith((".b", ".b1", ".b2")):
            out[name] = np.zeros(shape)
        else:
            out[name] = truncated_normal(rng, shape)
    return {k: v.astype(np.float32) for k, v in out.items()}


def _positions(pad_mask: np.ndarray) -> np.ndarray:
    """Position ids counted from the first real token of each row."""
    n_pad = pad_mask.shape[1] - pad_mask.sum(1)
    return np.maximum(np.arange(pad_mask.shape[1])[None, :] - n_pad[:, None], 0)


class ICRLModel:
    """Parameters, target copies and the forward pass.

    ``params`` maps names to trainable :class:`Tensor` leaves; ``target`` holds
    plain arrays for the backbone-plus-heads target copy.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, arrays: Optional[dict] = None):
        self.cfg = cfg
        arrays = arrays if arrays is not None else init_params(cfg, seed)
        dtype = ad.default_dtype()
        self.params = {k: Tensor(np.array(v, dtype=dtype), requires_grad=True, name=k) for k, v in arrays.items()}
        self.target = {k: p.data.copy() for k, p in self.params.items()}

    # --- parameter plumbing -------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        out.update({"target." + k: v for k, v in self.target.items()})
        return out

    @classmethod
    def from_state_dict(cls, cfg: ModelConfig, tensors: dict) -> "ICRLModel":
        online = {k: v for k, v in tensors.items() if not k.startswith("target.")}
        model = cls(cfg, arrays=online)
        for k in model.target:
            if "target." + k in tensors:
                model.target[k] = np.array(tensors["target." + k], dtype=model.params[k].dtype)
        return model

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def target_sync(self, mode: str = "hard", rho: float = 0.0) -> None:
        """hard: copy online weights; polyak: ``target <- rho*target + (1-rho)*online``."""
        if mode == "hard":
            rho = 0.0
        elif mode != "polyak":
            raise ConfigError(f"unknown target sync mode {mode!r}")
        if not 0.0 <= rho <= 1.0:
            raise ConfigError("polyak rho must lie in [0, 1]")
        for k, p in self.params.items():
            if rho == 0.0:
                self.target[k] = p.data.copy()
            elif rho < 1.0:
                self.target[k] = (rho * self.target[k] + (1.0 - rho) * p.data).astype(p.data.dtype)

    def _weights(self, use_target: bool) -> dict:
        if use_target:
            return {k: Tensor(v) for k, v in self.target.items()}
        return self.params

    # --- forward ----------------------------------------------------------------
    def tokenize(self, batch: ContextBatch, weights=None, rng=None) -> Tensor:
        cfg = self.cfg
        w = self.params if weights is None else weights
        B, T = batch.shape
        if T > cfg.seq_len:
            raise UsageError(f"sequence of {T} tokens exceeds seq_len={cfg.seq_len}")
        if np.any(np.asarray(batch.prev_action) > SENTINEL_ACTION):
            raise UsageError("prev_action outside the 6-row action table")
        state = ad.embedding(w["embed.state"], batch.obs)
        action = ad.embedding(w["embed.action"], batch.prev_action)
        dt = w["embed.proj.w"].dtype
        scalars = np.stack(
            [batch.prev_reward, batch.prev_done, np.asarray(batch.step) / float(batch.episode_len)], axis=-1
        ).astype(dt)
        x = ad.concat([state, action, Tensor(scalars)], axis=-1)
        x = ad.linear(x, w["embed.proj.w"], w["embed.proj.b"])
        pos = ad.embedding(w["embed.pos"], _positions(np.asarray(batch.pad_mask, dtype=bool)))
        x = ad.add(x, pos)
        return ad.dropout(x, 1.0 - cfg.dropout_embed, rng)

    def forward(self, batch: ContextBatch, rng=None, use_target: bool = False, last_only: bool = False) -> Tensor:
        """Context embeddings ``[B, T, d]`` (``[B, 1, d]`` with ``last_only``).

        Dropout is active only when ``rng`` is given.
        """
        cfg = self.cfg
        w = self._weights(use_target)
        pad = np.asarray(batch.pad_mask, dtype=bool)
        x = self.tokenize(batch, w, rng)
        B, T, d = x.shape
        for i in range(cfg.n_layers):
            p = f"block{i}."
            final = last_only and i == cfg.n_layers - 1
            h = ad.layer_norm(x, w[p + "ln1.g"], w[p + "ln1.b"])
            qkv = ad.linear(h, w[p + "qkv.w"], w[p + "qkv.b"])
            att = ad.causal_attention(qkv, cfg.n_heads, pad, 1.0 - cfg.dropout_attn, rng, last_only=final)
            att = ad.linear(att, w[p + "proj.w"], w[p + "proj.b"])
            if final:
                x = x[:, T - 1 :]
            x = ad.add(x, ad.dropout(att, 1.0 - cfg.dropout_resid, rng))
            h = ad.layer_norm(x, w[p + "ln2.g"], w[p + "ln2.b"])
            h = ad.gelu(ad.linear(h, w[p + "fc1.w"], w[p + "fc1.b"]))
            h = ad.linear(h, w[p + "fc2.w"], w[p + "fc2.b"])
            x = ad.add(x, ad.dropout(h, 1.0 - cfg.dropout_resid, rng))
        if last_only and cfg.n_layers == 0:
            x = x[:, T - 1 :]
        return ad.layer_norm(x, w["ln_f.g"], w["ln_f.b"])

    def heads(self, c: Tensor, names=None, use_target: bool = False) -> dict[str, Tensor]:
        w = self._weights(use_target)
        names = self.cfg.heads if names is None else names
        out = {}
        for h in names:
            if h not in self.cfg.heads:
                raise ConfigError(f"model has no {h!r} head (configured heads: {list(self.cfg.heads)})")
            z = ad.leaky_relu(ad.linear(c, w[f"head.{h}.w1"], w[f"head.{h}.b1"]))
            z = ad.linear(z, w[f"head.{h}.w2"], w[f"head.{h}.b2"])
            out[h] = z.reshape(z.shape[:-1]) if h == "v" else z
        return out

    def __call__(self, batch: ContextBatch, rng=None, names=None) -> dict[str, Tensor]:
        return self.heads(self.forward(batch, rng), names)

    def target_outputs(self, batch: ContextBatch, names=("q1", "q2")) -> dict[str, np.ndarray]:
        with ad.no_grad():
            c = self.forward(batch, use_target=True)
            return {k: v.data for k, v in self.heads(c, names, use_target=True).items()}


def act_greedy(q1, q2=None, position: int = -1) -> np.ndarray:
    """Argmax of mean(q1, q2) at ``position``; the lowest action index wins ties.

    Accepts ``[..., T, A]`` arrays, or ``[A]`` vectors, in which case
    ``position`` is ignored. AD passes its logits as ``q1`` alone.
    """
    q1 = np.asarray(q1.data if isinstance(q1, Tensor) else q1)
    q = q1 if q2 is None else (q1 + np.asarray(q2.data if isinstance(q2, Tensor) else q2)) / 2
    if q.ndim >= 2:
        q = q[..., position, :]
    return np.argmax(q, axis=-1)
