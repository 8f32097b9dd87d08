"""Pipeline configuration: JSON schema, per-environment defaults and validation.

A config is a JSON object with optional blocks ``env``, ``data``, ``train``,
``eval`` and ``paths``. Missing values are filled from the tuned defaults for
the environment; unknown keys are rejected with a spelling suggestion.
"""
from __future__ import annotations

import difflib
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from . import envs
from .data import ENV_CODES, EXPERTISE, KIND_CODES, ORDERINGS
from .errors import ConfigError
from .model import ModelConfig
from .objectives import AD, IC_CQL, IC_DQN, IC_IQL, MethodConfig, normalize_method
from .training import TrainConfig

# per-environment values; keys are "{code}{grid_size}"
SEQ_LEN = {"DR9": 120, "DR19": 400, "K2D9": 200, "K2D13": 400, "Janus19": 400}
EPOCHS = {"DR9": 30, "DR19": 10, "K2D9": 10, "K2D13": 6, "Janus19": 10}
# attention, embedding, residual dropout, label smoothing
AD_TUNED = {
    "DR9": (0.5, 0.1, 0.1, 0.3),
    "DR19": (0.5, 0.5, 0.3, 0.1),
    "K2D9": (0.1, 0.5, 0.1, 0.3),
    "K2D13": (0.1, 0.5, 0.1, 0.3),
    "Janus19": (0.5, 0.5, 0.1, 0.3),
}
# gamma, cql weight
CQL_TUNED = {"DR9": (0.7, 0.3), "DR19": (0.8, 0.3), "K2D9": (0.7, 1.0), "K2D13": (0.7, 1.0), "Janus19": (0.8, 0.01)}
# gamma, cql weight, tau
IQL_TUNED = {
    "DR9": (0.7, 0.3, 0.9),
    "DR19": (0.8, 0.0, 0.7),
    "K2D9": (0.7, 1.0, 0.5),
    "K2D13": (0.7, 1.0, 0.7),
    "Janus19": (0.8, 0.01, 0.7),
}
# hyperparameter search axes
CQL_GRID = {"DR": {"cql_weight": [0.1, 0.3, 0.5]}, "K2D": {"cql_weight": [0.3, 0.5, 1.0]}, "Janus": {"cql_weight": [0.01, 0.05, 0.1]}}
GAMMA_GRID = [0.7, 0.8, 0.9]
TAU_GRID = [0.5, 0.7, 0.9]

SCALES = {
    "desk": {"n_layers": 2, "n_heads": 4, "d_model": 64, "batch_size": 64},
    "full": {"n_layers": 4, "n_heads": 4, "d_model": 512, "batch_size": 512},
}

_NUM = (int, float)
_OPT_INT = (int, type(None))
_OPT_NUM = (int, float, type(None))

SCHEMA: dict[str, dict[str, tuple]] = {
    "env": {"kind": (str,), "grid_size": (int,), "episode_len": _OPT_INT},
    "data": {
        "targets": _OPT_INT,
        "histories": _OPT_INT,
        "expertise": (str,),
        "ordering": (str,),
        "subsample": _OPT_INT,
        "seed": (int,),
        "sort_gamma": _OPT_NUM,
    },
    "train": {
        "method": (str,),
        "scale": (str,),
        "gamma": _OPT_NUM,
        "cql_weight": _OPT_NUM,
        "iql_tau": _OPT_NUM,
        "label_smoothing": _OPT_NUM,
        "target_sync": (str,),
        "target_sync_period": (int,),
        "polyak_rho": _NUM,
        "n_layers": _OPT_INT,
        "n_heads": _OPT_INT,
        "d_model": _OPT_INT,
        "seq_len": _OPT_INT,
        "dropout_attn": _OPT_NUM,
        "dropout_embed": _OPT_NUM,
        "dropout_resid": _OPT_NUM,
        "batch_size": _OPT_INT,
        "lr": _NUM,
        "grad_clip": _NUM,
        "epochs": _OPT_INT,
        "steps_per_epoch": _OPT_INT,
        "seed": (int,),
        "eval_every": (int,),
        "eval_tasks": (str,),
        "eval_max_tasks": _OPT_INT,
        "log_every": (int,),
    },
    "eval": {
        "episodes": _OPT_INT,
        "seeds": (list,),
        "tracked": (list,),
        "ctx_len": _OPT_INT,
        "temperature": (int, float),
        "tasks": (str,),
        "janus_mode": (str, type(None)),
    },
    "paths": {"data_dir": (str,), "out_dir": (str,)},
}

DATA_DEFAULTS = {"expertise": "complete", "ordering": "learning_history", "seed": 0}
TRAIN_DEFAULTS = {
    "method": AD,
    "scale": "desk",
    "target_sync": "hard",
    "target_sync_period": 1000,
    "polyak_rho": 0.995,
    "lr": 3e-4,
    "grad_clip": 1.0,
    "seed": 0,
    "eval_every": 1,
    "eval_tasks": "test",
    "log_every": 1,
}
EVAL_DEFAULTS = {"seeds": [100, 101, 102, 103], "tracked": [25, 50, 100], "tasks": "test", "temperature": 0.0}
PATH_DEFAULTS = {"data_dir": "data", "out_dir": "runs"}


@dataclass
class EvalConfig:
    episodes: int = 100
    seeds: list = field(default_factory=lambda: [100, 101, 102, 103])
    tracked: list = field(default_factory=lambda: [25, 50, 100])
    ctx_len: Optional[int] = None
    temperature: float = 0.0
    tasks: str = "test"
    janus_mode: Optional[str] = None


@dataclass
class DataConfig:
    targets: Optional[int]
    histories: Optional[int]
    expertise: str
    ordering: str
    subsample: int
    seed: int
    sort_gamma: float


@dataclass
class PipelineConfig:
    env: dict
    data: DataConfig
    train: TrainConfig
    eval: EvalConfig
    paths: dict
    resolved: dict

    @property
    def env_key(self) -> str:
        return env_key(self.env["kind"], self.env["grid_size"])

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.resolved, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def env_key(kind: str, grid_size: int) -> str:
    return f"{KIND_CODES[kind]}{grid_size}"


def _suggest(key: str, valid) -> str:
    match = difflib.get_close_matches(key, list(valid), n=1, cutoff=0.6)
    return f"; did you mean {match[0]!r}?" if match else ""


def _check_block(name: str, block: Any) -> dict:
    if not isinstance(block, dict):
        raise ConfigError(f"config block {name!r} must be an object")
    schema = SCHEMA[name]
    for key, value in block.items():
        if key not in schema:
            raise ConfigError(f"unknown key {name}.{key}{_suggest(key, schema)}")
        types = schema[key]
        ok = isinstance(value, types) and not (isinstance(value, bool) and bool not in types)
        if not ok:
            want = " or ".join(t.__name__ if t is not type(None) else "null" for t in types)
            raise ConfigError(f"{name}.{key} must be {want}, got {type(value).__name__}")
    return dict(block)


def _kind(value: str) -> str:
    if value in ENV_CODES:
        return ENV_CODES[value]
    if value in envs.KINDS:
        return value
    raise ConfigError(f"env.kind {value!r} unknown{_suggest(value, list(envs.KINDS) + list(ENV_CODES))}")


def _lookup(table: dict, key: str, what: str):
    if key not in table:
        raise ConfigError(f"no tuned {what} for {key}; set it explicitly")
    return table[key]


def default_subsample(kind: str, expertise: str, ordering: str) -> int:
    if ordering != "learning_history":
        return 1
    if kind == envs.KEY_TO_DOOR:
        return 8 if expertise == "complete" else 2
    return 4 if expertise == "complete" else 1


def method_defaults(method: str, key: str) -> dict:
    out: dict[str, float] = {}
    if method == IC_IQL:
        g, a, t = _lookup(IQL_TUNED, key, "IQL parameters")
        out.update(gamma=g, cql_weight=a, iql_tau=t)
    elif method in (IC_CQL, IC_DQN, AD):
        if key in CQL_TUNED:
            g, a = CQL_TUNED[key]
        elif method == AD:
            g, a = 0.9, 0.0
        else:
            g, a = _lookup(CQL_TUNED, key, "CQL parameters")
        out.update(gamma=g, cql_weight=a if method == IC_CQL else 0.0, iql_tau=0.9)
    return out


def hp_grid(method: str, kind: str, best_cql_weight: Optional[float] = None) -> dict:
    """Search space: 9 points for CQL, 18 for discrete IQL, 3 for DQN."""
    code = KIND_CODES[kind]
    if method == IC_CQL:
        return {"gamma": list(GAMMA_GRID), **CQL_GRID[code]}
    if method == IC_IQL:
        alphas = [0.0, best_cql_weight if best_cql_weight is not None else CQL_GRID[code]["cql_weight"][1]]
        return {"gamma": list(GAMMA_GRID), "iql_tau": list(TAU_GRID), "cql_weight": alphas}
    if method == IC_DQN:
        return {"gamma": list(GAMMA_GRID)}
    raise ConfigError("AD grid search is not part of the pipeline")


def load_json(source) -> dict:
    if isinstance(source, dict):
        return source
    path = Path(source)
    try:
        obj = json.loads(path.read_text() or "{}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return obj


def apply_overrides(raw: dict, overrides: dict) -> dict:
    """Set ``{"block.key": value}`` entries, skipping ``None`` values."""
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for dotted, value in overrides.items():
        if value is None:
            continue
        block, key = dotted.split(".", 1)
        out.setdefault(block, {})[key] = value
    return out


def parse_config(source=None, overrides: Optional[dict] = None) -> PipelineConfig:
    """Validate ``source`` (path, dict or None) and fill every default."""
    raw = load_json(source) if source is not None else {}
    if overrides:
        raw = apply_overrides(raw, overrides)
    for key in raw:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config block {key!r}{_suggest(key, SCHEMA)}")
    blocks = {name: _check_block(name, raw.get(name, {})) for name in SCHEMA}

    env = blocks["env"]
    kind = _kind(env.get("kind", envs.DARK_ROOM))
    size = env.get("grid_size", 9 if kind != envs.JANUS else 19)
    if size < 2:
        raise ConfigError("env.grid_size must be at least 2")
    key = env_key(kind, size)
    episode_len = env.get("episode_len") or envs.DEFAULT_EPISODE_LEN.get((kind, size))
    if episode_len is None:
        raise ConfigError(f"env.episode_len has no default for {key}; set it explicitly")
    env_out = {"kind": kind, "grid_size": size, "episode_len": episode_len}

    d = {**DATA_DEFAULTS, **{k: v for k, v in blocks["data"].items() if v is not None}}
    if d["expertise"] not in EXPERTISE:
        raise ConfigError(f"data.expertise must be one of {list(EXPERTISE)}{_suggest(d['expertise'], EXPERTISE)}")
    if d["ordering"] not in ORDERINGS:
        raise ConfigError(f"data.ordering must be one of {list(ORDERINGS)}{_suggest(d['ordering'], ORDERINGS)}")
    subsample = d.get("subsample") or default_subsample(kind, d["expertise"], d["ordering"])
    if subsample < 1:
        raise ConfigError("data.subsample must be positive")

    t = {**TRAIN_DEFAULTS, **{k: v for k, v in blocks["train"].items() if v is not None}}
    method = normalize_method(t["method"])
    if t["scale"] not in SCALES:
        raise ConfigError(f"train.scale must be one of {list(SCALES)}{_suggest(t['scale'], SCALES)}")
    scale = SCALES[t["scale"]]
    da, de, dr, ls = _lookup(AD_TUNED, key, "AD parameters") if key in AD_TUNED else (0.0, 0.0, 0.0, 0.0)
    merged = {
        **scale,
        "seq_len": SEQ_LEN.get(key),
        "epochs": EPOCHS.get(key),
        "dropout_attn": da,
        "dropout_embed": de,
        "dropout_resid": dr,
        "label_smoothing": ls,
        **method_defaults(method, key),
        **t,
    }
    merged["method"] = method
    for name in ("seq_len", "epochs"):
        if merged[name] is None:
            raise ConfigError(f"train.{name} has no default for {key}; set it explicitly")
    sort_gamma = d.get("sort_gamma", merged["gamma"])

    ev = {**EVAL_DEFAULTS, **{k: v for k, v in blocks["eval"].items() if v is not None}}
    default_eps = 200 if ev.get("janus_mode") == "split_grid" else 100
    ev.setdefault("episodes", default_eps)
    for name in ("seeds", "tracked"):
        if not all(isinstance(x, int) and not isinstance(x, bool) for x in ev[name]):
            raise ConfigError(f"eval.{name} must be a list of integers")
    if ev["tasks"] not in ("test", "train"):
        raise ConfigError("eval.tasks must be 'test' or 'train'")
    if ev["episodes"] < 1:
        raise ConfigError("eval.episodes must be positive")
    if ev["temperature"] < 0:
        raise ConfigError("eval.temperature must be non-negative")
    if ev.get("ctx_len") is not None and not 0 <= ev["ctx_len"] <= merged["seq_len"] - 1:
        raise ConfigError(f"eval.ctx_len must lie in [0, seq_len - 1 = {merged['seq_len'] - 1}]")
    if any(k > ev["episodes"] for k in ev["tracked"]):
        raise ConfigError("eval.tracked indices must not exceed eval.episodes")

    try:
        model = ModelConfig(
            n_states=size * size,
            n_layers=merged["n_layers"],
            n_heads=merged["n_heads"],
            d_model=merged["d_model"],
            seq_len=merged["seq_len"],
            dropout_attn=merged["dropout_attn"],
            dropout_embed=merged["dropout_embed"],
            dropout_resid=merged["dropout_resid"],
        )
        mcfg = MethodConfig(
            method=method,
            gamma=merged["gamma"],
            cql_weight=merged["cql_weight"],
            iql_tau=merged["iql_tau"],
            label_smoothing=merged["label_smoothing"],
            target_sync=merged["target_sync"],
            target_sync_period=merged["target_sync_period"],
            polyak_rho=merged["polyak_rho"],
        )
        train = TrainConfig(
            method=mcfg,
            model=model,
            batch_size=merged["batch_size"],
            lr=float(merged["lr"]),
            grad_clip=float(merged["grad_clip"]),
            epochs=merged["epochs"],
            steps_per_epoch=merged.get("steps_per_epoch"),
            seed=merged["seed"],
            eval_every=merged["eval_every"],
            eval_tasks=merged["eval_tasks"],
            eval_seeds=tuple(ev["seeds"]),
            eval_episodes=ev["episodes"],
            eval_ctx_len=ev.get("ctx_len"),
            eval_temperature=float(ev["temperature"]),
            eval_max_tasks=merged.get("eval_max_tasks"),
            log_every=merged["log_every"],
        )
    except ConfigError as exc:
        raise ConfigError(f"train: {exc}") from None

    data_cfg = DataConfig(
        targets=d.get("targets"),
        histories=d.get("histories"),
        expertise=d["expertise"],
        ordering=d["ordering"],
        subsample=subsample,
        seed=d["seed"],
        sort_gamma=float(sort_gamma),
    )
    eval_cfg = EvalConfig(
        episodes=ev["episodes"],
        seeds=list(ev["seeds"]),
        tracked=list(ev["tracked"]),
        ctx_len=ev.get("ctx_len"),
        temperature=float(ev["temperature"]),
        tasks=ev["tasks"],
        janus_mode=ev.get("janus_mode"),
    )
    paths = {**PATH_DEFAULTS, **blocks["paths"]}
    resolved = {
        "env": env_out,
        "data": vars(data_cfg).copy(),
        "train": train.to_json(),
        "eval": vars(eval_cfg).copy(),
        "paths": paths,
    }
    return PipelineConfig(env_out, data_cfg, train, eval_cfg, paths, resolved)
