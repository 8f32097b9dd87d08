"""Epoch-based training, best-epoch selection and grid search."""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .collect import derive_seed
from .data import Dataset, sample_context_batch
from .errors import ConfigError, NumericalError, UsageError
from .evaluation import EvalReport, evaluate_suite
from .model import ICRLModel, ModelConfig
from .objectives import MethodConfig, total_loss

# streams derived from the training seed
_INIT, _BATCH, _DROPOUT = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    method: MethodConfig = field(default_factory=MethodConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 512
    lr: float = 3e-4
    grad_clip: float = 1.0
    epochs: int = 30
    # None: ceil(transitions / (batch_size * seq_len))
    steps_per_epoch: Optional[int] = None
    seed: int = 0
    eval_every: int = 1
    eval_tasks: str = "test"
    eval_seeds: tuple = (100,)
    eval_episodes: int = 100
    eval_ctx_len: Optional[int] = None
    # 0 keeps AD greedy; value methods ignore it
    eval_temperature: float = 0.0
    eval_max_tasks: Optional[int] = None
    log_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "eval_seeds", tuple(int(s) for s in self.eval_seeds))
        if min(self.batch_size, self.epochs) < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be positive")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ConfigError("lr and grad_clip must be positive")
        if self.eval_tasks not in ("test", "train"):
            raise ConfigError("eval_tasks must be 'test' or 'train'")
        if self.eval_every < 0 or self.log_every < 1:
            raise ConfigError("eval_every must be >= 0 and log_every >= 1")

    def to_json(self) -> dict:
        out = asdict(self)
        out["method"] = self.method.to_json()
        out["model"] = self.model.to_json()
        out["eval_seeds"] = list(self.eval_seeds)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["method"] = MethodConfig(**obj["method"])
        obj["model"] = ModelConfig.from_json(obj["model"])
        return cls(**obj)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def steps_per_epoch(dataset: Dataset, cfg: TrainConfig) -> int:
    if cfg.steps_per_epoch is not None:
        return cfg.steps_per_epoch
    return max(1, math.ceil(dataset.n_transitions / (cfg.batch_size * cfg.model.seq_len)))


@dataclass
class TrainResult:
    model: ICRLModel
    log: list
    checkpoints: list
    epoch_nauc: list
    best_epoch: Optional[int]
    reports: list = field(default_factory=list)


def _check_compatible(dataset: Dataset, cfg: TrainConfig) -> None:
    if dataset.grid_size**2 != cfg.model.n_states:
        raise ConfigError(
            f"model.n_states={cfg.model.n_states} does not match the {dataset.grid_size}x{dataset.grid_size} dataset"
        )


def checkpoint_config(cfg: TrainConfig, dataset: Dataset, epoch: int, step: int) -> dict:
    return {"train": cfg.to_json(), "dataset": dataset.name, "epoch": epoch, "step": step}


def load_model(path) -> tuple[ICRLModel, dict]:
    config, tensors = ad.load_checkpoint(path)
    model_cfg = ModelConfig.from_json(config["train"]["model"])
    return ICRLModel.from_state_dict(model_cfg, tensors), config


def _eval_tasks(dataset: Dataset, cfg: TrainConfig):
    tasks = dataset.test_tasks() if cfg.eval_tasks == "test" else dataset.train_tasks()
    if cfg.eval_max_tasks is not None:
        tasks = tasks[: cfg.eval_max_tasks]
    return tasks


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir=None,
    eval_epochs: Optional[Sequence[int]] = None,
) -> TrainResult:
    """Train one model; writes ``train_log.jsonl`` and ``epoch_XXX.ickp`` into ``out_dir``.

    Epochs listed in ``eval_epochs`` (default: every ``eval_every``-th) are
    evaluated in-context and their NAUC logged. Raises NumericalError on a
    non-finite loss after writing ``nan_snapshot.json``.
    """
    if not dataset.histories:
        raise UsageError("cannot train on an empty dataset")
    _check_compatible(dataset, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(out / "train_log.jsonl", "w") if out is not None else None

    # the model carries exactly the heads its objective trains
    cfg = cfg.with_(model=cfg.model.with_(heads=cfg.method.heads))
    model_cfg = cfg.model
    model = ICRLModel(model_cfg, derive_seed(cfg.seed, _INIT))
    opt = ad.AdamState(lr=cfg.lr)
    mcfg = cfg.method
    n_steps = steps_per_epoch(dataset, cfg)
    tasks = _eval_tasks(dataset, cfg)

    if eval_epochs is None:
        eval_epochs = [e for e in range(cfg.epochs) if cfg.eval_every and (e + 1) % cfg.eval_every == 0]
    eval_epochs = set(eval_epochs)
    if eval_epochs and not tasks:
        raise UsageError(f"dataset {dataset.name} has no {cfg.eval_tasks} tasks to evaluate on")

    log, checkpoints, epoch_nauc, reports = [], [], [], []

    def emit(record: dict) -> None:
        log.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")

    step = 0
    try:
        for epoch in range(cfg.epochs):
            losses = []
            for _ in range(n_steps):
                batch = sample_context_batch(dataset, cfg.batch_size, model_cfg.seq_len, derive_seed(cfg.seed, _BATCH, step))
                rng = np.random.default_rng(derive_seed(cfg.seed, _DROPOUT, step))
                targets = model.target_outputs(batch) if mcfg.uses_targets else None
                outputs = model(batch, rng=rng, names=mcfg.heads)
                loss, comps = total_loss(mcfg, outputs, batch, targets)
                value = loss.item()
                if not math.isfinite(value):
                    _nan_snapshot(out, epoch, step, comps, batch)
                    raise NumericalError(f"non-finite loss {value} at epoch {epoch} step {step}: {comps}")
                model.zero_grad()
                loss.backward()
                names = [k for k, p in model.params.items() if p.grad is not None]
                grads = [model.params[k].grad for k in names]
                norm = ad.global_norm(grads)
                if not math.isfinite(norm):
                    _nan_snapshot(out, epoch, step, comps, batch)
                    raise NumericalError(f"non-finite gradient norm at epoch {epoch} step {step}")
                ad.clip_grad_norm(grads, cfg.grad_clip)
                ad.adam_step(model.params, {k: model.params[k].grad for k in names}, opt)
                step += 1
                if mcfg.uses_targets:
                    if mcfg.target_sync == "hard" and step % mcfg.target_sync_period == 0:
                        model.target_sync("hard")
                    elif mcfg.target_sync == "polyak":
                        model.target_sync("polyak", mcfg.polyak_rho)
                losses.append(value)
                if step % cfg.log_every == 0:
                    emit({"type": "step", "epoch": epoch, "step": step, "loss": value, "components": comps, "grad_norm": norm})

            record = {"type": "epoch", "epoch": epoch, "step": step, "mean_loss": float(np.mean(losses))}
            if epoch in eval_epochs:
                report = evaluate_suite(
                    model, tasks, cfg.eval_seeds, cfg.eval_episodes, cfg.eval_ctx_len,
                    method=mcfg.method, dataset=dataset.name, temperature=cfg.eval_temperature,
                )
                record["nauc"] = report.aggregates()["nauc"]["mean"]
                epoch_nauc.append((epoch, record["nauc"]))
                reports.append((epoch, report))
            if out is not None:
                path = out / f"epoch_{epoch:03d}.ickp"
                ad.save_checkpoint(path, model.state_dict(), checkpoint_config(cfg, dataset, epoch, step))
                checkpoints.append(str(path))
            emit(record)
    finally:
        if log_fh is not None:
            log_fh.close()

    best = select_best_epoch([n for _, n in epoch_nauc]) if epoch_nauc else None
    best_epoch = epoch_nauc[best][0] if best is not None else None
    return TrainResult(model, log, checkpoints, epoch_nauc, best_epoch, reports)


def _nan_snapshot(out: Optional[Path], epoch, step, comps, batch) -> None:
    if out is None:
        return
    snap = {
        "epoch": epoch,
        "step": step,
        "components": {k: repr(v) for k, v in comps.items()},
        "history_index": batch.history_index.tolist() if batch.history_index is not None else None,
        "start": batch.start.tolist() if batch.start is not None else None,
    }
    with open(out / "nan_snapshot.json", "w") as fh:
        json.dump(snap, fh, indent=1, sort_keys=True)


def select_best_epoch(nauc_per_epoch) -> int:
    """Index of the highest mean NAUC; earliest wins ties.

    Accepts a flat list (one value per epoch) or a list of per-seed lists.
    """
    if len(nauc_per_epoch) == 0:
        raise UsageError("no epochs to select from")
    means = [float(np.mean(v)) for v in nauc_per_epoch]
    return int(np.argmax(means))


def grid_points(grid: dict) -> list[dict]:
    if not grid:
        return [{}]
    axes = sorted(grid)
    for a in axes:
        if not isinstance(grid[a], (list, tuple)) or not grid[a]:
            raise ConfigError(f"grid axis {a!r} needs a non-empty list of values")
    return [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]


def _apply_point(cfg: TrainConfig, point: dict) -> TrainConfig:
    method_fields = set(MethodConfig.__dataclass_fields__)
    model_fields = set(ModelConfig.__dataclass_fields__)
    m, mo, top = {}, {}, {}
    for k, v in point.items():
        if k in method_fields:
            m[k] = v
        elif k in model_fields:
            mo[k] = v
        elif k in TrainConfig.__dataclass_fields__:
            top[k] = v
        else:
            raise ConfigError(f"unknown grid axis {k!r}")
    return cfg.with_(method=cfg.method.with_(**m), model=cfg.model.with_(**mo), **top)


@dataclass
class HpResult:
    best_config: TrainConfig
    best_point: dict
    leaderboard: list

    def leaderboard_csv(self) -> str:
        buf = io.StringIO()
        axes = sorted(self.best_point)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(axes + ["nauc_mean", "nauc_std", "best_epoch"])
        for row in self.leaderboard:
            w.writerow([row["point"][a] for a in axes] + [repr(row["nauc_mean"]), repr(row["nauc_std"]), row["best_epoch"]])
        return buf.getvalue()


def hp_search(
    dataset: Dataset,
    grid: dict,
    base_cfg: TrainConfig,
    tuning_seeds: Sequence[int],
    eval_seeds: Sequence[int] = (),
    out_dir=None,
) -> HpResult:
    """Train every grid point on the tuning seeds and rank by best-epoch mean NAUC.

    ``eval_seeds`` are the seeds reserved for final evaluation; any overlap
    with ``tuning_seeds`` (as training or rollout seeds) is rejected.
    """
    tuning_seeds = list(tuning_seeds)
    if not tuning_seeds:
        raise UsageError("hp_search needs at least one tuning seed")
    overlap = set(tuning_seeds) & set(eval_seeds)
    overlap |= set(base_cfg.eval_seeds) & set(eval_seeds)
    if overlap:
        raise UsageError(f"tuning and final-evaluation seeds overlap: {sorted(overlap)}")
    points = grid_points(grid)
    rows = []
    for idx, point in enumerate(points):
        cfg = _apply_point(base_cfg, point)
        per_seed_curves = []
        for seed in tuning_seeds:
            sub = Path(out_dir) / f"point{idx:03d}_seed{seed}" if out_dir is not None else None
            res = train(dataset, cfg.with_(seed=seed), sub)
            if not res.epoch_nauc:
                raise ConfigError("hp_search needs per-epoch evaluation (eval_every >= 1)")
            per_seed_curves.append([n for _, n in res.epoch_nauc])
            epochs = [e for e, _ in res.epoch_nauc]
        by_epoch = list(zip(*per_seed_curves))
        best = select_best_epoch(by_epoch)
        vals = np.array(by_epoch[best])
        rows.append(
            {"point": point, "nauc_mean": float(vals.mean()), "nauc_std": float(vals.std()), "best_epoch": epochs[best]}
        )
    order = sorted(range(len(rows)), key=lambda i: (-rows[i]["nauc_mean"], i))
    leaderboard = [rows[i] for i in order]
    best_point = leaderboard[0]["point"]
    result = HpResult(_apply_point(base_cfg, best_point), best_point, leaderboard)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(Path(out_dir) / "leaderboard.csv", "w") as fh:
            fh.write(result.leaderboard_csv())
    return result
