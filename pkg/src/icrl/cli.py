"""``icrl`` command-line entry point.

Exit codes: 0 ok, 1 other failure, 2 usage or configuration error, 3 data
format error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, data
from .collect import QLearnConfig
from .config import hp_grid, load_json, parse_config
from .errors import ConfigError, FormatError, ICRLError, NumericalError, UsageError
from .evaluation import JANUS_MODES, evaluate_suite, janus_deploy, read_report, write_report
from .metrics import FORMATS, render_report
from .training import hp_search, load_model, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(output, command: str, argv: Sequence[str], inputs=(), config=None, seeds=()) -> Path:
    """``<output>.run.json``: everything needed to rerun the producing command."""
    output = Path(output)
    target = output / "run.json" if output.is_dir() else output.with_name(output.name + ".run.json")
    manifest = {
        "command": command,
        "argv": list(argv),
        "seeds": list(seeds),
        "config": config.resolved if config is not None else None,
        "config_hash": config.config_hash if config is not None else None,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "versions": {"icrl": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "threads": int(os.environ.get("ICRL_THREADS", "1")),
    }
    target.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return target


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icrl", description="Offline in-context RL workbench")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="collect Q-learning histories into a dataset file")
    g.add_argument("--name", required=True, help="e.g. DR9-70-5 or K2D9-250-1-early")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--episode-len", type=int)
    g.add_argument("--episodes", type=int, default=200, help="Q-learning episodes per history")

    s = sub.add_parser("split", help="take the early/mid/late third of every history")
    s.add_argument("--dataset", required=True)
    s.add_argument("--level", required=True, choices=("early", "mid", "late"))
    s.add_argument("--out", required=True)

    r = sub.add_parser("reorder", help="shuffle (and optionally sort) trajectories within histories")
    r.add_argument("--dataset", required=True)
    r.add_argument("--mode", required=True, choices=("random", "sorted_random"))
    r.add_argument("--gamma", type=float, help="sorting discount (default: the environment's tuned gamma)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model and write per-epoch checkpoints")
    t.add_argument("--dataset", required=True)
    t.add_argument("--method", help="AD, ic-dqn, ic-cql or ic-iql (overrides the config)")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="in-context rollouts of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--seeds", type=_seeds, default=[100, 101, 102, 103])
    e.add_argument("--tasks", choices=("test", "train"), default="test")
    e.add_argument("--episodes", type=int)
    e.add_argument("--ctx-len", type=int)
    e.add_argument("--temperature", type=float, default=0.0, help="AD action sampling temperature (0: greedy)")
    e.add_argument("--janus-mode", choices=JANUS_MODES)
    e.add_argument("--max-tasks", type=int)
    e.add_argument("--out", required=True, help="output directory")

    rep = sub.add_parser("report", help="tables and plots from evaluation reports")
    rep.add_argument("--in", dest="inputs", nargs="+", required=True)
    rep.add_argument("--format", required=True, choices=FORMATS)
    rep.add_argument("--out")

    h = sub.add_parser("hpsearch", help="grid search ranked by best-epoch NAUC")
    h.add_argument("--dataset", required=True)
    h.add_argument("--method", required=True)
    h.add_argument("--config")
    h.add_argument("--grid", help="JSON object of axis -> values (default: the tuned search space)")
    h.add_argument("--tuning-seeds", type=_seeds, default=[0, 1])
    h.add_argument("--eval-seeds", type=_seeds, default=[100, 101, 102, 103])
    h.add_argument("--out", required=True)

    sub.add_parser("selftest", help="gradient checks, environment fuzzing and metric identities")
    return p


def _train_config(dataset: data.Dataset, config_path: Optional[str], overrides: dict):
    raw = load_json(config_path) if config_path else {}
    env = raw.get("env", {})
    ds_env = {"kind": dataset.kind, "grid_size": dataset.grid_size, "episode_len": dataset.episode_len}
    for key, value in env.items():
        if key in ds_env and value is not None and value != ds_env[key] and data.ENV_CODES.get(value) != ds_env[key]:
            raise ConfigError(f"env.{key}={value!r} conflicts with dataset {dataset.name} ({ds_env[key]!r})")
    base = {f"env.{k}": v for k, v in ds_env.items()}
    base["data.expertise"] = dataset.manifest.expertise
    base["data.ordering"] = dataset.manifest.ordering
    return parse_config(raw, {**base, **overrides})


def cmd_generate(args, argv) -> int:
    name = data.parse_name(args.name)
    cfg = QLearnConfig(n_episodes=args.episodes)
    ds = data.generate(name, seed=args.seed, cfg=cfg, episode_len=args.episode_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{ds.name}.icrl"
    data.write_dataset(ds, path)
    write_run_manifest(path, "generate", argv, seeds=[args.seed])
    print(f"wrote {path} ({len(ds.histories)} histories, {ds.n_transitions} transitions)")
    return EXIT_OK


def _derived_output(args, ds: data.Dataset, suffix: str) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / f"{ds.name}{suffix}.icrl"


def cmd_split(args, argv) -> int:
    ds = data.split_dataset(data.read_dataset(args.dataset), args.level)
    path = _derived_output(args, ds, "")
    data.write_dataset(ds, path)
    write_run_manifest(path, "split", argv, inputs=[args.dataset])
    print(f"wrote {path}")
    return EXIT_OK


def cmd_reorder(args, argv) -> int:
    src = data.read_dataset(args.dataset)
    gamma = args.gamma if args.gamma is not None else _train_config(src, None, {}).data.sort_gamma
    ds = data.reorder(src, args.mode, gamma, args.seed)
    path = _derived_output(args, ds, f"-{args.mode}")
    data.write_dataset(ds, path)
    write_run_manifest(path, "reorder", argv, inputs=[args.dataset], seeds=[args.seed])
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    ds = data.read_dataset(args.dataset)
    overrides = {
        "train.method": args.method,
        "train.seed": args.seed,
        "train.epochs": args.epochs,
        "train.steps_per_epoch": args.steps_per_epoch,
        "train.eval_every": args.eval_every,
    }
    cfg = _train_config(ds, args.config, overrides)
    train_ds = data.subsample_dataset(ds, cfg.data.subsample) if cfg.data.subsample > 1 else ds
    out = Path(args.out)
    res = train(train_ds, cfg.train, out)
    write_run_manifest(out, "train", argv, inputs=[p for p in (args.dataset, args.config) if p], config=cfg, seeds=[cfg.train.seed])
    summary = {"checkpoints": res.checkpoints, "epoch_nauc": res.epoch_nauc, "best_epoch": res.best_epoch}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"trained {cfg.train.method.method} on {ds.name}: {len(res.checkpoints)} checkpoints in {out}")
    if res.best_epoch is not None:
        print(f"best epoch {res.best_epoch}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    model, header = load_model(args.checkpoint)
    ds = data.read_dataset(args.dataset)
    method = header["train"]["method"]["method"]
    tasks = ds.test_tasks() if args.tasks == "test" else ds.train_tasks()
    if args.max_tasks is not None:
        tasks = tasks[: args.max_tasks]
    if not tasks:
        raise UsageError(f"dataset {ds.name} has no {args.tasks} tasks")
    if args.janus_mode:
        report = janus_deploy(model, args.janus_mode, tasks, args.seeds, args.ctx_len, method, ds.name)
    else:
        report = evaluate_suite(model, tasks, args.seeds, args.episodes or 100, args.ctx_len, method, ds.name,
                                temperature=args.temperature)
    report.meta["checkpoint_epoch"] = header.get("epoch")
    report.meta["tasks"] = args.tasks
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = f"_{args.janus_mode}" if args.janus_mode else ""
    path = out / f"{report.file_stem()}{mode}.json"
    write_report(report, path)
    path.with_suffix(".csv").write_text(report.summary_csv())
    write_run_manifest(path, "eval", argv, inputs=[args.checkpoint, args.dataset], seeds=args.seeds)
    agg = report.aggregates()["nauc"]
    print(f"{path}: NAUC {agg['mean']:.4f} ± {agg['std']:.4f}")
    return EXIT_OK


def cmd_report(args, argv) -> int:
    reports = [read_report(p) for p in args.inputs]
    text = render_report(reports, args.format, args.out, inputs=args.inputs)
    if args.out:
        write_run_manifest(args.out, "report", argv, inputs=args.inputs)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_hpsearch(args, argv) -> int:
    ds = data.read_dataset(args.dataset)
    cfg = _train_config(ds, args.config, {"train.method": args.method})
    grid = load_json(args.grid) if args.grid else hp_grid(cfg.train.method.method, ds.kind, None)
    train_ds = data.subsample_dataset(ds, cfg.data.subsample) if cfg.data.subsample > 1 else ds
    base = cfg.train.with_(eval_seeds=tuple(1000 + s for s in args.tuning_seeds))
    res = hp_search(train_ds, grid, base, args.tuning_seeds, args.eval_seeds, args.out)
    write_run_manifest(Path(args.out), "hpsearch", argv, inputs=[p for p in (args.dataset, args.config, args.grid) if p], config=cfg, seeds=args.tuning_seeds)
    print(f"best {res.best_point} (NAUC {res.leaderboard[0]['nauc_mean']:.4f})")
    return EXIT_OK


def cmd_selftest(args, argv) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest() else EXIT_FAIL


COMMANDS = {
    "generate": cmd_generate,
    "split": cmd_split,
    "reorder": cmd_reorder,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "hpsearch": cmd_hpsearch,
    "selftest": cmd_selftest,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except ICRLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
