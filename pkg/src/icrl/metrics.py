"""Aggregate statistics over runs and tasks, and report rendering.

``ScoreMatrix`` rows are runs (seed x dataset), columns tasks. IQM drops
``floor(n/4)`` values from each tail instead of interpolating.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import UsageError

CSV_FIELDS = ["dataset", "method", "metric", "mean", "std", "ci_lo", "ci_hi"]
FORMATS = ("markdown", "csv", "svg")


@dataclass
class ScoreMatrix:
    values: np.ndarray
    runs: list
    tasks: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape != (len(self.runs), len(self.tasks)):
            raise UsageError(f"score matrix shape {self.values.shape} does not match labels")
        if len(set(self.runs)) != len(self.runs) or len(set(self.tasks)) != len(self.tasks):
            raise UsageError("run and task labels must be unique")
        if not np.all(np.isfinite(self.values)):
            raise UsageError("score matrix entries must be finite")


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, ScoreMatrix) else x, dtype=np.float64)


def iqm(values) -> float:
    v = np.sort(_values(values).ravel())
    if v.size == 0:
        raise UsageError("iqm of an empty set")
    cut = v.size // 4
    return float(v[cut : v.size - cut].mean())


def mean(values) -> float:
    return float(_values(values).mean())


def median(values) -> float:
    return float(np.median(_values(values)))


STATISTICS = {"iqm": iqm, "mean": mean, "median": median}


def performance_profile(scores, thresholds) -> np.ndarray:
    """Fraction of scores strictly above each threshold."""
    s = _values(scores).ravel()
    t = np.asarray(thresholds, dtype=np.float64)
    if s.size == 0:
        raise UsageError("performance profile of an empty set")
    if np.any(np.diff(t) < 0):
        raise UsageError("thresholds must be sorted ascending")
    s_sorted = np.sort(s)
    return 1.0 - np.searchsorted(s_sorted, t, side="right") / s.size


def stratified_bootstrap_ci(
    matrix,
    statistic: Callable = iqm,
    n_resamples: int = 2000,
    seed: int = 0,
    level: float = 0.95,
) -> tuple[float, float]:
    """Percentile interval from resampling runs with replacement inside each task column."""
    m = _values(matrix)
    if m.ndim == 1:
        m = m[:, None]
    if n_resamples < 100:
        raise UsageError("n_resamples must be at least 100")
    if not 0 < level < 1:
        raise UsageError("level must lie in (0, 1)")
    n_runs, n_tasks = m.shape
    if n_runs == 0:
        raise UsageError("bootstrap of an empty matrix")
    if n_runs == 1:
        warnings.warn("single run: bootstrap interval collapses to the point statistic", RuntimeWarning)
        point = statistic(m)
        return point, point
    rng = np.random.default_rng(seed)
    idx = rng.integers(n_runs, size=(n_resamples, n_runs, n_tasks))
    cols = np.arange(n_tasks)[None, None, :]
    samples = m[idx, cols]
    stats = np.array([statistic(s) for s in samples])
    alpha = (1 - level) / 2
    lo, hi = np.quantile(stats, [alpha, 1 - alpha])
    return float(lo), float(hi)


# --- report rendering -------------------------------------------------------------


def _report_rows(reports) -> list[dict]:
    rows = []
    for rep in reports:
        if not rep.curves:
            raise UsageError(f"report for {rep.dataset}/{rep.method} has no task curves")
        aggs = rep.aggregates()
        matrix = report_matrix(rep)
        lo, hi = stratified_bootstrap_ci(matrix, iqm, 1000, 0) if matrix.values.shape[0] > 1 else (float("nan"),) * 2
        for metric, v in aggs.items():
            row = {"dataset": rep.dataset, "method": rep.method, "metric": metric, "mean": v["mean"], "std": v["std"]}
            row["ci_lo"], row["ci_hi"] = (lo, hi) if metric == "nauc" else (float("nan"), float("nan"))
            rows.append(row)
        rows.append(
            {
                "dataset": rep.dataset,
                "method": rep.method,
                "metric": "nauc_iqm",
                "mean": iqm(matrix),
                "std": float("nan"),
                "ci_lo": lo,
                "ci_hi": hi,
            }
        )
    return rows


def report_matrix(report) -> ScoreMatrix:
    """Seeds x tasks NAUC matrix of one evaluation report."""
    from .evaluation import curve_nauc

    seeds = report.seeds
    keys = []
    for c in report.curves:
        key = repr(c.task.to_json())
        if key not in keys:
            keys.append(key)
    vals = np.full((len(seeds), len(keys)), np.nan)
    for c in report.curves:
        vals[seeds.index(c.seed), keys.index(repr(c.task.to_json()))] = curve_nauc(c)
    # tasks missing for some seed are dropped rather than imputed
    keep = ~np.isnan(vals).any(0)
    return ScoreMatrix(vals[:, keep], [str(s) for s in seeds], [k for k, ok in zip(keys, keep) if ok])


def render_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in _report_rows(reports):
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        for k in ("mean", "std", "ci_lo", "ci_hi"):
            r[k] = float(r[k])
    return rows


def render_markdown(reports, metric: str = "nauc") -> str:
    """Datasets as rows, methods as columns, ``mean ± std`` cells and an average row."""
    if not reports:
        raise UsageError("render_report needs at least one report")
    rows = [r for r in _report_rows(reports) if r["metric"] == metric]
    datasets = list(dict.fromkeys(r["dataset"] for r in rows))
    methods = list(dict.fromkeys(r["method"] for r in rows))
    cell = {(r["dataset"], r["method"]): r for r in rows}
    lines = ["| Dataset | " + " | ".join(methods) + " |", "|---" * (len(methods) + 1) + "|"]
    for d in datasets:
        parts = []
        for m in methods:
            r = cell.get((d, m))
            parts.append(f"{r['mean']:.2f} ± {r['std']:.2f}" if r else "-")
        lines.append(f"| {d} | " + " | ".join(parts) + " |")
    avgs = []
    for m in methods:
        vals = [cell[(d, m)]["mean"] for d in datasets if (d, m) in cell]
        avgs.append(f"{np.mean(vals):.2f}" if vals else "-")
    lines.append("| Average | " + " | ".join(avgs) + " |")
    return "\n".join(lines) + "\n"


def render_svg(reports, inputs: Sequence[str] = ()) -> str:
    """Normalized return versus episode, one line per report, as standalone SVG text."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not reports:
        raise UsageError("render_report needs at least one report")
    fig, ax = plt.subplots(figsize=(6, 4))
    for rep in reports:
        if not rep.curves:
            raise UsageError(f"report for {rep.dataset}/{rep.method} has no task curves")
        curve = rep.mean_curve()
        ax.plot(np.arange(1, curve.size + 1), curve, label=f"{rep.method} ({rep.dataset})")
    ax.set_xlabel("episode")
    ax.set_ylabel("normalized return")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    buf = io.StringIO()
    # a fixed id salt and no Date entry keep the bytes reproducible
    with matplotlib.rc_context({"svg.hashsalt": "icrl"}):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    text = buf.getvalue()
    names = ", ".join(str(p) for p in inputs) or ", ".join(f"{r.dataset}/{r.method}" for r in reports)
    comment = f"<!-- inputs: {names.replace('--', '- -')} -->\n"
    head, sep, rest = text.partition("?>\n")
    return head + sep + comment + rest if sep else comment + text


def render_report(reports, fmt: str, out: Optional[str] = None, inputs: Sequence[str] = ()) -> str:
    if fmt not in FORMATS:
        raise UsageError(f"unknown report format {fmt!r}; expected one of {list(FORMATS)}")
    reports = list(reports)
    if not reports:
        raise UsageError("render_report needs at least one report")
    if fmt == "csv":
        text = render_csv(reports)
    elif fmt == "markdown":
        text = render_markdown(reports)
    else:
        text = render_svg(reports, inputs)
    if out is not None:
        Path(out).write_text(text)
    return text
