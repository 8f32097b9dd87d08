"""Acceptance criteria 1-12, one PASS/FAIL line each.

The lines are echoed as they are decided and again in the terminal summary.
Criteria 6 and 7 train desk-scale models and dominate the runtime.
"""
from __future__ import annotations

import copy
import math
import time

import numpy as np
import pytest

import helpers
from icrl import autodiff as ad
from icrl import data, envs, evaluation, metrics, objectives, training
from icrl.cli import main
from icrl.model import ICRLModel, ModelConfig, act_greedy
from icrl.objectives import MethodConfig


def report(request, n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
    helpers.ACCEPTANCE_LINES.append(line)
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    if tr is not None:
        tr.write_line("")
        tr.write_line(line)
    assert ok, line


def rel(x, ref):
    return abs(x / ref - 1)


# reference dataset statistics: (return early, mid, late)
REF_RETURNS = {
    "DR9-70-1": (0.27, 0.74, 0.98),
    "DR9-20-1": (0.32, 0.74, 0.98),
    "DR9-20-5": (0.31, 0.78, 0.98),
    "K2D9-250-1": (0.65, 1.68, 1.98),
}
GENERATED: dict[str, data.Dataset] = {}


def generated(name: str) -> tuple[data.Dataset, float]:
    if name not in GENERATED:
        t = time.perf_counter()
        GENERATED[name] = data.generate(name, seed=0)
        GENERATED[name + ":secs"] = time.perf_counter() - t
    return GENERATED[name], GENERATED[name + ":secs"]


def test_c01_dark_room_collector_statistics(request):
    ds, secs = generated("DR9-70-1")
    st = ds.manifest.statistics
    late = data.split_dataset(ds, "late").manifest.statistics
    ok = (
        rel(st["mean_trajectory_length"], 10.90) <= 0.10
        and rel(st["mean_return"], 0.66) <= 0.10
        and abs(late["success_rate"] - 0.98) <= 0.03
        and secs < 120
    )
    report(
        request, 1, ok,
        f"DR9-70-1 length {st['mean_trajectory_length']:.2f} (10.90 ±10%), return {st['mean_return']:.3f} "
        f"(0.66 ±10%), late success {late['success_rate']:.3f} (0.98 ±0.03), {secs:.0f}s (< 120s)",
    )


def test_c02_key_to_door_collector_statistics(request):
    ds, secs = generated("K2D9-250-1")
    st = ds.manifest.statistics
    ok = rel(st["mean_return"], 1.44) <= 0.10 and abs(st["success_rate"] - 0.61) <= 0.05 and secs < 600
    report(
        request, 2, ok,
        f"K2D9-250-1 return {st['mean_return']:.3f} (1.44 ±10%), success {st['success_rate']:.3f} "
        f"(0.61 ±0.05), {secs:.0f}s (< 600s)",
    )


def test_c03_expertise_ordering(request):
    parts, ok = [], True
    for name, ref in REF_RETURNS.items():
        ds, _ = generated(name)
        got = [data.split_dataset(ds, lv).manifest.statistics["mean_return"] for lv in ("early", "mid", "late")]
        ordered = got[0] < got[1] < got[2]
        close = all(abs(g - r) <= 0.07 for g, r in zip(got, ref))
        ok &= ordered and close
        parts.append(f"{name} " + "/".join(f"{g:.2f}" for g in got) + f" vs " + "/".join(f"{r:.2f}" for r in ref))
    report(request, 3, ok, "; ".join(parts) + " (strict order, ±0.07)")


def test_c04_oracle_nauc(request):
    dr, _ = generated("DR9-20-1")
    k2d, _ = generated("K2D9-250-1")
    oracle = evaluation.OraclePolicy()
    a = evaluation.evaluate_suite(oracle, dr.test_tasks(), [100], 100).aggregates()["nauc"]["mean"]
    b = evaluation.evaluate_suite(oracle, k2d.test_tasks(), [100], 100).aggregates()["nauc"]["mean"]
    report(request, 4, a == 1.0 and b == 1.0, f"oracle NAUC DR9 {a!r}, K2D9 {b!r} (exactly 1.0)")


def test_c05_counts_and_round_trip(request, tmp_path):
    ds, _ = generated("DR9-20-1")
    path = tmp_path / "ds.icrl"
    data.write_dataset(ds, path)
    blob = path.read_bytes()
    back = data.read_dataset(path)
    exact = data.dumps_dataset(back) == blob
    corrupt = bytearray(blob)
    corrupt[len(blob) // 2] ^= 0xFF
    try:
        data.loads_dataset(bytes(corrupt))
        crc = False
    except Exception as exc:  # noqa: BLE001
        crc = "checksum" in str(exc).lower() or "crc" in str(exc).lower()
    n = ds.n_transitions
    ok = rel(n, 41126) <= 0.10 and exact and crc
    report(
        request, 5, ok,
        f"DR9-20-1 transitions {n} ({100 * (n / 41126 - 1):+.1f}% vs 41126, ±10%), "
        f"round trip bit-exact {exact}, corruption caught by CRC {crc}",
    )


# --- desk-scale training ----------------------------------------------------------

DESK_MODEL = dict(n_states=81, n_layers=2, n_heads=4, d_model=64, seq_len=120)


@pytest.fixture(scope="module")
def dr9_20_5():
    return data.generate("DR9-20-5", seed=0)


def test_c06_method_ordering(request, dr9_20_5):
    early = data.split_dataset(dr9_20_5, "early")
    tasks = early.test_tasks()
    t0 = time.perf_counter()
    scores = {}
    for method in (objectives.AD, objectives.IC_DQN, objectives.IC_CQL):
        scores[method] = []
        for seed in (0, 1, 2):
            cfg = training.TrainConfig(
                method=MethodConfig(method=method, gamma=0.7, cql_weight=0.3, target_sync_period=50),
                model=ModelConfig(**DESK_MODEL),
                batch_size=64,
                epochs=30,
                seed=seed,
                eval_every=0,
                log_every=50,
            )
            model = training.train(early, cfg, None).model
            rep = evaluation.evaluate_suite(model, tasks, [100], 100, method=method)
            scores[method].append(rep.aggregates()["nauc"]["mean"])
    secs = time.perf_counter() - t0
    m = {k: float(np.mean(v)) for k, v in scores.items()}
    ok = m[objectives.IC_DQN] >= m[objectives.AD] - 0.02 and m[objectives.IC_CQL] >= m[objectives.AD] - 0.02
    ok &= secs < 2 * 3600
    detail = ", ".join(f"{k} {m[k]:.3f} [" + " ".join(f"{x:.3f}" for x in v) + "]" for k, v in scores.items())
    report(request, 6, ok, f"DR9-20-5-early test NAUC {detail} (DQN, CQL >= AD - 0.02), {secs / 60:.0f} min (< 120)")


def test_c07_ad_train_targets(request, dr9_20_5):
    ds = data.subsample_dataset(dr9_20_5, 4)
    cfg = training.TrainConfig(
        method=MethodConfig(method=objectives.AD, label_smoothing=0.3),
        model=ModelConfig(**DESK_MODEL, dropout_attn=0.1),
        batch_size=64,
        epochs=6,
        steps_per_epoch=100,
        seed=0,
        eval_every=2,
        eval_tasks="train",
        eval_seeds=(100,),
        eval_temperature=0.3,
        log_every=50,
    )
    t0 = time.perf_counter()
    res = training.train(ds, cfg, None)
    secs = time.perf_counter() - t0
    best = dict(res.epoch_nauc)[res.best_epoch]
    curve = ", ".join(f"e{e}={v:.3f}" for e, v in res.epoch_nauc)
    report(request, 7, best >= 0.5 and secs < 40 * 60, f"AD train NAUC best {best:.3f} ({curve}; >= 0.5), {secs / 60:.1f} min (< 40)")


# --- property criteria ------------------------------------------------------------


def test_c08_gradient_checks(request):
    errs = {m: helpers.objective_grad_error(m, max_entries=40) for m in (objectives.AD, objectives.IC_DQN, objectives.IC_CQL, objectives.IC_IQL)}
    ok = all(e < 1e-4 for e in errs.values())
    report(request, 8, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + " (< 1e-4, float64)")


def test_c09_loss_identities(request):
    rng = np.random.default_rng(9)
    with ad.precision(np.float64):
        pen = objectives.cql_penalty(ad.Tensor(np.zeros((1, 5))), np.zeros(1, np.int64)).item()
        worst = 0.0
        for _ in range(1000):
            q = rng.normal(0, 3, size=(1, 5))
            a = rng.integers(5, size=1)
            worst = max(worst, abs(objectives.cql_penalty(ad.Tensor(q), a).item() - ad.cross_entropy(ad.Tensor(q), a).item()))
        u = rng.normal(size=200)
        exp_gap = abs(objectives.expectile_loss(u, 0.5).item() - 0.5 * np.mean(u**2))
        ad_gap = max(
            abs(objectives.ad_loss(ad.Tensor(np.zeros((4, 5))), rng.integers(5, size=4), ls).item() - math.log(5))
            for ls in (0.0, 0.1, 0.3, 0.9)
        )
    ok = abs(pen - math.log(5)) <= 1e-9 and worst <= 1e-6 and exp_gap <= 1e-9 and ad_gap <= 1e-9
    report(
        request, 9, ok,
        f"cql(0)-ln5 {abs(pen - math.log(5)):.1e}, cql vs CE {worst:.1e} over 1000, "
        f"expectile(0.5) vs half-MSE {exp_gap:.1e}, AD uniform vs ln5 {ad_gap:.1e}",
    )


def test_c10_causality_and_argmax(request):
    ds = helpers.tiny_dataset()
    model = ICRLModel(ModelConfig(n_states=81, n_layers=2, n_heads=2, d_model=16, seq_len=12), seed=0)
    batch = data.sample_context_batch(ds, 2, 12, seed=0)
    base = model.forward(batch).numpy()
    rng = np.random.default_rng(10)
    causal = 0
    for _ in range(100):
        t = int(rng.integers(12))
        b = copy.deepcopy(batch)
        b.obs[:, t] = rng.integers(81, size=2)
        b.prev_action[:, t] = rng.integers(6, size=2)
        b.prev_reward[:, t] = rng.random(2)
        out = model.forward(b).numpy()
        causal += bool(np.array_equal(out[:, :t], base[:, :t]))
    inv = 0
    for _ in range(1000):
        q = rng.normal(size=5)
        scale, shift = rng.uniform(0.01, 100), rng.uniform(-100, 100)
        inv += bool(act_greedy(q) == act_greedy(q * scale + shift))
    report(request, 10, causal == 100 and inv == 1000, f"causal probe {causal}/100, affine argmax invariance {inv}/1000")


def test_c11_metric_oracles(request):
    rng = np.random.default_rng(11)
    iqm = metrics.iqm(np.arange(1, 21))
    monotone = all(
        np.all(np.diff(metrics.performance_profile(rng.random(int(rng.integers(1, 50))), np.linspace(0, 1, 21))) <= 0)
        for _ in range(200)
    )
    lo, hi = metrics.stratified_bootstrap_ci(np.full((5, 4), 0.37), metrics.iqm, 500, 0)
    ok = iqm == 10.5 and monotone and lo == hi == 0.37
    report(request, 11, ok, f"IQM(1..20) {iqm!r}, profiles monotone on 200 fuzzed inputs {monotone}, constant CI ({lo!r}, {hi!r})")


def test_c12_pipeline_determinism(request, tmp_path):
    import json

    cfg = {
        "train": {"n_layers": 1, "n_heads": 2, "d_model": 16, "seq_len": 24, "batch_size": 8,
                  "epochs": 1, "steps_per_epoch": 5, "eval_every": 0, "target_sync_period": 2},
        "eval": {"episodes": 5, "tracked": [1, 5]},
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    blobs = []
    for run in ("a", "b"):
        d = tmp_path / run
        codes = [
            main(["generate", "--name", "DR9-4-1", "--seed", "7", "--episodes", "20", "--out", str(d)]),
            main(["train", "--method", "ic-cql", "--dataset", str(d / "DR9-4-1.icrl"), "--config", str(tmp_path / "cfg.json"), "--out", str(d / "run")]),
            main(["eval", "--checkpoint", str(d / "run" / "epoch_000.ickp"), "--dataset", str(d / "DR9-4-1.icrl"),
                  "--seeds", "100,101", "--episodes", "5", "--max-tasks", "3", "--out", str(d / "eval")]),
        ]
        assert codes == [0, 0, 0]
        reports = sorted(p for p in (d / "eval").glob("*.json") if not p.name.endswith(".run.json"))
        blobs.append(
            [(d / "DR9-4-1.icrl").read_bytes(), (d / "run" / "epoch_000.ickp").read_bytes()]
            + [p.read_bytes() for p in reports]
        )
    same = len(blobs[0]) == len(blobs[1]) == 3 and all(x == y for x, y in zip(*blobs))
    report(request, 12, same, "generate -> train 1 epoch -> eval twice: dataset, checkpoint and report byte-identical " + str(same))
