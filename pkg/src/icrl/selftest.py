"""Fast invariant checks run by ``icrl selftest``."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import envs, metrics, objectives
from .autodiff import Tensor


def _gradchecks() -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(0)
    out = []
    with ad.precision(np.float64):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        qkv = Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)
        g = Tensor(1 + 0.1 * rng.normal(size=4), requires_grad=True)
        tgt = rng.integers(5, size=3)
        cases: dict[str, Callable[[], Tensor]] = {
            "matmul": lambda: ad.matmul(x, w).sum(),
            "gelu": lambda: ad.gelu(x).sum(),
            "layer_norm": lambda: ad.mul(ad.layer_norm(x, g), Tensor(np.arange(12.0).reshape(3, 4))).sum(),
            "softmax": lambda: ad.mul(ad.softmax(x), Tensor(np.arange(12.0).reshape(3, 4))).sum(),
            "log_sum_exp": lambda: ad.log_sum_exp(x).sum(),
            "cross_entropy": lambda: ad.cross_entropy(ad.matmul(x, w), tgt, label_smoothing=0.3),
            "attention": lambda: ad.mul(ad.causal_attention(qkv, 2), Tensor(np.arange(16.0).reshape(2, 4, 2))).sum(),
        }
        for name, f in cases.items():
            params = [p for p in (x, w, qkv, g)]
            err = ad.grad_check(f, params)
            out.append((f"gradcheck {name}", err < 1e-5, f"max rel err {err:.2e}"))
    return out


def _env_fuzz() -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(1)
    ok = True
    for spec in (envs.dark_room(9, (2, 3)), envs.key_to_door(9, (1, 1), (7, 7)), envs.janus(19, (3, 3), deploy_mode=envs.SPLIT_GRID)):
        env = envs.GridEnv(spec, np.random.default_rng(0))
        for _ in range(20):
            env.reset()
            done, total = False, 0.0
            while not done:
                pos, r, done = env.step(int(rng.integers(5)))
                total += r
                ok &= all(0 <= c < spec.grid_size for c in pos) and env.t <= spec.episode_len
            ok &= total <= envs.expert_return(spec)
    return [("env fuzz", bool(ok), "positions in grid, episodes bounded")]


def _identities() -> list[tuple[str, bool, str]]:
    z = Tensor(np.zeros((1, 5), np.float64))
    pen = objectives.cql_penalty(z, np.zeros(1, np.int64)).item()
    e = objectives.expectile_loss(np.array([2.0]), 0.5).item()
    return [
        ("cql ln5", abs(pen - math.log(5)) < 1e-9, f"{pen!r}"),
        ("expectile half-mse", abs(e - 2.0) < 1e-12, f"{e!r}"),
        ("iqm 1..20", metrics.iqm(np.arange(1, 21)) == 10.5, "10.5"),
        ("profile", bool(np.all(np.diff(metrics.performance_profile([0.2, 0.6, 0.9], np.linspace(0, 1, 11))) <= 0)), "monotone"),
    ]


def run_selftest(echo=print) -> bool:
    results = _gradchecks() + _env_fuzz() + _identities()
    for name, ok, detail in results:
        echo(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return all(ok for _, ok, _ in results)
