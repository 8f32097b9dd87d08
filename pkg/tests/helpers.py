"""Shared builders for the test suite."""
from __future__ import annotations

import numpy as np

from icrl import autodiff as ad
from icrl import collect, data, envs, objectives
from icrl.model import ICRLModel, ModelConfig


def tiny_dataset(n_episodes: int = 12, seed: int = 0):
    cfg = collect.QLearnConfig(n_episodes=n_episodes)
    hs = [collect.collect_history(envs.dark_room(9, g), cfg, seed + i) for i, g in enumerate([(1, 2), (7, 0), (3, 8)])]
    return data.make_dataset("DR9-3-1", hs, seed=seed)


def objective_grad_error(method: str, seed: int = 0, max_entries: int = 12) -> float:
    """Max relative FD error of ``method``'s loss through a 1-layer, 16-dim model in float64."""
    mcfg = objectives.MethodConfig(method=method)
    with ad.precision(np.float64):
        cfg = ModelConfig(n_states=81, n_layers=1, n_heads=2, d_model=16, seq_len=6, heads=mcfg.heads)
        model = ICRLModel(cfg, seed=seed)
        # a distinct target network makes the TD targets non-trivial
        rng = np.random.default_rng(seed)
        for k in model.target:
            model.target[k] = model.target[k] + 0.05 * rng.standard_normal(model.target[k].shape)
        batch = data.sample_context_batch(tiny_dataset(seed=seed), 3, 6, seed=seed)
        targets = model.target_outputs(batch) if mcfg.uses_targets else None
        if method == objectives.IC_IQL:
            # the bootstrap V is a stop-gradient constant, frozen for the probe
            with ad.no_grad():
                targets["v"] = model(batch, names=("v",))["v"].data.copy()

        def f():
            return objectives.total_loss(mcfg, model(batch, names=mcfg.heads), batch, targets)[0]

        return ad.grad_check(f, list(model.params.values()), max_entries=max_entries, seed=seed)

# PASS/FAIL lines from the acceptance suite, replayed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
