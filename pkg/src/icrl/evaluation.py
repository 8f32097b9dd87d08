"""In-context rollouts on held-out tasks, NAUC and evaluation reports.

Rollouts run every (task, seed) pair in lockstep so one batched forward pass
serves all environments at each tick. Context is a sliding window over the
most recent transitions and persists across episode boundaries.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from . import envs
from .collect import derive_seed
from .data import SENTINEL_ACTION, ContextBatch
from .envs import EnvSpec, GridEnv
from .errors import UsageError
from .model import ICRLModel, act_greedy

N_EVAL_EPISODES = 100
N_SPLIT_GRID_EPISODES = 200
TRACKED_EPISODES = (25, 50, 100)
JANUS_MODES = ("dr19_dyn1", "dr19_dyn2", "split_grid")


class Policy(Protocol):
    def act(self, batch: ContextBatch, live: Sequence[GridEnv]) -> np.ndarray:
        """Actions for the last token of every row."""


class ModelPolicy:
    """Policy from a trained model: argmax logits (AD) or argmax mean(Q1, Q2).

    With ``temperature > 0`` AD samples from ``softmax(logits / temperature)``
    instead; value methods always act greedily.
    """

    def __init__(self, model: ICRLModel, method: str = "AD", temperature: float = 0.0, seed: int = 0):
        if temperature < 0:
            raise UsageError("temperature must be non-negative")
        self.model = model
        self.method = method
        self.temperature = float(temperature)
        self.rng = np.random.default_rng(seed)

    def act(self, batch, live=None) -> np.ndarray:
        with ad.no_grad():
            c = self.model.forward(batch, last_only=True)
            if self.method == "AD":
                logits = self.model.heads(c, ("logits",))["logits"].data
                if self.temperature == 0.0:
                    return act_greedy(logits)
                return sample_actions(logits[:, -1] / self.temperature, self.rng)
            out = self.model.heads(c, ("q1", "q2"))
            return act_greedy(out["q1"].data, out["q2"].data)


def sample_actions(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    z = logits.astype(np.float64)
    p = np.exp(z - z.max(-1, keepdims=True))
    cdf = np.cumsum(p / p.sum(-1, keepdims=True), -1)
    u = rng.random((z.shape[0], 1))
    return np.minimum((u > cdf).sum(-1), z.shape[-1] - 1).astype(np.int64)


class RandomPolicy:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def act(self, batch, live=None) -> np.ndarray:
        return self.rng.integers(envs.N_ACTIONS, size=batch.shape[0])


class OraclePolicy:
    """Knows each task; walks the shortest path, undoing any action inversion."""

    def act(self, batch, live) -> np.ndarray:
        return np.array([oracle_action(env) for env in live], dtype=np.int64)


def oracle_action(env: GridEnv) -> int:
    spec = env.spec
    if spec.kind == envs.KEY_TO_DOOR:
        target = spec.door if env.has_key else spec.key
    else:
        target = spec.goal
    x, y = env.agent_pos
    tx, ty = target
    if tx != x:
        want = 4 if tx > x else 3
    elif ty != y:
        want = 2 if ty > y else 1
    else:
        want = 0
    # the inversion is its own inverse
    return envs.INVERTED[want] if env.effective_action(want) != want else want


@dataclass
class EvalCurve:
    task: EnvSpec
    seed: int
    returns: list

    def to_json(self) -> dict:
        return {"task": self.task.to_json(), "seed": self.seed, "returns": [float(r) for r in self.returns]}

    @classmethod
    def from_json(cls, obj: dict) -> "EvalCurve":
        return cls(EnvSpec.from_json(obj["task"]), int(obj["seed"]), list(obj["returns"]))


def nauc(returns, expert_per_episode: float) -> float:
    """Rectangle-rule AUC of the return curve over the constant expert curve."""
    if expert_per_episode <= 0:
        raise UsageError("expert return must be positive")
    r = np.asarray(returns.returns if isinstance(returns, EvalCurve) else returns, dtype=np.float64)
    if r.size == 0:
        raise UsageError("cannot compute NAUC of an empty curve")
    return float(r.mean() / expert_per_episode)


def curve_nauc(curve: EvalCurve) -> float:
    return nauc(curve.returns, envs.expert_return(curve.task))


def task_seed(seed: int, spec: EnvSpec) -> int:
    """Environment stream for one (seed, task) pair, independent of batching."""
    cells = [c for cell in (spec.goal, spec.key, spec.door) if cell is not None for c in cell]
    return derive_seed(seed, 7, *cells)


def rollout_batch(
    policy: Policy,
    tasks: Sequence[EnvSpec],
    seeds: Sequence[int],
    n_episodes: int,
    ctx_len: int,
) -> list[EvalCurve]:
    """Roll out ``policy`` on every ``tasks[i]`` with ``seeds[i]`` for ``n_episodes`` episodes.

    At each step the policy sees the last ``ctx_len`` transitions plus the
    current observation; parameters are never touched.
    """
    if len(tasks) != len(seeds):
        raise UsageError("tasks and seeds must align")
    if ctx_len < 0:
        raise UsageError("ctx_len must be non-negative")
    if not tasks:
        return []
    n = len(tasks)
    live = [GridEnv(t, np.random.default_rng(task_seed(s, t))) for t, s in zip(tasks, seeds)]
    horizon = n_episodes * max(t.episode_len for t in tasks)
    obs_h = np.zeros((n, horizon), np.int64)
    act_h = np.zeros((n, horizon), np.int64)
    rew_h = np.zeros((n, horizon), np.float32)
    done_h = np.zeros((n, horizon), np.float32)
    step_h = np.zeros((n, horizon), np.int64)
    returns = [[] for _ in range(n)]
    ep_return = np.zeros(n)
    active = np.arange(n)
    episode_lens = {t.episode_len for t in tasks}
    if len(episode_lens) != 1:
        raise UsageError("tasks in one rollout batch must share episode_len")
    episode_len = episode_lens.pop()

    tick = 0
    while active.size:
        lo = max(0, tick - ctx_len)
        cur_obs = np.array([live[i].obs for i in active])
        cur_step = np.array([live[i].t for i in active])
        obs = np.concatenate([obs_h[active, lo:tick], cur_obs[:, None]], axis=1)
        step = np.concatenate([step_h[active, lo:tick], cur_step[:, None]], axis=1)
        L = obs.shape[1]
        prev_a = np.full((active.size, L), SENTINEL_ACTION, np.int64)
        prev_r = np.zeros((active.size, L), np.float32)
        prev_d = np.ones((active.size, L), np.float32)
        first = lo - 1
        if tick > 0:
            src = slice(max(first, 0), tick)
            dst = slice(1 if first < 0 else 0, L)
            prev_a[:, dst] = act_h[active, src]
            prev_r[:, dst] = rew_h[active, src]
            prev_d[:, dst] = done_h[active, src]
        zeros = np.zeros((active.size, L))
        batch = ContextBatch(
            obs=obs,
            prev_action=prev_a,
            prev_reward=prev_r,
            prev_done=prev_d,
            step=step,
            actions=zeros.astype(np.int64),
            rewards=zeros.astype(np.float32),
            dones=zeros.astype(np.float32),
            pad_mask=np.ones((active.size, L), bool),
            td_mask=np.zeros((active.size, L), bool),
            episode_len=episode_len,
        )
        actions = np.asarray(policy.act(batch, [live[i] for i in active]), dtype=np.int64)
        keep = []
        for j, i in enumerate(active):
            env = live[i]
            obs_h[i, tick], step_h[i, tick] = env.obs, env.t
            _, r, done = env.step(int(actions[j]))
            act_h[i, tick], rew_h[i, tick], done_h[i, tick] = actions[j], r, done
            ep_return[i] += r
            if done:
                returns[i].append(float(ep_return[i]))
                ep_return[i] = 0.0
                if len(returns[i]) < n_episodes:
                    env.reset()
                    keep.append(i)
            else:
                keep.append(i)
        active = np.array(keep, dtype=np.int64)
        tick += 1
    return [EvalCurve(t, int(s), returns[i]) for i, (t, s) in enumerate(zip(tasks, seeds))]


def rollout_in_context(
    policy, spec: EnvSpec, n_episodes: int = N_EVAL_EPISODES, ctx_len: Optional[int] = None, seed: int = 0
) -> EvalCurve:
    policy, ctx_len = _resolve(policy, ctx_len)
    return rollout_batch(policy, [spec], [seed], n_episodes, ctx_len)[0]


def _resolve(policy, ctx_len, method: str = "AD", temperature: float = 0.0, seed: int = 0):
    if isinstance(policy, ICRLModel):
        policy = ModelPolicy(policy, method, temperature, seed)
    if isinstance(policy, ModelPolicy):
        limit = policy.model.cfg.seq_len - 1
        ctx_len = limit if ctx_len is None else ctx_len
        if ctx_len > limit:
            raise UsageError(f"ctx_len={ctx_len} exceeds seq_len - 1 = {limit}")
    elif ctx_len is None:
        ctx_len = 0
    return policy, ctx_len


@dataclass
class EvalReport:
    dataset: str
    method: str
    curves: list
    tracked: tuple = TRACKED_EPISODES
    meta: dict = field(default_factory=dict)

    @property
    def seeds(self) -> list[int]:
        return sorted({c.seed for c in self.curves})

    def nauc_values(self) -> np.ndarray:
        return np.array([curve_nauc(c) for c in self.curves])

    def _per_seed(self, values: np.ndarray, curves=None) -> np.ndarray:
        curves = self.curves if curves is None else curves
        seeds = np.array([c.seed for c in curves])
        return np.array([values[seeds == s].mean() for s in sorted(set(seeds.tolist()))])

    def _tracked_values(self, k: int, curves) -> np.ndarray:
        return np.array([c.returns[k - 1] / envs.expert_return(c.task) for c in curves], dtype=np.float64)

    def aggregates(self, curves=None) -> dict:
        """Mean and std over seeds of task-averaged NAUC and tracked scores."""
        curves = self.curves if curves is None else curves
        if not curves:
            return {}
        out = {}
        per_seed = self._per_seed(np.array([curve_nauc(c) for c in curves]), curves)
        out["nauc"] = {"mean": float(per_seed.mean()), "std": float(per_seed.std())}
        n_ep = min(len(c.returns) for c in curves)
        for k in self.tracked:
            if k <= n_ep:
                vals = self._per_seed(self._tracked_values(k, curves), curves)
                out[f"score_{k}"] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def zone_aggregates(self) -> dict:
        zones: dict[int, list] = {}
        for c in self.curves:
            if c.task.goal is not None:
                zones.setdefault(envs.zone_of(c.task, c.task.goal), []).append(c)
        return {f"zone{z}": {"n_curves": len(cs), **self.aggregates(cs)} for z, cs in sorted(zones.items())}

    def mean_curve(self) -> np.ndarray:
        """Expert-normalized return per episode index, averaged over curves."""
        n_ep = min(len(c.returns) for c in self.curves)
        return np.mean([np.asarray(c.returns[:n_ep]) / envs.expert_return(c.task) for c in self.curves], axis=0)

    def to_json(self) -> dict:
        out = {
            "dataset": self.dataset,
            "method": self.method,
            "tracked": list(self.tracked),
            "meta": self.meta,
            "aggregates": self.aggregates(),
            "curves": [c.to_json() for c in self.curves],
        }
        if any(c.task.kind == envs.JANUS for c in self.curves):
            out["zones"] = self.zone_aggregates()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(
            obj["dataset"],
            obj["method"],
            [EvalCurve.from_json(c) for c in obj["curves"]],
            tuple(obj.get("tracked", TRACKED_EPISODES)),
            dict(obj.get("meta", {})),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "method", "metric", "mean", "std"])
        for metric, v in self.aggregates().items():
            w.writerow([self.dataset, self.method, metric, repr(v["mean"]), repr(v["std"])])
        return buf.getvalue()

    def file_stem(self) -> str:
        seeds = "-".join(str(s) for s in self.seeds)
        return f"{self.dataset}_{self.method}_seed{seeds}"


def write_report(report: EvalReport, path) -> None:
    with open(path, "w") as fh:
        fh.write(report.dumps())


def read_report(path) -> EvalReport:
    with open(path) as fh:
        return EvalReport.from_json(json.load(fh))


def evaluate_suite(
    policy,
    tasks: Sequence[EnvSpec],
    seeds: Sequence[int],
    n_episodes: int = N_EVAL_EPISODES,
    ctx_len: Optional[int] = None,
    method: str = "AD",
    dataset: str = "",
    max_batch: int = 256,
    temperature: float = 0.0,
) -> EvalReport:
    """Every task under every seed; curves are ordered seed-major.

    ``temperature`` only applies when ``policy`` is a bare model; action
    sampling is seeded from the first evaluation seed.
    """
    if not tasks:
        raise UsageError("evaluate_suite needs at least one task")
    if not seeds:
        raise UsageError("evaluate_suite needs at least one seed")
    policy, ctx_len = _resolve(policy, ctx_len, method, temperature, int(seeds[0]))
    jobs = [(t, s) for s in seeds for t in tasks]
    curves = []
    for i in range(0, len(jobs), max_batch):
        chunk = jobs[i : i + max_batch]
        curves += rollout_batch(policy, [t for t, _ in chunk], [s for _, s in chunk], n_episodes, ctx_len)
    meta = {"n_episodes": n_episodes, "ctx_len": ctx_len, "seeds": list(seeds), "n_tasks": len(tasks)}
    if temperature:
        meta["temperature"] = temperature
    return EvalReport(dataset, method, curves, meta=meta)


def janus_tasks(tasks: Sequence[EnvSpec], mode: str) -> list[EnvSpec]:
    if mode not in JANUS_MODES:
        raise UsageError(f"unknown Janus mode {mode!r}; expected one of {list(JANUS_MODES)}")
    if mode == "split_grid":
        return [t.with_(kind=envs.JANUS, dynamics=envs.STANDARD, deploy_mode=envs.SPLIT_GRID) for t in tasks]
    dyn = envs.STANDARD if mode == "dr19_dyn1" else envs.INVERTED_DYNAMICS
    return [t.with_(kind=envs.JANUS, dynamics=dyn, deploy_mode=envs.SINGLE_DYNAMIC) for t in tasks]


def janus_deploy(
    policy, mode: str, tasks: Sequence[EnvSpec], seeds: Sequence[int], ctx_len=None, method="AD", dataset=""
) -> EvalReport:
    """Single-dynamic DR19 deployments or the composite split grid (200 episodes)."""
    specs = janus_tasks(tasks, mode)
    n_ep = N_SPLIT_GRID_EPISODES if mode == "split_grid" else N_EVAL_EPISODES
    report = evaluate_suite(policy, specs, seeds, n_ep, ctx_len, method, dataset)
    report.meta["janus_mode"] = mode
    return report
