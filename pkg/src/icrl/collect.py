"""Learning-history generation with tabular epsilon-greedy Q-learning."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import envs
from .envs import EnvSpec, GridEnv
from .errors import ConfigError


@dataclass(frozen=True)
class QLearnConfig:
    learning_rate: float = 0.9933
    gamma: float = 0.9
    n_episodes: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    # small optimistic value: greedy ties favour untried actions
    q_init: float = 0.01

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.n_episodes < 1:
            raise ConfigError("n_episodes must be positive")
        if not self.eps_start >= self.eps_end >= 0:
            raise ConfigError("need eps_start >= eps_end >= 0")


TRANSITION_DTYPE = np.dtype(
    [("obs", "<u2"), ("action", "u1"), ("reward", "<f4"), ("done", "u1"), ("step", "<u2")]
)


@dataclass
class LearningHistory:
    """Ordered transitions of one base-algorithm run on one task.

    ``transitions`` is a structured array with fields obs, action, reward,
    done and step; ``done`` closes every episode, successful or not.
    """

    task: EnvSpec
    transitions: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=TRANSITION_DTYPE)

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def episode_offsets(self) -> np.ndarray:
        """Start index of every episode, plus the total length at the end."""
        ends = np.flatnonzero(self.transitions["done"]) + 1
        return np.concatenate([[0], ends]).astype(np.int64)

    @property
    def n_episodes(self) -> int:
        return int(self.transitions["done"].sum())

    def episodes(self) -> list[np.ndarray]:
        off = self.episode_offsets
        return [self.transitions[a:b] for a, b in zip(off[:-1], off[1:])]

    def episode_returns(self) -> np.ndarray:
        off = self.episode_offsets
        if len(off) == 1:
            return np.zeros(0)
        sums = np.add.reduceat(self.transitions["reward"].astype(np.float64), off[:-1])
        return sums

    def episode_lengths(self) -> np.ndarray:
        return np.diff(self.episode_offsets)

    def from_episodes(self, episodes: list[np.ndarray]) -> "LearningHistory":
        data = np.concatenate(episodes) if episodes else np.zeros(0, TRANSITION_DTYPE)
        return LearningHistory(self.task, data)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LearningHistory):
            return NotImplemented
        return self.task == other.task and np.array_equal(self.transitions, other.transitions)


def epsilon_schedule(episode: int, cfg: QLearnConfig) -> float:
    if cfg.n_episodes == 1:
        return cfg.eps_start
    frac = episode / (cfg.n_episodes - 1)
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac


def q_update(q: np.ndarray, s: int, a: int, r: float, s_next: int, done: bool, cfg: QLearnConfig) -> None:
    bootstrap = 0.0 if done else cfg.gamma * q[s_next].max()
    q[s, a] += cfg.learning_rate * (r + bootstrap - q[s, a])


def k2d_state_index(pos, has_key: bool, grid_size: int) -> int:
    x, y = pos
    return y * grid_size + x + (grid_size * grid_size if has_key else 0)


def n_q_states(spec: EnvSpec) -> int:
    return 2 * spec.n_cells if spec.kind == envs.KEY_TO_DOOR else spec.n_cells


def derive_seed(master: int, *keys: int) -> int:
    """64-bit seed for the stream identified by ``(master, *keys)``.

    Mixing is delegated to :class:`numpy.random.SeedSequence`, whose hash is
    designed so distinct key tuples give independent streams.
    """
    words = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys)).generate_state(
        2, np.uint32
    )
    return int(words[0]) | (int(words[1]) << 32)


def _q_state(env: GridEnv) -> int:
    if env.spec.kind == envs.KEY_TO_DOOR:
        return k2d_state_index(env.agent_pos, env.has_key, env.spec.grid_size)
    return env.obs


def collect_history(spec: EnvSpec, cfg: QLearnConfig, seed: int) -> LearningHistory:
    rng = np.random.default_rng(seed)
    env = GridEnv(spec, rng)
    q = np.full((n_q_states(spec), envs.N_ACTIONS), cfg.q_init, dtype=np.float64)
    rows = []
    for episode in range(cfg.n_episodes):
        eps = epsilon_schedule(episode, cfg)
        env.reset()
        s = _q_state(env)
        done = False
        while not done:
            obs, step = env.obs, env.t
            if rng.random() < eps:
                a = int(rng.integers(envs.N_ACTIONS))
            else:
                row = q[s]
                best = np.flatnonzero(row == row.max())
                a = int(best[0]) if len(best) == 1 else int(best[rng.integers(len(best))])
            _, r, done = env.step(a)
            s_next = _q_state(env)
            # timeouts still bootstrap; only task completion is terminal
            q_update(q, s, a, r, s_next, done and _solved(env), cfg)
            rows.append((obs, a, r, done, step))
            s = s_next
    return LearningHistory(spec, np.array(rows, dtype=TRANSITION_DTYPE))


def _solved(env: GridEnv) -> bool:
    spec = env.spec
    if spec.kind == envs.KEY_TO_DOOR:
        return env.has_key and env.agent_pos == spec.door
    return env.agent_pos == spec.goal


def _collect_job(args) -> LearningHistory:
    spec, cfg, seed = args
    return collect_history(spec, cfg, seed)


def worker_count() -> int:
    return max(1, int(os.environ.get("ICRL_THREADS", "1")))


def collect_for_tasks(
    tasks: list[EnvSpec], histories_per_target: int, cfg: QLearnConfig, seed: int
) -> list[LearningHistory]:
    """Run ``histories_per_target`` independent learners per task.

    Janus histories each draw their dynamic from a fair coin. Output order is
    (task index, history index) regardless of worker scheduling.
    """
    jobs = []
    for i, task in enumerate(tasks):
        for j in range(histories_per_target):
            run_seed = derive_seed(seed, i, j)
            run_task = task
            if task.kind == envs.JANUS:
                coin = np.random.default_rng(derive_seed(seed, i, j, 1)).integers(2)
                run_task = task.with_(dynamics=envs.INVERTED_DYNAMICS if coin else envs.STANDARD)
            jobs.append((run_task, cfg, run_seed))
    workers = worker_count()
    if workers == 1 or len(jobs) < 2:
        return [_collect_job(job) for job in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_collect_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def collect_dataset(
    kind: str,
    grid_size: int,
    n_targets: int,
    histories_per_target: int,
    cfg: QLearnConfig | None = None,
    seed: int = 0,
    episode_len: int | None = None,
) -> list[LearningHistory]:
    cfg = cfg or QLearnConfig()
    train, _ = envs.goal_split(kind, grid_size, n_targets, seed, episode_len)
    return collect_for_tasks(train, histories_per_target, cfg, seed)
