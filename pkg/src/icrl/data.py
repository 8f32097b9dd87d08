"""Datasets of learning histories: naming, statistics, transforms, batching and storage."""
from __future__ import annotations

import json
import re
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np

from . import envs
from .collect import TRANSITION_DTYPE, LearningHistory
from .envs import EnvSpec
from .errors import FormatError, UsageError

ENV_CODES = {"DR": envs.DARK_ROOM, "K2D": envs.KEY_TO_DOOR, "Janus": envs.JANUS}
KIND_CODES = {v: k for k, v in ENV_CODES.items()}
EXPERTISE = ("early", "mid", "late", "complete")
ORDERINGS = ("learning_history", "random", "sorted_random")

SENTINEL_ACTION = envs.N_ACTIONS

_NAME_RE = re.compile(r"^(DR|K2D|Janus)(\d+)-(\d+)-(\d+)(?:-(early|mid|late))?$")


@dataclass(frozen=True)
class DatasetName:
    env: str
    grid_size: int
    n_targets: int
    histories_per_target: int
    expertise: str = "complete"

    @property
    def kind(self) -> str:
        return ENV_CODES[self.env]

    def __str__(self) -> str:
        base = f"{self.env}{self.grid_size}-{self.n_targets}-{self.histories_per_target}"
        return base if self.expertise == "complete" else f"{base}-{self.expertise}"

    def with_expertise(self, expertise: str) -> "DatasetName":
        return replace(self, expertise=expertise)


def parse_name(name: str) -> DatasetName:
    """Parse names such as ``DR9-70-5`` or ``K2D13-500-1-early``."""
    m = _NAME_RE.match(name)
    if not m:
        raise UsageError(
            f"dataset name {name!r} does not match {{env}}{{size}}-{{targets}}-{{histories}}[-{{expertise}}]"
        )
    env, size, targets, hist, expertise = m.groups()
    return DatasetName(env, int(size), int(targets), int(hist), expertise or "complete")


@dataclass
class DatasetManifest:
    name: str
    env: dict
    n_targets: int
    histories_per_target: int
    expertise: str = "complete"
    ordering: str = "learning_history"
    subsample: int = 1
    seed: int = 0
    counts: dict = field(default_factory=dict)
    statistics: dict = field(default_factory=dict)
    tasks: list = field(default_factory=list)
    test_tasks: list = field(default_factory=list)
    collector: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        return cls(**obj)


@dataclass
class Dataset:
    manifest: DatasetManifest
    histories: list[LearningHistory]

    @property
    def name(self) -> str:
        return self.manifest.name

    @property
    def kind(self) -> str:
        return self.manifest.env["kind"]

    @property
    def grid_size(self) -> int:
        return self.manifest.env["grid_size"]

    @property
    def episode_len(self) -> int:
        return self.manifest.env["episode_len"]

    @property
    def n_transitions(self) -> int:
        return sum(len(h) for h in self.histories)

    def train_tasks(self) -> list[EnvSpec]:
        """Distinct training tasks in first-seen order (Janus dynamics dropped)."""
        seen, out = set(), []
        for h in self.histories:
            task = h.task.with_(dynamics=envs.STANDARD) if h.task.kind == envs.JANUS else h.task
            if task not in seen:
                seen.add(task)
                out.append(task)
        return out

    def test_tasks(self) -> list[EnvSpec]:
        return [EnvSpec.from_json(t) for t in self.manifest.test_tasks]

    @cached_property
    def _flat(self) -> tuple[np.ndarray, np.ndarray]:
        lengths = np.array([len(h) for h in self.histories], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        data = (
            np.concatenate([h.transitions for h in self.histories])
            if self.histories
            else np.zeros(0, TRANSITION_DTYPE)
        )
        return data, offsets

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.manifest == other.manifest and self.histories == other.histories


def history_statistics(histories: list[LearningHistory], kind: str) -> dict:
    returns = np.concatenate([h.episode_returns() for h in histories]) if histories else np.zeros(0)
    lengths = np.concatenate([h.episode_lengths() for h in histories]) if histories else np.zeros(0)
    expert = 2.0 if kind == envs.KEY_TO_DOOR else 1.0
    if len(returns) == 0:
        return {"mean_trajectory_length": 0.0, "mean_return": 0.0, "success_rate": 0.0}
    return {
        "mean_trajectory_length": float(lengths.mean()),
        "mean_return": float(returns.mean()),
        "success_rate": float((returns >= expert).mean()),
    }


def _refresh(manifest: DatasetManifest, histories: list[LearningHistory]) -> DatasetManifest:
    manifest.counts = {
        "histories": len(histories),
        "transitions": int(sum(len(h) for h in histories)),
        "trajectories": int(sum(h.n_episodes for h in histories)),
    }
    manifest.statistics = history_statistics(histories, manifest.env["kind"])
    manifest.tasks = [h.task.to_json() for h in histories]
    return manifest


def make_dataset(
    name: str | DatasetName,
    histories: list[LearningHistory],
    test_tasks: list[EnvSpec] = (),
    seed: int = 0,
    collector: Optional[dict] = None,
    episode_len: Optional[int] = None,
) -> Dataset:
    parsed = parse_name(name) if isinstance(name, str) else name
    kind = parsed.kind
    if episode_len is None:
        episode_len = histories[0].task.episode_len if histories else envs.default_episode_len(kind, parsed.grid_size)
    manifest = DatasetManifest(
        name=str(parsed),
        env={"kind": kind, "grid_size": parsed.grid_size, "episode_len": episode_len},
        n_targets=parsed.n_targets,
        histories_per_target=parsed.histories_per_target,
        expertise=parsed.expertise,
        seed=seed,
        test_tasks=[t.to_json() for t in test_tasks],
        collector=dict(collector or {}),
    )
    return Dataset(_refresh(manifest, histories), list(histories))


def derive(dataset: Dataset, histories: list[LearningHistory], **changes) -> Dataset:
    manifest = replace(dataset.manifest, **changes)
    return Dataset(_refresh(manifest, histories), histories)


def generate(
    name: str | DatasetName,
    seed: int = 0,
    cfg=None,
    episode_len: Optional[int] = None,
) -> Dataset:
    """Collect a complete dataset for ``name`` and cut the requested expertise level."""
    from .collect import QLearnConfig, collect_for_tasks

    parsed = parse_name(name) if isinstance(name, str) else name
    cfg = cfg or QLearnConfig()
    train, test = envs.goal_split(parsed.kind, parsed.grid_size, parsed.n_targets, seed, episode_len)
    histories = collect_for_tasks(train, parsed.histories_per_target, cfg, seed)
    full = make_dataset(
        parsed.with_expertise("complete"), histories, test, seed=seed, collector=asdict(cfg), episode_len=episode_len
    )
    return full if parsed.expertise == "complete" else split_dataset(full, parsed.expertise)


# --- transforms -----------------------------------------------------------------


def split_expertise(history: LearningHistory) -> tuple[LearningHistory, LearningHistory, LearningHistory]:
    episodes = history.episodes()
    n = len(episodes)
    if n < 3:
        raise UsageError(f"need at least 3 episodes to split, got {n}")
    a, b = n // 3, (2 * n) // 3
    return (
        history.from_episodes(episodes[:a]),
        history.from_episodes(episodes[a:b]),
        history.from_episodes(episodes[b:]),
    )


def split_dataset(dataset: Dataset, expertise: str) -> Dataset:
    if expertise == "complete":
        return dataset
    if expertise not in EXPERTISE:
        raise UsageError(f"unknown expertise level {expertise!r}")
    if dataset.manifest.expertise != "complete":
        raise UsageError("expertise splits are cut from complete datasets")
    part = EXPERTISE.index(expertise)
    histories = [split_expertise(h)[part] for h in dataset.histories]
    name = str(parse_name(dataset.name).with_expertise(expertise))
    return derive(dataset, histories, name=name, expertise=expertise)


def subsample(history: LearningHistory, k: int) -> LearningHistory:
    """Keep every ``k``-th episode, starting with the first."""
    if k < 1:
        raise UsageError("subsample stride must be >= 1")
    if k == 1:
        return history
    return history.from_episodes(history.episodes()[::k])


def subsample_dataset(dataset: Dataset, k: int) -> Dataset:
    if k == 1:
        return dataset
    histories = [subsample(h, k) for h in dataset.histories]
    return derive(dataset, histories, subsample=dataset.manifest.subsample * k)


def discounted_return(rewards: np.ndarray, gamma: float) -> float:
    rewards = np.asarray(rewards, dtype=np.float64)
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))


def reorder_history(history: LearningHistory, mode: str, gamma: float, rng: np.random.Generator) -> LearningHistory:
    episodes = history.episodes()
    perm = rng.permutation(len(episodes))
    shuffled = [episodes[i] for i in perm]
    if mode == "sorted_random":
        keys = [discounted_return(ep["reward"], gamma) for ep in shuffled]
        # stable: equal returns keep their shuffled order
        order = sorted(range(len(shuffled)), key=lambda i: (keys[i], i))
        shuffled = [shuffled[i] for i in order]
    return history.from_episodes(shuffled)


def reorder(dataset: Dataset, mode: str, gamma: float = 0.9, seed: int = 0) -> Dataset:
    """Shuffle episodes within each history, optionally sorting by discounted return."""
    if mode not in ("random", "sorted_random"):
        raise UsageError(f"unknown ordering mode {mode!r}")
    rng = np.random.default_rng(seed)
    histories = [reorder_history(h, mode, gamma, rng) for h in dataset.histories]
    return derive(dataset, histories, ordering=mode)


# --- context batches ------------------------------------------------------------


@dataclass
class ContextBatch:
    """Token fields and per-position targets for a batch of history segments.

    ``obs``..``step`` form the model input; ``actions``, ``rewards`` and
    ``dones`` are the transition taken at each position. ``td_mask`` marks
    positions whose successor is in the same row.
    """

    obs: np.ndarray
    prev_action: np.ndarray
    prev_reward: np.ndarray
    prev_done: np.ndarray
    step: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    pad_mask: np.ndarray
    td_mask: np.ndarray
    episode_len: int
    history_index: Optional[np.ndarray] = None
    start: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.obs.shape


def shift_previous(actions, rewards, dones, first=None):
    """Previous-transition fields aligned with each position.

    ``first`` supplies (action, reward, done) preceding position 0; without it
    the history-start sentinel is used.
    """
    prev_a = np.empty_like(actions, dtype=np.int64)
    prev_r = np.empty_like(rewards, dtype=np.float32)
    prev_d = np.empty_like(dones, dtype=np.float32)
    prev_a[..., 1:] = actions[..., :-1]
    prev_r[..., 1:] = rewards[..., :-1]
    prev_d[..., 1:] = dones[..., :-1]
    if first is None:
        prev_a[..., 0], prev_r[..., 0], prev_d[..., 0] = SENTINEL_ACTION, 0.0, 1.0
    else:
        prev_a[..., 0], prev_r[..., 0], prev_d[..., 0] = first
    return prev_a, prev_r, prev_d


def sample_context_batch(dataset: Dataset, batch: int, seq_len: int, seed) -> ContextBatch:
    if not dataset.histories:
        raise UsageError("cannot sample from an empty dataset")
    if seq_len < 1 or batch < 1:
        raise UsageError("batch and seq_len must be positive")
    rng = np.random.default_rng(seed)
    data, offsets = dataset._flat
    lengths = np.diff(offsets)
    hist = rng.integers(len(dataset.histories), size=batch)
    span = np.maximum(lengths[hist] - seq_len, 0)
    start = (rng.random(batch) * (span + 1)).astype(np.int64)
    n_valid = np.minimum(lengths[hist], seq_len)
    n_pad = seq_len - n_valid

    pos = np.arange(seq_len)[None, :] - n_pad[:, None]
    pad_mask = pos >= 0
    idx = offsets[hist][:, None] + start[:, None] + np.where(pad_mask, pos, 0)
    rows = data[idx]

    obs = np.where(pad_mask, rows["obs"], 0).astype(np.int64)
    actions = np.where(pad_mask, rows["action"], 0).astype(np.int64)
    rewards = np.where(pad_mask, rows["reward"], 0.0).astype(np.float32)
    dones = np.where(pad_mask, rows["done"], 0).astype(np.float32)
    step = np.where(pad_mask, rows["step"], 0).astype(np.int64)

    prev_a, prev_r, prev_d = shift_previous(actions, rewards, dones)
    # first real position: predecessor inside the history, or the sentinel
    first_col = n_pad
    r = np.arange(batch)
    has_prev = start > 0
    before = data[np.maximum(offsets[hist] + start - 1, 0)]
    prev_a[r, first_col] = np.where(has_prev, before["action"], SENTINEL_ACTION)
    prev_r[r, first_col] = np.where(has_prev, before["reward"], 0.0)
    prev_d[r, first_col] = np.where(has_prev, before["done"], 1.0)
    prev_a[~pad_mask] = SENTINEL_ACTION
    prev_r[~pad_mask] = 0.0
    prev_d[~pad_mask] = 1.0

    td_mask = pad_mask.copy()
    td_mask[:, -1] = False
    return ContextBatch(
        obs=obs,
        prev_action=prev_a,
        prev_reward=prev_r,
        prev_done=prev_d,
        step=step,
        actions=actions,
        rewards=rewards,
        dones=dones,
        pad_mask=pad_mask,
        td_mask=td_mask,
        episode_len=dataset.episode_len,
        history_index=hist,
        start=start,
    )


# --- binary storage -------------------------------------------------------------

MAGIC = b"ICRL"
VERSION = 1
_RECORD = TRANSITION_DTYPE  # 10 packed little-endian bytes
assert _RECORD.itemsize == 10


def dumps_dataset(dataset: Dataset) -> bytes:
    """Serialize to the binary layout; the CRC covers every byte after the header."""
    manifest = json.dumps(dataset.manifest.to_json(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<I", len(manifest)), manifest, struct.pack("<I", len(dataset.histories))]
    for h in dataset.histories:
        parts.append(struct.pack("<I", len(h)))
        parts.append(h.transitions.astype(_RECORD, copy=False).tobytes())
    payload = b"".join(parts)
    return MAGIC + struct.pack("<B", VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


def loads_dataset(blob: bytes) -> Dataset:
    if len(blob) < 5 or blob[:4] != MAGIC:
        raise FormatError("bad magic, not an ICRL dataset", 0)
    if blob[4] != VERSION:
        raise FormatError(f"unsupported version {blob[4]}", 4)
    if len(blob) < 9:
        raise FormatError("truncated file", len(blob))
    payload, crc_bytes = blob[5:-4], blob[-4:]
    (crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) != crc:
        raise FormatError("checksum mismatch", len(blob) - 4)

    pos = 5

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob) - 4:
            raise FormatError("truncated frame", pos)
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (mlen,) = struct.unpack("<I", take(4))
    try:
        manifest = DatasetManifest.from_json(json.loads(take(mlen).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}", 9) from None
    (n_hist,) = struct.unpack("<I", take(4))
    if len(manifest.tasks) != n_hist:
        raise FormatError("manifest task list does not match history count", pos)
    histories = []
    for i in range(n_hist):
        (n,) = struct.unpack("<I", take(4))
        records = np.frombuffer(take(n * _RECORD.itemsize), dtype=_RECORD).copy()
        histories.append(LearningHistory(EnvSpec.from_json(manifest.tasks[i]), records))
    if pos != len(blob) - 4:
        raise FormatError("trailing bytes after last history", pos)
    return Dataset(manifest, histories)


def write_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_dataset(dataset))


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return loads_dataset(fh.read())
