"""Dark Room, Dark Key-to-Door and Janus gridworlds.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row. Actions are
``0: stay, 1: up (y-1), 2: down (y+1), 3: left (x-1), 4: right (x+1)``; moves
into a wall leave the agent in place. The only observation is the agent cell.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .errors import SpecificationError, UsageError

Cell = Tuple[int, int]

N_ACTIONS = 5
ACTION_NAMES = ("stay", "up", "down", "left", "right")
MOVES = ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0))
# up<->down, left<->right; stay unchanged
INVERTED = (0, 2, 1, 4, 3)

DARK_ROOM = "DarkRoom"
KEY_TO_DOOR = "KeyToDoor"
JANUS = "Janus"
KINDS = (DARK_ROOM, KEY_TO_DOOR, JANUS)

STANDARD = "Standard"
INVERTED_DYNAMICS = "Inverted"
SINGLE_DYNAMIC = "SingleDynamic"
SPLIT_GRID = "SplitGrid"

# (kind, grid_size) -> steps per episode
DEFAULT_EPISODE_LEN = {
    (DARK_ROOM, 9): 20,
    (DARK_ROOM, 19): 100,
    (KEY_TO_DOOR, 9): 50,
    (KEY_TO_DOOR, 13): 100,
    (JANUS, 19): 100,
}

N_TEST_CONFIGS = 100


def default_episode_len(kind: str, grid_size: int) -> int:
    try:
        return DEFAULT_EPISODE_LEN[(kind, grid_size)]
    except KeyError:
        raise SpecificationError(
            f"no default episode length for {kind} {grid_size}x{grid_size}; pass episode_len"
        ) from None


def _cell(value) -> Optional[Cell]:
    if value is None:
        return None
    x, y = value
    return (int(x), int(y))


@dataclass(frozen=True)
class EnvSpec:
    """Static definition of one task."""

    kind: str
    grid_size: int
    episode_len: int
    goal: Optional[Cell] = None
    key: Optional[Cell] = None
    door: Optional[Cell] = None
    dynamics: str = STANDARD
    deploy_mode: str = SINGLE_DYNAMIC

    def __post_init__(self):
        object.__setattr__(self, "goal", _cell(self.goal))
        object.__setattr__(self, "key", _cell(self.key))
        object.__setattr__(self, "door", _cell(self.door))
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise SpecificationError(f"unknown env kind {self.kind!r}")
        if self.grid_size < 1 or self.episode_len < 1:
            raise SpecificationError("grid_size and episode_len must be positive")
        if self.dynamics not in (STANDARD, INVERTED_DYNAMICS):
            raise SpecificationError(f"unknown dynamics {self.dynamics!r}")
        if self.deploy_mode not in (SINGLE_DYNAMIC, SPLIT_GRID):
            raise SpecificationError(f"unknown deploy_mode {self.deploy_mode!r}")
        if self.kind == KEY_TO_DOOR:
            for name in ("key", "door"):
                self._check_cell(name, required=True)
            if self.key == self.door:
                raise SpecificationError("key and door must differ")
        else:
            self._check_cell("goal", required=True)

    def _check_cell(self, name: str, required: bool) -> None:
        cell = getattr(self, name)
        if cell is None:
            if required:
                raise SpecificationError(f"{self.kind} requires {name}")
            return
        if not all(0 <= c < self.grid_size for c in cell):
            raise SpecificationError(f"{name} {cell} outside {self.grid_size}x{self.grid_size} grid")

    @property
    def n_cells(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def split_column(self) -> int:
        """First column governed by the inverted dynamic in a split grid."""
        return self.grid_size // 2

    def to_json(self) -> dict:
        out = asdict(self)
        for name in ("goal", "key", "door"):
            if out[name] is not None:
                out[name] = list(out[name])
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "EnvSpec":
        return cls(**obj)

    def with_(self, **changes) -> "EnvSpec":
        return replace(self, **changes)


def dark_room(grid_size: int = 9, goal: Cell = (0, 0), episode_len: Optional[int] = None) -> EnvSpec:
    episode_len = episode_len or default_episode_len(DARK_ROOM, grid_size)
    return EnvSpec(DARK_ROOM, grid_size, episode_len, goal=goal)


def key_to_door(
    grid_size: int = 9, key: Cell = (0, 0), door: Cell = (1, 0), episode_len: Optional[int] = None
) -> EnvSpec:
    episode_len = episode_len or default_episode_len(KEY_TO_DOOR, grid_size)
    return EnvSpec(KEY_TO_DOOR, grid_size, episode_len, key=key, door=door)


def janus(
    grid_size: int = 19,
    goal: Cell = (0, 0),
    dynamics: str = STANDARD,
    deploy_mode: str = SINGLE_DYNAMIC,
    episode_len: Optional[int] = None,
) -> EnvSpec:
    episode_len = episode_len or default_episode_len(JANUS, grid_size)
    return EnvSpec(JANUS, grid_size, episode_len, goal=goal, dynamics=dynamics, deploy_mode=deploy_mode)


class GridEnv:
    """Live episode state for one :class:`EnvSpec`.

    ``rng`` is only consumed by Key-to-Door resets, which draw the start cell
    uniformly over the grid.
    """

    def __init__(self, spec: EnvSpec, rng: Optional[np.random.Generator] = None):
        spec.validate()
        self.spec = spec
        self.rng = rng
        self.agent_pos: Cell = (0, 0)
        self.has_key = False
        self.t = 0
        self.finished = False
        self.reset()

    def reset(self) -> Cell:
        size = self.spec.grid_size
        if self.spec.kind == KEY_TO_DOOR:
            if self.rng is None:
                raise UsageError("Key-to-Door reset needs a seeded generator")
            self.agent_pos = (int(self.rng.integers(size)), int(self.rng.integers(size)))
        else:
            self.agent_pos = (size // 2, size // 2)
        self.has_key = False
        self.t = 0
        self.finished = False
        return self.agent_pos

    @property
    def obs(self) -> int:
        """Flat observation index of the agent cell."""
        x, y = self.agent_pos
        return y * self.spec.grid_size + x

    def effective_action(self, action: int) -> int:
        spec = self.spec
        if spec.kind != JANUS:
            return action
        if spec.deploy_mode == SPLIT_GRID:
            return INVERTED[action] if self.agent_pos[0] >= spec.split_column else action
        return INVERTED[action] if spec.dynamics == INVERTED_DYNAMICS else action

    def step(self, action: int) -> tuple[Cell, float, bool]:
        if self.finished:
            raise UsageError("episode finished; call reset()")
        if not 0 <= action < N_ACTIONS:
            raise UsageError(f"action {action} outside [0, {N_ACTIONS})")
        spec = self.spec
        dx, dy = MOVES[self.effective_action(int(action))]
        x, y = self.agent_pos
        last = spec.grid_size - 1
        self.agent_pos = (min(max(x + dx, 0), last), min(max(y + dy, 0), last))
        self.t += 1

        reward, done = 0.0, False
        if spec.kind == KEY_TO_DOOR:
            if not self.has_key and self.agent_pos == spec.key:
                self.has_key = True
                reward = 1.0
            elif self.has_key and self.agent_pos == spec.door:
                reward, done = 1.0, True
        elif self.agent_pos == spec.goal:
            reward, done = 1.0, True
        if self.t >= spec.episode_len:
            done = True
        self.finished = done
        return self.agent_pos, reward, done


def expert_return(spec: EnvSpec) -> float:
    """Per-episode return of a policy that knows the task."""
    return 2.0 if spec.kind == KEY_TO_DOOR else 1.0


def shortest_path_len(spec: EnvSpec, start: Cell) -> int:
    """Steps an informed agent needs from ``start`` (Janus dynamics do not change distances)."""

    def dist(a: Cell, b: Cell) -> int:
        return abs(a[0] - b[0]) + abs(a[1] - b[1])

    if spec.kind == KEY_TO_DOOR:
        return dist(start, spec.key) + dist(spec.key, spec.door)
    return dist(start, spec.goal)


def goal_split(
    kind: str, grid_size: int, n_train: int, seed: int, episode_len: Optional[int] = None
) -> tuple[list[EnvSpec], list[EnvSpec]]:
    """Draw disjoint train and test tasks.

    Dark Room keeps every unused goal for testing. Key-to-Door and Janus hold
    out a fixed set of 100 configurations (fewer if the task space runs out).
    """
    episode_len = episode_len or default_episode_len(kind, grid_size)
    n_cells = grid_size * grid_size
    if kind == KEY_TO_DOOR:
        # ordered (key, door) pairs with key != door
        configs = [(k, d) for k in range(n_cells) for d in range(n_cells) if k != d]
    else:
        configs = list(range(n_cells))
    if not 0 < n_train <= len(configs):
        raise UsageError(f"n_train={n_train} outside [1, {len(configs)}] for {kind}{grid_size}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(configs))
    train_idx = order[:n_train]
    if kind == DARK_ROOM:
        test_idx = np.sort(order[n_train:])
    else:
        rest = order[n_train:]
        test_idx = rest[: min(N_TEST_CONFIGS, len(rest))]

    def to_cell(index: int) -> Cell:
        return (index % grid_size, index // grid_size)

    def make(i: int) -> EnvSpec:
        c = configs[i]
        if kind == KEY_TO_DOOR:
            return EnvSpec(kind, grid_size, episode_len, key=to_cell(c[0]), door=to_cell(c[1]))
        return EnvSpec(kind, grid_size, episode_len, goal=to_cell(c))

    return [make(int(i)) for i in train_idx], [make(int(i)) for i in test_idx]


def zone_of(spec: EnvSpec, cell: Cell) -> int:
    """Janus zone (1 standard, 2 inverted) that contains ``cell``."""
    return 1 if cell[0] < spec.split_column else 2


def max_episode_len_ok(spec: EnvSpec) -> bool:
    """Whether every start cell admits a solution within the episode budget."""
    size = spec.grid_size
    corners = [(0, 0), (0, size - 1), (size - 1, 0), (size - 1, size - 1)]
    if spec.kind == KEY_TO_DOOR:
        worst = max(shortest_path_len(spec, c) for c in corners)
    else:
        worst = shortest_path_len(spec, (size // 2, size // 2))
    return worst <= spec.episode_len
