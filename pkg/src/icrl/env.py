"""Deterministic parametric Frozen Lake.

Tiles are numbered row-major (``tile = row * width + col``). The agent only
ever sees tile numbers; the map layout stays hidden.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

MAX_TILES = 49


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3

    @property
    def word(self) -> str:
        return self.name.lower()


_DELTAS = {Action.UP: (-1, 0), Action.DOWN: (1, 0), Action.LEFT: (0, -1), Action.RIGHT: (0, 1)}


class MapSpecError(ValueError):
    """A MapSpec violates one or more invariants."""


class MapGenerationError(RuntimeError):
    pass


class EpisodeOver(RuntimeError):
    """step() called on a terminated or truncated episode."""


def move(width: int, height: int, tile: int, action: int) -> int:
    """Tile reached by ``action``; moves off the board leave the agent in place."""
    r, c = divmod(tile, width)
    dr, dc = _DELTAS[Action(action)]
    nr, nc = r + dr, c + dc
    if 0 <= nr < height and 0 <= nc < width:
        return nr * width + nc
    return tile


def reachable(width: int, height: int, start: int, holes, goal: int) -> bool:
    """Breadth-first search over non-hole tiles."""
    holes = set(holes)
    seen = {start}
    queue = deque([start])
    while queue:
        t = queue.popleft()
        if t == goal:
            return True
        for a in Action:
            n = move(width, height, t, a)
            if n not in seen and n not in holes:
                seen.add(n)
                queue.append(n)
    return False


@dataclass(frozen=True)
class MapSpec:
    width: int
    height: int
    start: int
    goal: int
    holes: frozenset = field(default_factory=frozenset)
    max_steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "holes", frozenset(int(h) for h in self.holes))
        if self.max_steps is None:
            object.__setattr__(self, "max_steps", 4 * self.width * self.height)

    @property
    def n_tiles(self) -> int:
        return self.width * self.height

    def violations(self) -> list[str]:
        out = []
        n = self.width * self.height
        if self.width < 1 or self.height < 1:
            out.append("width and height must be >= 1")
        if n > MAX_TILES:
            out.append(f"at most {MAX_TILES} tiles are representable")
        for name in ("start", "goal"):
            v = getattr(self, name)
            if not 0 <= v < n:
                out.append(f"{name} {v} outside [0, {n})")
        if any(not 0 <= h < n for h in self.holes):
            out.append("hole outside the board")
        if self.start in self.holes:
            out.append("start is a hole")
        if self.goal in self.holes:
            out.append("goal is a hole")
        if self.start == self.goal:
            out.append("start equals goal")
        if self.max_steps != 4 * n:
            out.append(f"max_steps must be 4*width*height = {4 * n}")
        if not out and not reachable(self.width, self.height, self.start, self.holes, self.goal):
            out.append("no hole-free path from start to goal")
        return out

    def validate(self) -> "MapSpec":
        problems = self.violations()
        if problems:
            raise MapSpecError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "start": self.start,
            "goal": self.goal,
            "holes": sorted(self.holes),
            "max_steps": self.max_steps,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MapSpec":
        return cls(int(d["width"]), int(d["height"]), int(d["start"]), int(d["goal"]),
                   frozenset(d.get("holes", ())), d.get("max_steps"))

    @classmethod
    def from_json(cls, text: str) -> "MapSpec":
        return cls.from_dict(json.loads(text))

    def key(self) -> tuple:
        return (self.width, self.height, self.start, self.goal, tuple(sorted(self.holes)))

    def digest(self) -> str:
        return hashlib.sha1(repr(self.key()).encode()).hexdigest()[:12]


@dataclass(frozen=True)
class StepResult:
    next_obs: int
    reward: float
    terminated: bool
    truncated: bool


@dataclass
class EnvState:
    spec: MapSpec
    current: int
    steps_taken: int = 0
    done: bool = False


def reset(spec: MapSpec) -> tuple[EnvState, int]:
    spec.validate()
    return EnvState(spec, spec.start), spec.start


def step(state: EnvState, action: int) -> StepResult:
    if state.done:
        raise EpisodeOver("episode already finished; call reset()")
    spec = state.spec
    nxt = move(spec.width, spec.height, state.current, action)
    state.current = nxt
    state.steps_taken += 1
    reward = 1.0 if nxt == spec.goal else 0.0
    terminated = nxt == spec.goal or nxt in spec.holes
    truncated = not terminated and state.steps_taken >= spec.max_steps
    state.done = terminated or truncated
    return StepResult(nxt, reward, terminated, truncated)


def generate_map(rng: np.random.Generator, size_range=(3, 5), hole_prob: float = 0.2,
                 max_rejections: int = 1000) -> MapSpec:
    """Sample a solvable map: uniform dims, distinct start/goal, iid holes."""
    if not 0 <= hole_prob < 1:
        raise ValueError("hole_prob must be in [0, 1)")
    lo, hi = size_range
    for _ in range(max_rejections):
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        n = w * h
        start, goal = (int(v) for v in rng.choice(n, size=2, replace=False))
        draws = rng.random(n)
        holes = frozenset(t for t in range(n) if t not in (start, goal) and draws[t] < hole_prob)
        if reachable(w, h, start, holes, goal):
            return MapSpec(w, h, start, goal, holes)
    raise MapGenerationError(f"no solvable map after {max_rejections} attempts")


def generate_maps(rng: np.random.Generator, n: int, size_range=(3, 5), hole_prob: float = 0.2,
                  exclude=()) -> list[MapSpec]:
    """``n`` distinct solvable maps, none of whose keys appear in ``exclude``."""
    seen = {m.key() if isinstance(m, MapSpec) else m for m in exclude}
    out = []
    attempts = 0
    while len(out) < n:
        m = generate_map(rng, size_range, hole_prob)
        attempts += 1
        if attempts > 1000 * max(n, 1):
            raise MapGenerationError(f"could only find {len(out)} distinct maps")
        if m.key() in seen:
            continue
        seen.add(m.key())
        out.append(m)
    return out


def optimal_path_length(spec: MapSpec) -> int:
    """Fewest steps from start to goal (BFS)."""
    dist = {spec.start: 0}
    queue = deque([spec.start])
    while queue:
        t = queue.popleft()
        if t == spec.goal:
            return dist[t]
        for a in Action:
            n = move(spec.width, spec.height, t, a)
            if n not in dist and n not in spec.holes:
                dist[n] = dist[t] + 1
                queue.append(n)
    raise MapSpecError("goal unreachable")
