"""Online evaluation of a frozen Q-model with cross-episode context.

Within a trial the context keeps every episode played so far, so the model
can improve from its own history. Actions come from the model with
probability ``eps(e)`` and uniformly at random otherwise; both kinds of
action enter the context.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import codec, env
from .codec import Episode, Step
from .env import MapSpec


@dataclass(frozen=True)
class EpsilonSchedule:
    """Probability that the model picks the action in episode ``e`` (1-indexed)."""

    warmup_episodes: int = 20

    def __call__(self, e: int) -> float:
        if self.warmup_episodes <= 0:
            return 1.0
        return min(e / self.warmup_episodes, 1.0)


@dataclass(frozen=True)
class ConstantSchedule:
    value: float

    def __call__(self, e: int) -> float:
        return self.value


class ContextBuffer:
    """Token history of one trial, evicting the oldest finished episodes when full.

    If the episode in progress alone outgrows the capacity, its oldest blocks
    after BOT are dropped instead.
    """

    def __init__(self, capacity: int):
        if capacity < 32:
            raise ValueError("context capacity too small to hold a single step")
        self.capacity = capacity
        self.done: deque[np.ndarray] = deque()
        self.current: list[np.ndarray] = []
        self.length = 0
        self.evictions = 0

    def __len__(self) -> int:
        return self.length

    @property
    def n_episodes(self) -> int:
        return len(self.done) + (1 if self.current else 0)

    def tokens(self) -> np.ndarray:
        parts = list(self.done) + self.current
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def begin_episode(self) -> bool:
        if self.current:
            raise RuntimeError("previous episode not finished")
        return self.append([codec.BOT])

    def end_episode(self) -> bool:
        evicted = self.append([codec.EOT])
        self.done.append(np.concatenate(self.current))
        self.current = []
        return evicted

    def preload(self, episode: Episode) -> bool:
        evicted = False
        toks = codec.encode_episode(episode).tokens
        self.current = []
        for chunk in (toks[:1], toks[1:-1]):
            evicted |= self.append(chunk)
        return self.end_episode() or evicted

    def append(self, tokens) -> bool:
        """Add tokens to the current episode; True if anything was evicted."""
        arr = np.asarray(tokens, dtype=np.int64)
        self.current.append(arr)
        self.length += len(arr)
        evicted = False
        while self.length > self.capacity and self.done:
            self.length -= len(self.done.popleft())
            evicted = True
        while self.length > self.capacity and len(self.current) > 2:
            self.length -= len(self.current.pop(1))
            evicted = True
        if self.length > self.capacity:
            raise ValueError("block larger than context capacity")
        self.evictions += evicted
        return evicted


def greedy_action(q) -> int:
    """Argmax over the 4 Q-values; the lowest action index wins ties."""
    return int(np.argmax(np.asarray(q)))


class InContextAgent:
    """Context buffer plus an incremental decoder kept in sync with it."""

    def __init__(self, model, capacity: int | None = None):
        self.model = model
        self.buffer = ContextBuffer(capacity or model.max_context)
        self.decoder = model.decoder()
        self._pending: list[np.ndarray] = []

    def _push(self, tokens, evicted: bool) -> None:
        if evicted:
            self.decoder.reset()
            self._pending = [self.buffer.tokens()]
        else:
            self._pending.append(np.asarray(tokens, dtype=np.int64))

    def feed(self, tokens) -> None:
        self._push(tokens, self.buffer.append(tokens))

    def begin_episode(self) -> None:
        self._push([codec.BOT], self.buffer.begin_episode())

    def end_episode(self) -> None:
        self._push([codec.EOT], self.buffer.end_episode())

    def preload(self, episode: Episode) -> None:
        before = self.buffer.evictions
        self.buffer.preload(episode)
        self._push(codec.encode_episode(episode).tokens, self.buffer.evictions > before)

    def q(self) -> np.ndarray:
        if self._pending:
            toks = np.concatenate(self._pending)
            self._pending = []
            self._last_q = self.decoder.extend(toks)
        return np.asarray(self._last_q)


@dataclass
class TrialResult:
    rewards: list[float]
    steps: list[int]
    model_actions: list[int]
    seed: int
    spec_keys: list[str]
    episodes: list[Episode] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.rewards)

    def record(self, trial_id: int) -> dict:
        keys = sorted(set(self.spec_keys), key=self.spec_keys.index)
        return {"trial": trial_id, "seed": self.seed, "spec": keys if len(keys) > 1 else keys[0],
                "rewards": self.rewards, "steps": self.steps, "model_actions": self.model_actions}


def play_episode(agent: InContextAgent, spec: MapSpec, eps: float, rng: np.random.Generator,
                 map_id=None) -> tuple[Episode, int]:
    """One episode against ``spec``; returns it with the number of model-chosen actions."""
    state, obs = env.reset(spec)
    agent.begin_episode()
    agent.feed(codec.obs_block(obs))
    steps, incoming, chosen = [], 0.0, 0
    while not state.done:
        agent.feed(codec.action_prefix())
        if rng.random() < eps:
            a = greedy_action(agent.q())
            chosen += 1
        else:
            a = int(rng.integers(4))
        agent.feed(codec.action_suffix(a))
        res = env.step(state, a)
        steps.append(Step(obs, incoming, a))
        obs, incoming = res.next_obs, res.reward
        agent.feed(codec.obs_block(obs) + codec.reward_block(incoming))
    agent.end_episode()
    return Episode(tuple(steps), obs, incoming, map_id=map_id), chosen


def _spec_list(spec, n_episodes: int) -> list[MapSpec]:
    if isinstance(spec, MapSpec):
        return [spec] * n_episodes
    specs = list(spec)
    if len(specs) != n_episodes:
        raise ValueError(f"{len(specs)} maps given for {n_episodes} episodes")
    return specs


def run_trial(model, spec, n_episodes: int, schedule=EpsilonSchedule(), rng=None, *,
              preload: Sequence[Episode] = (), seed: int | None = None, keep_episodes: bool = False) -> TrialResult:
    """Play ``n_episodes`` with persistent context.

    ``spec`` is one map or a per-episode list (for mid-trial switches).
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    specs = _spec_list(spec, n_episodes)
    for s in set(specs):
        s.validate()
    if rng is None:
        rng = np.random.default_rng(seed)
    agent = InContextAgent(model)
    for ep in preload:
        agent.preload(ep)
    res = TrialResult([], [], [], -1 if seed is None else int(seed), [s.key() for s in specs])
    for e, sp in enumerate(specs, start=1):
        ep, chosen = play_episode(agent, sp, schedule(e), rng)
        res.rewards.append(float(ep.final_reward))
        res.steps.append(len(ep))
        res.model_actions.append(chosen)
        if keep_episodes:
            res.episodes.append(ep)
    return res


@dataclass
class BatchResult:
    trials: list[TrialResult]
    group: list[int]  # index into the spec list for each trial

    def matrix(self) -> np.ndarray:
        return np.array([t.rewards for t in self.trials], dtype=float)

    @property
    def curve(self) -> np.ndarray:
        return self.matrix().mean(axis=0)

    @property
    def stderr(self) -> np.ndarray:
        m = self.matrix()
        if len(m) < 2:
            return np.zeros(m.shape[1])
        return m.std(axis=0, ddof=1) / np.sqrt(len(m))

    def per_spec(self) -> dict[int, np.ndarray]:
        m, g = self.matrix(), np.asarray(self.group)
        return {k: m[g == k].mean(axis=0) for k in sorted(set(self.group))}

    def window_mean(self, first: int, last: int) -> float:
        """Mean reward over 1-indexed episodes first..last inclusive."""
        return float(self.matrix()[:, first - 1:last].mean())

    def records(self) -> list[dict]:
        return [t.record(i) for i, t in enumerate(self.trials)]


def _trial_job(args):
    model, spec, n_episodes, schedule, seed, preload, keep = args
    return run_trial(model, spec, n_episodes, schedule, np.random.default_rng(seed), preload=preload,
                     seed=seed, keep_episodes=keep)


def trial_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def run_batch(model, specs: Sequence, n_episodes: int, trials_per_spec: int = 1, seed: int = 0,
              schedule=EpsilonSchedule(), *, preload: Sequence[Episode] = (), workers: int = 1,
              keep_episodes: bool = False) -> BatchResult:
    """Run ``trials_per_spec`` trials on every spec; trials are ordered (spec, trial)."""
    if not len(specs):
        raise ValueError("need at least one map")
    seeds = trial_seeds(seed, len(specs) * trials_per_spec)
    jobs, group = [], []
    for i, sp in enumerate(specs):
        for t in range(trials_per_spec):
            jobs.append((model, sp, n_episodes, schedule, seeds[i * trials_per_spec + t], tuple(preload), keep_episodes))
            group.append(i)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            trials = list(pool.map(_trial_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        trials = [_trial_job(j) for j in jobs]
    return BatchResult(trials, group)


def write_trials_jsonl(path, batch: BatchResult) -> None:
    with open(path, "w") as fh:
        for rec in batch.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trials_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_curve_csv(path, batch: BatchResult) -> None:
    curve, se, n = batch.curve, batch.stderr, len(batch.trials)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "mean_reward", "stderr", "n"])
        for e in range(len(curve)):
            w.writerow([e + 1, f"{curve[e]:.6f}", f"{se[e]:.6f}", n])


def read_curve_csv(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in ("episode", "mean_reward", "stderr", "n")}


class RandomQModel:
    """Stand-in model emitting iid normal Q-values; carries no information about the map."""

    def __init__(self, seed: int = 0, max_context: int = 4096):
        self.seed = seed
        self.max_context = max_context

    def decoder(self):
        return _RandomDecoder(np.random.default_rng(self.seed))


class _RandomDecoder:
    def __init__(self, rng):
        self.rng = rng

    def reset(self):
        pass

    def extend(self, tokens):
        return self.rng.standard_normal(4)
