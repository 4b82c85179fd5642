"""Offline dataset generation.

Tabular Q-learners are trained on many map parameterizations and every
episode they play (good or bad) is recorded. Episodes are then resampled into
randomly ordered sets of 20-40 episodes per map, and the sets are packed into
fixed-length token slices.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import codec, env
from .codec import Episode, Slice, Step
from .env import MapSpec

SET_MIN, SET_MAX = 20, 40


class QualityTier(Enum):
    HIGH = (5.0, 1.0)
    MID = (1.0, 1.0)
    LOW = (1.0, 5.0)

    @property
    def weight_success(self) -> float:
        return self.value[0]

    @property
    def weight_failure(self) -> float:
        return self.value[1]

    @classmethod
    def parse(cls, name: "str | QualityTier") -> "QualityTier":
        return name if isinstance(name, cls) else cls[str(name).upper()]


@dataclass
class TabularAgent:
    q_table: np.ndarray
    lr: float = 0.1
    epsilon: float = 1.0
    gamma: float = 0.9

    def greedy(self, tile: int) -> int:
        return int(np.argmax(self.q_table[tile]))


@dataclass
class EpisodeSet:
    map_id: int
    episodes: list = field(default_factory=list)

    def __post_init__(self):
        if not SET_MIN <= len(self.episodes) <= SET_MAX:
            raise ValueError(f"a set holds {SET_MIN}-{SET_MAX} episodes, got {len(self.episodes)}")
        if any(ep.map_id != self.map_id for ep in self.episodes):
            raise ValueError("all episodes in a set must share its map_id")


def _argmax_random_tie(row: np.ndarray, rng: np.random.Generator) -> int:
    best = np.flatnonzero(row == row.max())
    return int(best[0]) if len(best) == 1 else int(rng.choice(best))


def train_tabular(spec: MapSpec, n_episodes: int, rng: np.random.Generator, *, map_id=None,
                  lr: float = 0.1, gamma: float = 0.9, eps_start: float = 1.0,
                  eps_end: float = 0.05) -> tuple[TabularAgent, list[Episode]]:
    """Epsilon-greedy Q-learning; returns the agent and every episode it played, in order."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    spec.validate()
    agent = TabularAgent(np.zeros((spec.n_tiles, 4)), lr=lr, epsilon=eps_start, gamma=gamma)
    episodes = []
    for k in range(n_episodes):
        frac = k / (n_episodes - 1) if n_episodes > 1 else 1.0
        agent.epsilon = eps_start + (eps_end - eps_start) * frac
        state, obs = env.reset(spec)
        steps, incoming = [], 0.0
        while True:
            if rng.random() < agent.epsilon:
                a = int(rng.integers(4))
            else:
                a = _argmax_random_tie(agent.q_table[obs], rng)
            res = env.step(state, a)
            bootstrap = 0.0 if res.terminated else gamma * agent.q_table[res.next_obs].max()
            q = agent.q_table[obs, a]
            agent.q_table[obs, a] = q + lr * (res.reward + bootstrap - q)
            steps.append(Step(obs, incoming, a))
            obs, incoming = res.next_obs, res.reward
            if res.terminated or res.truncated:
                break
        episodes.append(Episode(tuple(steps), obs, incoming, map_id=map_id, index=k))
    return agent, episodes


def greedy_success_rate(agent: TabularAgent, spec: MapSpec, n: int = 100) -> float:
    wins = 0
    for _ in range(n):
        state, obs = env.reset(spec)
        while not state.done:
            res = env.step(state, agent.greedy(obs))
            obs = res.next_obs
        wins += res.reward == 1.0
    return wins / n


def sample_weights(pool: Sequence[Episode], tier: QualityTier) -> np.ndarray:
    if not pool:
        raise ValueError("cannot sample from an empty pool")
    w = np.array([tier.weight_success if ep.success else tier.weight_failure for ep in pool])
    return w / w.sum()


def sample_episode(pool: Sequence[Episode], tier: QualityTier, rng: np.random.Generator) -> Episode:
    """Draw one episode with probability proportional to its tier weight."""
    p = sample_weights(pool, tier)
    return pool[int(rng.choice(len(pool), p=p))]


def build_sets(episodes_by_map: dict, tier: QualityTier, rng: np.random.Generator,
               n_sets: int) -> list[EpisodeSet]:
    """Random sets: a random map, 20-40 tier-weighted draws, shuffled."""
    map_ids = sorted(episodes_by_map)
    probs = {m: sample_weights(episodes_by_map[m], tier) for m in map_ids}
    sets = []
    for _ in range(n_sets):
        m = map_ids[int(rng.integers(len(map_ids)))]
        pool = episodes_by_map[m]
        k = int(rng.integers(SET_MIN, SET_MAX + 1))
        idx = rng.choice(len(pool), size=k, p=probs[m])
        rng.shuffle(idx)
        sets.append(EpisodeSet(m, [pool[i] for i in idx]))
    return sets


def assemble_slices(sets: Sequence[EpisodeSet], slice_len: int, rng: np.random.Generator) -> list[Slice]:
    """Shuffle set order, concatenate, and pack into ``slice_len``-token slices."""
    order = rng.permutation(len(sets))
    episodes = [ep for i in order for ep in sets[i].episodes]
    return codec.pack_slices(episodes, slice_len)


@dataclass
class Dataset:
    tokens: np.ndarray  # (n_slices, slice_len) uint16
    loss_mask: np.ndarray  # (n_slices, slice_len) uint8
    maps: list
    manifest: dict

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def slice_len(self) -> int:
        return self.tokens.shape[1]

    def map_keys(self) -> set:
        return {m.key() for m in self.maps}

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        (out / "tokens.u16").write_bytes(self.tokens.astype("<u2").tobytes())
        (out / "mask.u8").write_bytes(self.loss_mask.astype(np.uint8).tobytes())
        (out / "maps.jsonl").write_text("".join(m.to_json() + "\n" for m in self.maps))

    @classmethod
    def load(cls, in_dir) -> "Dataset":
        d = Path(in_dir)
        manifest = json.loads((d / "manifest.json").read_text())
        if manifest.get("codec_version") != codec.CODEC_VERSION:
            raise ValueError(f"dataset codec version {manifest.get('codec_version')} != {codec.CODEC_VERSION}")
        L = int(manifest["slice_len"])
        tokens = np.frombuffer((d / "tokens.u16").read_bytes(), dtype="<u2").reshape(-1, L)
        mask = np.frombuffer((d / "mask.u8").read_bytes(), dtype=np.uint8).reshape(-1, L)
        maps = read_maps(d / "maps.jsonl")
        return cls(tokens.astype(np.uint16), mask.copy(), maps, manifest)


def read_maps(path) -> list[MapSpec]:
    return [MapSpec.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _train_one(args):
    spec, n_episodes, seed, map_id = args
    _, eps = train_tabular(spec, n_episodes, np.random.default_rng(seed), map_id=map_id)
    return eps


def collect_pools(maps: Sequence[MapSpec], episodes_per_map: int, seed_seq: np.random.SeedSequence,
                  workers: int = 1) -> dict:
    seeds = seed_seq.spawn(len(maps))
    jobs = [(m, episodes_per_map, s, i) for i, (m, s) in enumerate(zip(maps, seeds))]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    return dict(enumerate(results))


def generate_dataset(*, n_maps: int = 250, tier="mid", seed: int = 0, size_range=(3, 5),
                     hole_prob: float = 0.2, episodes_per_map: int = 600, n_sets: int | None = None,
                     slice_len: int = 4096, workers: int = 1, pools: dict | None = None,
                     maps: Sequence[MapSpec] | None = None) -> Dataset:
    """End-to-end dataset build; identical arguments give byte-identical output."""
    tier = QualityTier.parse(tier)
    root = np.random.SeedSequence(seed)
    map_ss, pool_ss, set_ss = root.spawn(3)
    if maps is None:
        maps = env.generate_maps(np.random.default_rng(map_ss), n_maps, tuple(size_range), hole_prob)
    if pools is None:
        pools = collect_pools(maps, episodes_per_map, pool_ss, workers)
    rng = np.random.default_rng(set_ss)
    if n_sets is None:
        n_sets = 4 * len(maps)
    sets = build_sets(pools, tier, rng, n_sets)
    slices = assemble_slices(sets, slice_len, rng)
    manifest = {
        "seed": seed,
        "tier": tier.name.lower(),
        "map_count": len(maps),
        "slice_count": len(slices),
        "slice_len": slice_len,
        "codec_version": codec.CODEC_VERSION,
        "size_range": list(size_range),
        "hole_prob": hole_prob,
        "episodes_per_map": episodes_per_map,
        "n_sets": n_sets,
    }
    return Dataset(
        np.stack([s.tokens for s in slices]), np.stack([s.loss_mask for s in slices]), list(maps), manifest
    )
