"""End-to-end evaluation experiments and their on-disk outputs.

Every experiment takes frozen models, generates its evaluation maps from a
seed (never overlapping the training maps), runs trials through the
evaluation harness and returns curves plus a small JSON-able report.
"""

from __future__ import annotations

import dataclasses
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import datagen, env
from .codec import Episode, Step
from .env import Action, MapSpec
from .evaluation import (BatchResult, ConstantSchedule, EpsilonSchedule, run_batch, run_trial, write_curve_csv,
                         write_trials_jsonl)
from .render import render_curves, render_trajectory

KINDS = ("unseen", "ood", "stitch", "quality", "nonstat")


class MapOverlapError(ValueError):
    pass


PROFILES = {
    "paper": {
        "size_range": (3, 5), "ood_size_range": (6, 7), "hole_prob": 0.2,
        "n_maps": 50, "trials": 1, "episodes": 30,
        "nonstat_trials": 50, "nonstat_episodes": 60, "switch_at": 30,
        "stitch_trials": 5, "stitch_scenarios": 3, "stitch_size": 5,
    },
    "desk": {
        "size_range": (3, 4), "ood_size_range": (5, 5), "hole_prob": 0.4,
        "n_maps": 20, "trials": 20, "episodes": 30,
        "nonstat_trials": 20, "nonstat_episodes": 60, "switch_at": 30,
        "stitch_trials": 5, "stitch_scenarios": 3, "stitch_size": 4,
    },
}


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    n_maps: int = 50
    trials: int = 1
    episodes: int = 30
    size_range: tuple = (3, 5)
    hole_prob: float = 0.2
    alpha_sweep: tuple = (0.1,)
    seed: int = 0
    switch_at: int = 30
    scenarios: int = 3
    warmup_episodes: int = 20
    workers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if min(self.n_maps, self.trials, self.episodes) < 1:
            raise ValueError("n_maps, trials and episodes must be positive")
        if self.kind == "nonstat" and not 1 <= self.switch_at < self.episodes:
            raise ValueError("switch_at must fall inside the episode range")

    @classmethod
    def from_profile(cls, kind: str, profile: str = "paper", **overrides) -> "ExperimentSpec":
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        p = PROFILES[profile]
        base = {"size_range": p["size_range"], "hole_prob": p["hole_prob"], "n_maps": p["n_maps"],
                "trials": p["trials"], "episodes": p["episodes"]}
        if kind == "ood":
            base["size_range"] = p["ood_size_range"]
        elif kind == "nonstat":
            base.update(n_maps=p["nonstat_trials"], trials=1, episodes=p["nonstat_episodes"],
                        switch_at=p["switch_at"])
        elif kind == "stitch":
            s = p["stitch_size"]
            base.update(size_range=(s, s), n_maps=p["stitch_scenarios"], trials=p["stitch_trials"],
                        episodes=1, scenarios=p["stitch_scenarios"], hole_prob=0.2)
        base.update({k: v for k, v in overrides.items() if v is not None})
        base["size_range"] = tuple(base["size_range"])
        base["alpha_sweep"] = tuple(base.get("alpha_sweep", (0.1,)))
        return cls(kind=kind, **base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    batches: dict[str, BatchResult]
    report: dict
    svgs: dict[str, str] = field(default_factory=dict)
    marker: int | None = None

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for label, b in self.batches.items():
            write_trials_jsonl(out / f"trials_{label}.jsonl", b)
            write_curve_csv(out / f"curve_{label}.csv", b)
        if self.batches:
            svg = render_curves({k: b.curve for k, b in self.batches.items()},
                                {k: b.stderr for k, b in self.batches.items()},
                                title=self.spec.kind, marker=self.marker)
            (out / "curves.svg").write_text(svg)
        for name, svg in self.svgs.items():
            (out / name).write_text(svg)
        (out / "report.json").write_text(json.dumps(self.report, indent=2, sort_keys=True) + "\n")
        return out


# --- map sets ---

def check_disjoint(maps: Sequence[MapSpec], train_maps: Sequence[MapSpec]) -> None:
    train = {m.key() for m in train_maps}
    clash = [m.key() for m in maps if m.key() in train]
    if clash:
        raise MapOverlapError(f"{len(clash)} evaluation map(s) also appear in the training set, e.g. {clash[0]}")


def eval_maps(spec: ExperimentSpec, train_maps: Sequence[MapSpec] = ()) -> list[MapSpec]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    return env.generate_maps(rng, spec.n_maps, spec.size_range, spec.hole_prob, exclude=train_maps)


def _largest_side(maps: Sequence[MapSpec]) -> int:
    return max((max(m.width, m.height) for m in maps), default=0)


def window_report(batch: BatchResult, windows: Mapping[str, tuple[int, int]]) -> dict:
    return {name: batch.window_mean(a, b) for name, (a, b) in windows.items()}


def _ratio(a: float, b: float) -> float | None:
    return a / b if b > 0 else None


def _curve_experiment(models: Mapping[str, object], spec: ExperimentSpec, maps: list[MapSpec],
                      train_maps: Sequence[MapSpec]) -> ExperimentResult:
    check_disjoint(maps, train_maps)
    sched = EpsilonSchedule(spec.warmup_episodes)
    batches = {label: run_batch(m, maps, spec.episodes, spec.trials, spec.seed, sched, workers=spec.workers)
               for label, m in models.items()}
    first = next(iter(models.values()))
    rand = run_batch(first, maps, spec.episodes, spec.trials, spec.seed, ConstantSchedule(0.0))
    last_lo = max(1, spec.episodes - 5)
    report = {"kind": spec.kind, "spec": spec.to_dict(), "n_trials": spec.n_maps * spec.trials,
              "random_baseline": float(rand.matrix().mean()), "late_window": [last_lo, spec.episodes],
              "models": {}}
    for label, b in batches.items():
        early, late = b.window_mean(1, min(5, spec.episodes)), b.window_mean(last_lo, spec.episodes)
        report["models"][label] = {
            "early_mean": early, "late_mean": late,
            "late_over_early": _ratio(late, early),
            "late_over_random": _ratio(late, report["random_baseline"]),
            "curve": [round(float(v), 6) for v in b.curve],
        }
    batches["random"] = rand
    return ExperimentResult(spec, batches, report)


def run_unseen(models, spec: ExperimentSpec, train_maps: Sequence[MapSpec] = (),
               maps: Sequence[MapSpec] | None = None) -> ExperimentResult:
    """Held-out maps from the training size range; one curve per model (e.g. per Polyak constant)."""
    models = models if isinstance(models, Mapping) else {"model": models}
    maps = list(maps) if maps is not None else eval_maps(spec, train_maps)
    return _curve_experiment(models, spec, maps, train_maps)


def run_ood(models, spec: ExperimentSpec, train_maps: Sequence[MapSpec] = (),
            maps: Sequence[MapSpec] | None = None) -> ExperimentResult:
    """Like :func:`run_unseen` but every map is strictly larger than any training map."""
    models = models if isinstance(models, Mapping) else {"model": models}
    maps = list(maps) if maps is not None else eval_maps(spec, train_maps)
    biggest = _largest_side(train_maps)
    small = [m for m in maps if min(m.width, m.height) <= biggest]
    if small:
        raise MapOverlapError(f"{len(small)} out-of-distribution map(s) are not larger than the training maps "
                              f"(largest training side {biggest})")
    return _curve_experiment(models, spec, maps, train_maps)


# --- non-stationary ---

def switch_pairs(rng: np.random.Generator, n: int, size_range, hole_prob: float,
                 exclude: Sequence[MapSpec] = ()) -> list[tuple[MapSpec, MapSpec]]:
    """Map pairs that differ in goal position and hole layout."""
    pairs = []
    for _ in range(n):
        first = env.generate_maps(rng, 1, size_range, hole_prob, exclude=exclude)[0]
        while True:
            second = env.generate_maps(rng, 1, size_range, hole_prob, exclude=exclude)[0]
            if second.goal != first.goal and second.holes != first.holes:
                break
        pairs.append((first, second))
    return pairs


def min_window_start(curve: np.ndarray, first: int, last: int, width: int = 6) -> int:
    """1-indexed start of the lowest-mean window of ``width`` episodes inside first..last."""
    starts = range(first, last - width + 2)
    means = [curve[s - 1:s - 1 + width].mean() for s in starts]
    return list(starts)[int(np.argmin(means))]


def run_nonstationary(model, spec: ExperimentSpec, train_maps: Sequence[MapSpec] = ()) -> ExperimentResult:
    """The map silently changes after ``switch_at`` episodes; context carries over."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2]))
    pairs = switch_pairs(rng, spec.n_maps, spec.size_range, spec.hole_prob, exclude=train_maps)
    check_disjoint([m for p in pairs for m in p], train_maps)
    k, n = spec.switch_at, spec.episodes
    schedules = [[a] * k + [b] * (n - k) for a, b in pairs]
    batch = run_batch(model, schedules, n, spec.trials, spec.seed, EpsilonSchedule(spec.warmup_episodes),
                      workers=spec.workers)
    w = 6
    pre = batch.window_mean(max(1, k - w + 1), k)
    drop = batch.window_mean(k + 1, min(k + w, n))
    end = batch.window_mean(max(k + 1, n - w + 1), n)
    lowest = min_window_start(batch.curve, k + 1, n, w) if n - k >= w else k + 1
    report = {"kind": "nonstat", "spec": spec.to_dict(), "n_trials": len(batch.trials), "switch_at": k,
              "pre_switch_mean": pre, "post_switch_mean": drop, "final_mean": end,
              "recovery_ratio": _ratio(end, pre), "lowest_post_switch_window": lowest,
              "dip_is_lowest": bool(batch.window_mean(lowest, lowest + w - 1) >= drop - 1e-12),
              "curve": [round(float(v), 6) for v in batch.curve]}
    return ExperimentResult(spec, {"model": batch}, report, marker=k + 1)


# --- stitching ---

@dataclass(frozen=True)
class StitchScenario:
    map: MapSpec
    hole_episode: Episode
    goal_episode: Episode
    crossing: int

    @property
    def context_episodes(self) -> tuple[Episode, Episode]:
        return self.hole_episode, self.goal_episode

    @property
    def hole_tiles(self) -> frozenset:
        return frozenset(self.hole_episode.tiles())

    @property
    def goal_tiles(self) -> frozenset:
        return frozenset(self.goal_episode.tiles())

    def violations(self) -> list[str]:
        out = []
        m = self.map
        if self.map.violations():
            out += self.map.violations()
        if not self.hole_tiles & self.goal_tiles:
            out.append("scripted paths do not share a tile")
        if self.hole_episode.final_obs not in m.holes or self.hole_episode.steps[0].obs != m.start:
            out.append("first scripted episode must run from the start tile into a hole")
        if self.goal_episode.final_obs != m.goal or self.goal_episode.final_reward != 1.0:
            out.append("second scripted episode must end at the goal")
        for ep in self.context_episodes:
            if _replay(m, [s.action for s in ep.steps]) == m.goal:
                out.append("a scripted action sequence reaches the goal from the start on its own")
        return out

    def stitched(self, episode: Episode) -> bool:
        """Whether a successful run uses tiles of both scripted paths."""
        visited = set(episode.tiles())
        own_goal = (self.goal_tiles - self.hole_tiles) - {self.map.goal}
        own_hole = self.hole_tiles - {self.map.start}
        return episode.success and bool(visited & own_goal) and bool(visited & own_hole)


def _replay(spec: MapSpec, actions) -> int:
    state, obs = env.reset(spec)
    for a in actions:
        if state.done:
            break
        obs = env.step(state, a).next_obs
    return obs


def _bfs_path(spec: MapSpec, src: int, dst: int, blocked: set) -> list[int] | None:
    prev = {src: None}
    q = deque([src])
    while q:
        t = q.popleft()
        if t == dst:
            path = [t]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            return path[::-1]
        for a in Action:
            n = env.move(spec.width, spec.height, t, a)
            if n not in prev and n not in blocked:
                prev[n] = t
                q.append(n)
    return None


def _action_between(w: int, h: int, a: int, b: int) -> int:
    for act in Action:
        if env.move(w, h, a, act) == b:
            return int(act)
    raise ValueError(f"tiles {a} and {b} are not adjacent")


def _scripted(spec: MapSpec, tiles: list[int]) -> Episode:
    steps = [Step(t, 0.0, _action_between(spec.width, spec.height, t, n)) for t, n in zip(tiles, tiles[1:])]
    last = tiles[-1]
    return Episode(tuple(steps), last, 1.0 if last == spec.goal else 0.0)


def generate_stitch_scenario(rng: np.random.Generator, size: int = 4, hole_prob: float = 0.2,
                             max_tries: int = 2000) -> StitchScenario:
    """Two crossing scripted paths: start -> crossing -> hole, and elsewhere -> crossing -> goal.

    The stitched route start -> crossing -> goal is hole-free, but neither
    scripted action sequence reaches the goal when replayed from the start.
    """
    for _ in range(max_tries):
        base = env.generate_map(rng, (size, size), hole_prob)
        S, G, holes = base.start, base.goal, set(base.holes)
        free = [t for t in range(base.n_tiles) if t not in holes and t not in (S, G)]
        if len(free) < 4:
            continue
        X = int(rng.choice(free))
        p1 = _bfs_path(base, S, X, holes | {G})
        if p1 is None:
            continue
        p2 = _bfs_path(base, X, G, holes | (set(p1) - {X}))
        if p2 is None or len(p2) < 3:
            continue
        used = set(p1) | set(p2)
        traps = [n for a in Action if (n := env.move(size, size, X, a)) not in used and n != X]
        if not traps:
            continue
        trap = int(rng.choice(traps))
        holes_a = holes | {trap}
        blocked = holes_a | (set(p1) - {X}) | (set(p2) - {X})
        starts = [t for t in free if t not in used and t != trap]
        rng.shuffle(starts)
        p3 = None
        for s2 in starts:
            p3 = _bfs_path(base, int(s2), X, blocked - {X})
            if p3 is not None:
                break
        if p3 is None:
            continue
        spec = MapSpec(size, size, S, G, frozenset(holes_a))
        if spec.violations():
            continue
        hole_ep = _scripted(spec, p1 + [trap])
        goal_ep = _scripted(dataclasses.replace(spec, start=p3[0]), p3 + p2[1:])
        sc = StitchScenario(spec, hole_ep, goal_ep, X)
        if not sc.violations():
            return sc
    raise env.MapGenerationError("could not build a stitching scenario")


def stitch_scenarios(spec: ExperimentSpec) -> list[StitchScenario]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 3]))
    return [generate_stitch_scenario(rng, spec.size_range[0]) for _ in range(spec.scenarios)]


def run_stitching(model, spec: ExperimentSpec, scenarios: Sequence[StitchScenario] | None = None,
                  train_maps: Sequence[MapSpec] = ()) -> ExperimentResult:
    """Greedy runs with the two scripted episodes preloaded in random order, ``spec.trials`` per scenario."""
    scenarios = list(scenarios) if scenarios is not None else stitch_scenarios(spec)
    check_disjoint([s.map for s in scenarios], train_maps)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 4]))
    report = {"kind": "stitch", "spec": spec.to_dict(), "scenarios": []}
    svgs = {}
    for i, sc in enumerate(scenarios):
        bad = sc.violations()
        if bad:
            raise ValueError(f"scenario {i}: {'; '.join(bad)}")
        svgs[f"scenario{i}_hole_path.svg"] = render_trajectory(sc.map, sc.hole_episode, "scripted: hole")
        svgs[f"scenario{i}_goal_path.svg"] = render_trajectory(
            dataclasses.replace(sc.map, start=sc.goal_episode.steps[0].obs), sc.goal_episode, "scripted: goal")
        rows = []
        for t in range(spec.trials):
            order = list(sc.context_episodes)
            if rng.random() < 0.5:
                order.reverse()
            res = run_trial(model, sc.map, 1, ConstantSchedule(1.0), np.random.default_rng(t),
                            preload=order, seed=t, keep_episodes=True)
            ep = res.episodes[0]
            rows.append({"trial": t, "success": ep.success, "stitched": sc.stitched(ep),
                         "goal_first": order[0] is sc.goal_episode, "tiles": ep.tiles()})
            svgs[f"scenario{i}_trial{t}.svg"] = render_trajectory(sc.map, ep, f"trial {t}")
        n_ok = sum(r["success"] for r in rows)
        report["scenarios"].append({
            "map": sc.map.to_dict(), "crossing": sc.crossing, "successes": n_ok, "trials": spec.trials,
            "all_successes_stitched": all(r["stitched"] for r in rows if r["success"]), "runs": rows})
    return ExperimentResult(spec, {}, report, svgs)


# --- data quality ---

def run_quality(spec: ExperimentSpec, model_cfg, train_cfg, *, n_train_maps: int = 100,
                episodes_per_map: int = 600, n_sets: int | None = None, data_seed: int = 0,
                workers: int = 1) -> ExperimentResult:
    """Train one model per quality tier on sets drawn from shared episode pools, then evaluate each."""
    from .model import QModel
    from .trainer import train

    rng = np.random.default_rng(np.random.SeedSequence([data_seed, 0]))
    tmaps = env.generate_maps(rng, n_train_maps, spec.size_range, spec.hole_prob)
    pools = datagen.collect_pools(tmaps, episodes_per_map, np.random.SeedSequence([data_seed, 1]), workers)
    ratios = tier_ratio_check(np.random.default_rng(data_seed))
    models = {}
    for tier in ("high", "mid", "low"):
        ds = datagen.generate_dataset(n_maps=n_train_maps, tier=tier, seed=data_seed, size_range=spec.size_range,
                                      hole_prob=spec.hole_prob, episodes_per_map=episodes_per_map, n_sets=n_sets,
                                      slice_len=train_cfg.slice_len, pools=pools, maps=tmaps)
        state = train(ds.tokens, model_cfg, train_cfg)
        models[tier] = QModel(state.params, model_cfg)
    res = run_unseen(models, spec, tmaps)
    for tier, b in res.batches.items():
        if tier in models:
            x = np.arange(1, len(b.curve) + 1)
            res.report["models"][tier]["slope"] = float(np.polyfit(x, b.curve, 1)[0])
    res.report["tier_ratios"] = ratios
    return res


def tier_ratio_check(rng: np.random.Generator, draws: int = 10_000) -> dict:
    """Empirical success fraction per tier on a balanced two-episode pool."""
    win = Episode((Step(0, 0.0, 3),), 1, 1.0)
    lose = Episode((Step(0, 0.0, 1),), 2, 0.0)
    pool = [win, lose]
    return {t.name.lower(): float(np.mean([datagen.sample_episode(pool, t, rng).success for _ in range(draws)]))
            for t in datagen.QualityTier}
