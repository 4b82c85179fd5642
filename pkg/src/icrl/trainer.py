"""DQN over trajectory slices.

For each action in a slice the regression target is

    y = reward_scale * r + gamma * Q_target(next, argmax_a Q_online(next, a))

with the reward alone for the last action of an episode. The online network
is fit by masked MSE at action positions, and the target network tracks it by
Polyak averaging once per batch.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import codec
from . import numerics as nx
from .model import ModelConfig, clone_params, forward, init_params
from .numerics import Tensor, checkpoint
from .numerics.optim import OptimizerState, adam_step

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("batch", "loss", "mean_abs_target", "lr", "alpha")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.9
    reward_scale: float = 30.0
    alpha: float = 0.1
    base_lr: float = 1e-2
    warmup_batches: int = 10
    batch_slices: int = 10
    slice_len: int = 4096
    total_batches: int = 20_000
    seed: int = 0
    grad_clip: float = 0.0
    ckpt_every: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")
        if self.batch_slices < 1 or self.total_batches < 0:
            raise ValueError("batch_slices must be >= 1 and total_batches >= 0")


@dataclass
class TargetBatch:
    y: np.ndarray
    batch_idx: np.ndarray
    pos_idx: np.ndarray
    actions: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class BatchIndex:
    """Flattened action positions of a batch of slices plus successor row indices."""

    batch_idx: np.ndarray
    pos_idx: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray
    next_row: np.ndarray  # -1 for terminal actions

    def __len__(self) -> int:
        return len(self.pos_idx)


def index_batch(layouts: Sequence[codec.Layout]) -> BatchIndex:
    b, p, a, r, t, nxt = [], [], [], [], [], []
    offset = 0
    for k, lay in enumerate(layouts):
        row_of = {int(pos): offset + i for i, pos in enumerate(lay.position)}
        b.append(np.full(len(lay), k, dtype=np.int64))
        p.append(lay.position)
        a.append(lay.action)
        r.append(lay.reward)
        t.append(lay.terminal)
        for q in lay.next_position:
            if q >= 0 and int(q) not in row_of:
                raise nx.ContractError(f"layout names successor position {q} that is not an action position")
        nxt.append(np.array([row_of[int(q)] if q >= 0 else -1 for q in lay.next_position], dtype=np.int64))
        offset += len(lay)
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt)
    return BatchIndex(cat(b, np.int64), cat(p, np.int64), cat(a, np.int64), cat(r, np.float64),
                      cat(t, bool), cat(nxt, np.int64))


def bellman_targets(q_online: np.ndarray, q_target: np.ndarray, idx: BatchIndex,
                    gamma: float, reward_scale: float) -> np.ndarray:
    """Double-DQN targets from per-action Q rows of both networks."""
    y = reward_scale * idx.rewards.astype(np.float64)
    live = ~idx.terminal
    if live.any():
        nxt = idx.next_row[live]
        best = np.argmax(q_online[nxt], axis=1)  # first index wins ties
        y[live] += gamma * q_target[nxt, best]
    return y


def _check_layouts(tokens: np.ndarray, layouts) -> None:
    if len(layouts) != len(tokens):
        raise nx.ContractError(f"{len(layouts)} layouts for {len(tokens)} slices")
    for k, lay in enumerate(layouts):
        if len(lay) and (lay.position.max() >= tokens.shape[1]
                         or not np.all(tokens[k, lay.position] == codec.EHI)):
            raise nx.ContractError(f"layout {k} does not match its slice")


def compute_targets(online: dict[str, Tensor], target: dict[str, Tensor], cfg: ModelConfig,
                    tokens, layouts, gamma: float = 0.9, reward_scale: float = 30.0,
                    q_online: np.ndarray | None = None) -> TargetBatch:
    """Bellman targets for every action in a batch of slices; no gradient flows through them."""
    toks = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if isinstance(layouts, codec.Layout):
        layouts = [layouts]
    _check_layouts(toks, layouts)
    idx = index_batch(layouts)
    with nx.no_tape():
        if q_online is None:
            q_online = forward(online, cfg, toks, idx.batch_idx, idx.pos_idx).numpy()
        q_target = forward(target, cfg, toks, idx.batch_idx, idx.pos_idx).numpy()
    y = bellman_targets(q_online, q_target, idx, gamma, reward_scale)
    return TargetBatch(y, idx.batch_idx, idx.pos_idx, idx.actions, idx.terminal)


def masked_loss(q_pred: Tensor, targets, weights=None) -> Tensor:
    """Mean squared Bellman error over positions whose weight is nonzero."""
    y = targets.y if isinstance(targets, TargetBatch) else np.asarray(targets)
    if q_pred.shape != np.shape(y):
        raise nx.ContractError(f"{q_pred.shape[0] if q_pred.shape else 1} predictions for {np.size(y)} targets")
    return nx.mse(q_pred, y, weights)


def polyak_update(target: dict[str, Tensor], online: dict[str, Tensor], alpha: float) -> dict[str, Tensor]:
    """Elementwise ``alpha * online + (1 - alpha) * target``."""
    if target.keys() != online.keys():
        raise nx.ContractError("target and online parameters differ in names")
    out = {}
    for k, phi in target.items():
        theta = online[k]
        if phi.shape != theta.shape:
            raise nx.ContractError(f"shape mismatch for {k}: {phi.shape} vs {theta.shape}")
        out[k] = Tensor(alpha * theta.data + (1.0 - alpha) * phi.data, name=k, dtype=phi.dtype)
    return out


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        return grads
    norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


@dataclass
class TrainState:
    params: dict
    target: dict
    opt: OptimizerState
    batch: int = 0
    log: list = field(default_factory=list)


def dqn_loss(params, target, cfg: ModelConfig, tokens, idx: BatchIndex, tcfg: TrainConfig):
    """Loss tensor and targets for one batch; must be called under an active tape."""
    q_all = forward(params, cfg, tokens, idx.batch_idx, idx.pos_idx)
    with nx.no_tape():
        q_tgt = forward(target, cfg, tokens, idx.batch_idx, idx.pos_idx).numpy()
    y = bellman_targets(q_all.numpy(), q_tgt, idx, tcfg.gamma, tcfg.reward_scale)
    q_taken = nx.pick(q_all, idx.actions)
    return masked_loss(q_taken, y), y


def train_step(state: TrainState, cfg: ModelConfig, tcfg: TrainConfig, tokens, idx: BatchIndex,
               slice_ids=()) -> dict:
    with nx.Tape() as tape:
        loss, y = dqn_loss(state.params, state.target, cfg, tokens, idx, tcfg)
    lval = loss.item()
    if not np.isfinite(lval):
        raise TrainingDiverged(f"non-finite loss at batch {state.batch}; slices {list(map(int, slice_ids))}")
    grads = backward(loss, tape, state.params)
    lr = state.opt.effective_lr()
    state.params, state.opt = adam_step(state.params, _clip(grads, tcfg.grad_clip), state.opt)
    state.target = polyak_update(state.target, state.params, tcfg.alpha)
    state.batch += 1
    row = {"batch": state.batch, "loss": lval, "mean_abs_target": float(np.abs(y).mean()),
           "lr": lr, "alpha": tcfg.alpha}
    state.log.append(row)
    return row


def backward(loss, tape, params) -> dict[str, np.ndarray]:
    g = nx.backward(loss, tape)
    return {k: g[p] for k, p in params.items()}


class SliceCache:
    """Lazily parsed layouts for a fixed token array."""

    def __init__(self, tokens: np.ndarray):
        self.tokens = tokens
        self._layouts: dict[int, codec.Layout] = {}
        self._ends: dict[int, int] = {}

    def layout(self, i: int) -> codec.Layout:
        if i not in self._layouts:
            self._layouts[i] = codec.layout(self.tokens[i])
            nz = np.flatnonzero(self.tokens[i] != codec.PAD)
            self._ends[i] = int(nz[-1]) + 1 if len(nz) else 1
        return self._layouts[i]

    def batch(self, ids) -> tuple[np.ndarray, BatchIndex]:
        lays = [self.layout(int(i)) for i in ids]
        # trailing PAD never influences earlier positions, so trim to the longest content
        end = max(self._ends[int(i)] for i in ids)
        return self.tokens[np.asarray(ids)][:, :end].astype(np.int64), index_batch(lays)


def train(tokens: np.ndarray, cfg: ModelConfig, tcfg: TrainConfig, params=None, target=None,
          opt: OptimizerState | None = None, start_batch: int = 0,
          on_batch: Callable[[TrainState, dict], None] | None = None) -> TrainState:
    """Run ``tcfg.total_batches`` DQN updates on slices drawn from ``tokens`` (n_slices, slice_len)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != tcfg.slice_len:
        raise ValueError(f"dataset slices have shape {tokens.shape}, expected (*, {tcfg.slice_len})")
    if tcfg.slice_len > cfg.max_context:
        raise ValueError("slice_len exceeds the model's max_context")
    rng = np.random.default_rng(tcfg.seed)
    init_rng, batch_rng = rng.spawn(2)
    if params is None:
        params = init_params(cfg, init_rng)
    if target is None:
        target = clone_params(params)
    if opt is None:
        opt = OptimizerState(base_lr=tcfg.base_lr, warmup_batches=tcfg.warmup_batches)
    state = TrainState(params, target, opt, batch=start_batch)
    cache = SliceCache(tokens)
    n = len(tokens)
    for _ in range(state.batch):  # keep the slice stream aligned when resuming
        batch_rng.choice(n, size=tcfg.batch_slices, replace=n < tcfg.batch_slices)
    while state.batch < tcfg.total_batches:
        ids = np.sort(batch_rng.choice(n, size=tcfg.batch_slices, replace=n < tcfg.batch_slices))
        toks, idx = cache.batch(ids)
        row = train_step(state, cfg, tcfg, toks, idx, ids)
        if on_batch is not None:
            on_batch(state, row)
    return state


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRIC_COLUMNS})


def save_checkpoint(path, params, cfg: ModelConfig, extra: dict | None = None) -> None:
    header = {"model": cfg.to_dict(), **(extra or {})}
    checkpoint.save(path, params, header)


def load_checkpoint(path) -> tuple[dict, ModelConfig, dict]:
    params, header = checkpoint.load(path)
    return params, ModelConfig.from_dict(header["model"]), header


def train_config_dict(tcfg: TrainConfig) -> dict:
    return asdict(tcfg)
