"""Role-delimited token serialization of episodes.

Each episode is laid out as::

    BOT
      per step:  [SHI obs EHI <tile> EID]
                 [SHI rew EHI <r>    EID]   only if the incoming reward is nonzero
                 [SHI act EHI <word> EID]
      final:     [SHI obs EHI <tile> EID] [SHI rew EHI <r> EID]?
    EOT

The Q-values for a step are read at the EHI token of its action block, i.e.
just before the action token is emitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .env import MAX_TILES, Action

CODEC_VERSION = 1

PAD, BOT, EOT, SHI, EHI, EID = range(6)
ROLE_OBS, ROLE_ACT, ROLE_REW = 6, 7, 8
STATE_BASE = 9
ACTION_BASE = STATE_BASE + MAX_TILES  # 58
REWARD_TOKEN = ACTION_BASE + 4  # 62
VOCAB_SIZE = REWARD_TOKEN + 1  # 63

_SPECIAL_NAMES = ["<PAD>", "<BOT>", "<EOT>", "<SHI>", "<EHI>", "<EID>", "observation", "action", "reward"]


def surface(token: int) -> str:
    if token < STATE_BASE:
        return _SPECIAL_NAMES[token]
    if token < ACTION_BASE:
        return str(token - STATE_BASE)
    if token < REWARD_TOKEN:
        return Action(token - ACTION_BASE).word
    if token == REWARD_TOKEN:
        return "1.0"
    raise ValueError(f"token id {token} outside vocabulary")


def vocab_table() -> str:
    """Tab-separated ``id<TAB>surface`` lines for debugging."""
    lines = [f"# codec version {CODEC_VERSION}"]
    lines += [f"{i}\t{surface(i)}" for i in range(VOCAB_SIZE)]
    return "\n".join(lines) + "\n"


class DecodeError(ValueError):
    def __init__(self, offset: int, message: str):
        super().__init__(f"token {offset}: {message}")
        self.offset = offset


class SliceError(ValueError):
    pass


class Step(NamedTuple):
    obs: int
    reward: float  # reward received on arriving at ``obs``
    action: int


@dataclass(frozen=True)
class Episode:
    steps: tuple
    final_obs: int
    final_reward: float
    map_id: object = field(default=None, compare=False)
    index: int | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(Step(*s) for s in self.steps))

    @property
    def success(self) -> bool:
        return self.final_reward == 1.0

    def __len__(self) -> int:
        return len(self.steps)

    def tiles(self) -> list[int]:
        return [s.obs for s in self.steps] + [self.final_obs]


class ActionPosition(NamedTuple):
    position: int
    action: int
    episode: int
    is_terminal: bool
    reward_after: float


@dataclass
class TokenStream:
    tokens: np.ndarray
    action_positions: list
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)


def _block(role: int, value: int) -> list[int]:
    return [SHI, role, EHI, value, EID]


def _reward_token(r: float) -> int:
    if r != 1.0:
        raise ValueError(f"only reward 1.0 has a token, got {r}")
    return REWARD_TOKEN


def obs_block(tile: int) -> list[int]:
    return _block(ROLE_OBS, STATE_BASE + int(tile))


def reward_block(r: float) -> list[int]:
    return _block(ROLE_REW, _reward_token(r)) if r != 0 else []


def action_prefix() -> list[int]:
    """Tokens up to and including the action block's EHI (the Q read position)."""
    return [SHI, ROLE_ACT, EHI]


def action_suffix(action: int) -> list[int]:
    return [ACTION_BASE + int(action), EID]


def encode_episode(ep: Episode, episode_index: int = 0) -> TokenStream:
    return encode_episodes([ep], first_index=episode_index)


def encode_episodes(episodes: Iterable[Episode], first_index: int = 0) -> TokenStream:
    tokens: list[int] = []
    positions: list[ActionPosition] = []
    for k, ep in enumerate(episodes, start=first_index):
        tokens.append(BOT)
        n = len(ep.steps)
        for i, st in enumerate(ep.steps):
            tokens += obs_block(st.obs) + reward_block(st.reward) + action_prefix()
            after = ep.steps[i + 1].reward if i + 1 < n else ep.final_reward
            positions.append(ActionPosition(len(tokens) - 1, int(st.action), k, i + 1 == n, float(after)))
            tokens += action_suffix(st.action)
        tokens += obs_block(ep.final_obs) + reward_block(ep.final_reward)
        tokens.append(EOT)
    arr = np.asarray(tokens, dtype=np.int64)
    mask = np.zeros(len(arr), dtype=np.uint8)
    mask[[p.position for p in positions]] = 1
    return TokenStream(arr, positions, mask)


def _read_block(tokens, i: int, n: int) -> tuple[int, int, int]:
    if i + 5 > n:
        raise DecodeError(i, "truncated block")
    if tokens[i] != SHI:
        raise DecodeError(i, f"expected <SHI>, found {surface_safe(tokens[i])}")
    role = tokens[i + 1]
    if role not in (ROLE_OBS, ROLE_ACT, ROLE_REW):
        raise DecodeError(i + 1, f"expected a role token, found {surface_safe(role)}")
    if tokens[i + 2] != EHI:
        raise DecodeError(i + 2, f"expected <EHI>, found {surface_safe(tokens[i + 2])}")
    if tokens[i + 4] != EID:
        raise DecodeError(i + 4, f"expected <EID>, found {surface_safe(tokens[i + 4])}")
    value = tokens[i + 3]
    if role == ROLE_OBS and not STATE_BASE <= value < ACTION_BASE:
        raise DecodeError(i + 3, "observation block without a tile token")
    if role == ROLE_ACT and not ACTION_BASE <= value < REWARD_TOKEN:
        raise DecodeError(i + 3, "action block without an action token")
    if role == ROLE_REW and value != REWARD_TOKEN:
        raise DecodeError(i + 3, "reward block without a reward token")
    return role, value, i + 5


def surface_safe(tok) -> str:
    try:
        return surface(int(tok))
    except ValueError:
        return f"#{int(tok)}"


def _parse(tokens) -> list[tuple[Episode, list[tuple[int, int]]]]:
    """Parse a stream into episodes plus the (EHI position, action) pairs of each."""
    toks = [int(t) for t in tokens]
    n = len(toks)
    end = n
    while end > 0 and toks[end - 1] == PAD:
        end -= 1
    out = []
    i = 0
    while i < end:
        if toks[i] != BOT:
            raise DecodeError(i, f"expected <BOT>, found {surface_safe(toks[i])}")
        i += 1
        steps, acts = [], []
        while True:
            role, value, i = _read_block(toks, i, end)
            if role != ROLE_OBS:
                raise DecodeError(i - 5, "expected an observation block")
            obs = value - STATE_BASE
            reward = 0.0
            if i < end and toks[i] == SHI and i + 1 < end and toks[i + 1] == ROLE_REW:
                _, _, i = _read_block(toks, i, end)
                reward = 1.0
            if i >= end:
                raise DecodeError(i, "stream ends inside an episode")
            if toks[i] == EOT:
                i += 1
                out.append((Episode(steps, obs, reward), acts))
                break
            role, value, i = _read_block(toks, i, end)
            if role != ROLE_ACT:
                raise DecodeError(i - 5, "expected an action block or <EOT>")
            steps.append(Step(obs, reward, value - ACTION_BASE))
            acts.append((i - 3, value - ACTION_BASE))
    return out


def decode(ts) -> list[Episode]:
    """Inverse of :func:`encode_episodes`; a trailing run of PAD is ignored."""
    tokens = ts.tokens if isinstance(ts, TokenStream) else ts
    return [ep for ep, _ in _parse(tokens)]


@dataclass
class Layout:
    """Per-action arrays aligned with a token stream (``next_position`` is -1 when terminal)."""

    position: np.ndarray
    next_position: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    terminal: np.ndarray
    episode: np.ndarray

    def __len__(self) -> int:
        return len(self.position)

    def rows(self) -> list[tuple]:
        return [
            (int(p), None if q < 0 else int(q), float(r), bool(t))
            for p, q, r, t in zip(self.position, self.next_position, self.reward, self.terminal)
        ]


def layout(ts) -> Layout:
    tokens = ts.tokens if isinstance(ts, TokenStream) else ts
    pos, nxt, act, rew, term, epi = [], [], [], [], [], []
    for k, (ep, acts) in enumerate(_parse(tokens)):
        for i, (p, a) in enumerate(acts):
            last = i + 1 == len(acts)
            pos.append(p)
            nxt.append(-1 if last else acts[i + 1][0])
            act.append(a)
            rew.append(ep.final_reward if last else ep.steps[i + 1].reward)
            term.append(last)
            epi.append(k)
    return Layout(
        np.asarray(pos, dtype=np.int64), np.asarray(nxt, dtype=np.int64),
        np.asarray(act, dtype=np.int64), np.asarray(rew, dtype=np.float64),
        np.asarray(term, dtype=bool), np.asarray(epi, dtype=np.int64),
    )


def action_targets_layout(ts) -> list[tuple]:
    """(pos_t, pos_{t+1} or None, reward after the action, is_terminal) per action."""
    return layout(ts).rows()


@dataclass
class Slice:
    tokens: np.ndarray  # uint16, exactly slice_len
    loss_mask: np.ndarray  # uint8
    n_episodes: int


def pack_slices(episodes: Sequence[Episode], slice_len: int) -> list[Slice]:
    """Pack episodes in order into fixed-length slices, padding instead of splitting."""
    slices = []
    buf: list[int] = []
    mask: list[int] = []
    count = 0

    def flush():
        nonlocal buf, mask, count
        pad = slice_len - len(buf)
        slices.append(Slice(np.asarray(buf + [PAD] * pad, dtype=np.uint16),
                            np.asarray(mask + [0] * pad, dtype=np.uint8), count))
        buf, mask, count = [], [], 0

    for k, ep in enumerate(episodes):
        ts = encode_episode(ep)
        if len(ts) > slice_len:
            label = ep.index if ep.index is not None else k
            raise SliceError(f"episode {label} (map {ep.map_id}) has {len(ts)} tokens > slice_len {slice_len}")
        if len(buf) + len(ts) > slice_len:
            flush()
        buf += ts.tokens.tolist()
        mask += ts.loss_mask.tolist()
        count += 1
    if buf:
        flush()
    return slices
