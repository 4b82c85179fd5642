"""Deterministic SVG output: map grids with a stepped path, and reward curves."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import env
from .codec import Episode
from .env import MapSpec

CELL = 40
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def check_episode(spec: MapSpec, episode: Episode) -> None:
    """Replay the episode's actions on ``spec``; raise if any observation disagrees."""
    spec.validate()
    if not episode.steps:
        if episode.final_obs != spec.start:
            raise ValueError("empty episode must sit on the start tile")
        return
    state, obs = env.reset(spec)
    for i, st in enumerate(episode.steps):
        if st.obs != obs:
            raise ValueError(f"step {i}: episode is at tile {st.obs} but the map puts it at {obs}")
        if state.done:
            raise ValueError(f"step {i}: episode continues after the map ended it")
        obs = env.step(state, st.action).next_obs
    if obs != episode.final_obs:
        raise ValueError(f"episode ends at tile {episode.final_obs} but the map ends at {obs}")


def _center(spec: MapSpec, tile: int) -> tuple[float, float]:
    r, c = divmod(tile, spec.width)
    return c * CELL + CELL / 2, r * CELL + CELL / 2


def render_trajectory(spec: MapSpec, episode: Episode | None = None, title: str = "") -> str:
    """Grid with start (S), goal (G) and holes, plus the episode's path as arrow segments."""
    if episode is not None:
        check_episode(spec, episode)
    w, h = spec.width * CELL, spec.height * CELL
    top = 20 if title else 0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h + top}" viewBox="0 0 {w} {h + top}">',
           '<defs><marker id="arrow" markerWidth="8" markerHeight="8" refX="6" refY="4" orient="auto">'
           '<path d="M0,0 L8,4 L0,8 z" fill="#d62728"/></marker></defs>']
    if title:
        out.append(f'<text x="4" y="14" font-family="monospace" font-size="12">{title}</text>')
    out.append(f'<g transform="translate(0,{top})">')
    for t in range(spec.n_tiles):
        r, c = divmod(t, spec.width)
        fill = "#333333" if t in spec.holes else "#cfe8ff"
        if t == spec.goal:
            fill = "#ffd700"
        out.append(f'<rect x="{c * CELL}" y="{r * CELL}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#ffffff"/>')
    for t, label in ((spec.start, "S"), (spec.goal, "G")):
        x, y = _center(spec, t)
        out.append(f'<text x="{_fmt(x)}" y="{_fmt(y + 5)}" text-anchor="middle" font-family="monospace" '
                   f'font-size="14">{label}</text>')
    if episode is not None:
        tiles = episode.tiles()
        for a, b in zip(tiles, tiles[1:]):
            if a == b:
                continue
            (x1, y1), (x2, y2) = _center(spec, a), _center(spec, b)
            out.append(f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
                       'stroke="#d62728" stroke-width="3" marker-end="url(#arrow)"/>')
    out.append("</g></svg>")
    return "\n".join(out) + "\n"


def render_curves(curves: Mapping[str, Sequence[float]], stderr: Mapping[str, Sequence[float]] | None = None,
                  title: str = "", marker: int | None = None, width: int = 480, height: int = 300) -> str:
    """Line plot of per-episode mean reward (y in [0, 1]) with optional error bands."""
    pad = 40
    n = max(len(c) for c in curves.values())
    pw, ph = width - 2 * pad, height - 2 * pad

    def xy(i, v):
        x = pad + (i / max(n - 1, 1)) * pw
        return x, pad + (1.0 - float(v)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect x="{pad}" y="{pad}" width="{pw}" height="{ph}" fill="none" stroke="#000000"/>',
           f'<text x="{pad}" y="{pad - 10}" font-family="monospace" font-size="12">{title}</text>']
    for v in (0.0, 0.5, 1.0):
        _, y = xy(0, v)
        out.append(f'<text x="{pad - 6}" y="{_fmt(y + 4)}" text-anchor="end" font-family="monospace" '
                   f'font-size="10">{v:g}</text>')
    if marker is not None:
        x, _ = xy(marker - 1, 0)
        out.append(f'<line x1="{_fmt(x)}" y1="{pad}" x2="{_fmt(x)}" y2="{pad + ph}" stroke="#888888" '
                   'stroke-dasharray="4,3"/>')
    for k, (label, curve) in enumerate(curves.items()):
        color = COLORS[k % len(COLORS)]
        curve = np.asarray(curve, dtype=float)
        if stderr and label in stderr:
            se = np.asarray(stderr[label], dtype=float)
            upper = [xy(i, min(v + s, 1.0)) for i, (v, s) in enumerate(zip(curve, se))]
            lower = [xy(i, max(v - s, 0.0)) for i, (v, s) in enumerate(zip(curve, se))][::-1]
            pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in upper + lower)
            out.append(f'<polygon points="{pts}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in (xy(i, v) for i, v in enumerate(curve)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - pad + 4}" y="{pad + 14 * (k + 1)}" font-family="monospace" font-size="10" '
                   f'fill="{color}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
