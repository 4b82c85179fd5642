import numpy as np
import pytest

from icrl import env
from icrl.codec import Episode, Step


def random_rollout(spec, rng, map_id=None):
    state, obs = env.reset(spec)
    steps, incoming = [], 0.0
    while not state.done:
        a = int(rng.integers(4))
        res = env.step(state, a)
        steps.append(Step(obs, incoming, a))
        obs, incoming = res.next_obs, res.reward
    return Episode(tuple(steps), obs, incoming, map_id=map_id)


def value_iteration(spec, gamma=0.9, iters=500):
    """Exact optimal Q for the deterministic map (holes and goal are absorbing)."""
    n = spec.width * spec.height
    q = np.zeros((n, 4))
    for _ in range(iters):
        v = q.max(axis=1)
        new = np.zeros_like(q)
        for s in range(n):
            if s in spec.holes or s == spec.goal:
                continue
            r, c = divmod(s, spec.width)
            for a, (dr, dc) in enumerate([(-1, 0), (1, 0), (0, -1), (0, 1)]):
                nr, nc = r + dr, c + dc
                s2 = nr * spec.width + nc if 0 <= nr < spec.height and 0 <= nc < spec.width else s
                reward = 1.0 if s2 == spec.goal else 0.0
                terminal = s2 == spec.goal or s2 in spec.holes
                new[s, a] = reward + (0.0 if terminal else gamma * v[s2])
        q = new
    return q


@pytest.fixture
def rollout():
    return random_rollout


@pytest.fixture(scope="session")
def small_maps():
    return env.generate_maps(np.random.default_rng(123), 12, (3, 4), 0.2)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for the summary, then assert."""
    def report(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        assert ok, line
    return report
