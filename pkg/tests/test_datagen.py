import numpy as np
import pytest
from scipy import stats

from icrl import codec, datagen, env
from icrl.codec import Episode, Step
from icrl.datagen import EpisodeSet, QualityTier
from icrl.env import Action, MapSpec

from conftest import value_iteration


def test_value_iteration_oracle_2x2():
    q = value_iteration(MapSpec(2, 2, 0, 3))
    assert q[0, Action.RIGHT] == pytest.approx(0.9)
    assert q[0, Action.DOWN] == pytest.approx(0.9)
    assert q[1, Action.DOWN] == pytest.approx(1.0)


def test_tabular_2x2_converges_to_value_iteration():
    spec = MapSpec(2, 2, 0, 3)
    agent, _ = datagen.train_tabular(spec, 2000, np.random.default_rng(0))
    oracle = value_iteration(spec)
    assert abs(agent.q_table[0, Action.RIGHT] - oracle[0, Action.RIGHT]) < 0.05
    assert abs(agent.q_table[0, Action.DOWN] - oracle[0, Action.DOWN]) < 0.05


def test_tabular_3x3_greedy_is_optimal():
    spec = MapSpec(3, 3, 0, 8)
    agent, episodes = datagen.train_tabular(spec, 500, np.random.default_rng(1))
    assert len(episodes) == 500
    assert datagen.greedy_success_rate(agent, spec) >= 0.9
    # the greedy path's return equals the value-iteration optimum
    oracle = value_iteration(spec)
    state, obs = env.reset(spec)
    ret, k = 0.0, 0
    while not state.done:
        res = env.step(state, agent.greedy(obs))
        ret += 0.9 ** k * res.reward
        obs, k = res.next_obs, k + 1
    assert ret == pytest.approx(oracle[spec.start].max())


def test_tabular_records_every_episode():
    spec = MapSpec(3, 3, 0, 8, {4})
    _, eps = datagen.train_tabular(spec, 1, np.random.default_rng(0))
    assert len(eps) == 1
    _, eps = datagen.train_tabular(spec, 200, np.random.default_rng(0), map_id=5)
    assert [e.index for e in eps] == list(range(200))
    assert all(e.map_id == 5 for e in eps)
    assert any(e.success for e in eps) and any(not e.success for e in eps)
    for e in eps:
        assert e.success == (e.final_reward == 1.0)
        assert len(e) <= spec.max_steps
        assert codec.decode(codec.encode_episode(e)) == [e]


def _pool(n_success=50, n_fail=50):
    win = Episode([Step(0, 0.0, 3)], 1, 1.0)
    loss = Episode([Step(0, 0.0, 1)], 3, 0.0)
    return [win] * n_success + [loss] * n_fail


@pytest.mark.parametrize("tier,expected", [(QualityTier.HIGH, 5 / 6), (QualityTier.MID, 0.5), (QualityTier.LOW, 1 / 6)])
def test_tier_sampling_ratio(tier, expected):
    rng = np.random.default_rng(7)
    pool = _pool()
    frac = np.mean([datagen.sample_episode(pool, tier, rng).success for _ in range(10_000)])
    assert abs(frac - expected) <= 0.05


def test_tier_weights():
    assert (QualityTier.HIGH.weight_success, QualityTier.HIGH.weight_failure) == (5, 1)
    assert (QualityTier.MID.weight_success, QualityTier.MID.weight_failure) == (1, 1)
    assert (QualityTier.LOW.weight_success, QualityTier.LOW.weight_failure) == (1, 5)
    assert QualityTier.parse("low") is QualityTier.LOW


def test_sample_from_empty_pool():
    with pytest.raises(ValueError):
        datagen.sample_episode([], QualityTier.MID, np.random.default_rng(0))


@pytest.fixture(scope="module")
def indexed_pools():
    pools = {}
    for m in range(5):
        eps = []
        for k in range(200):
            ok = k % 3 == 0
            eps.append(Episode([Step(0, 0.0, k % 4)], 1 if ok else 2, 1.0 if ok else 0.0, map_id=m, index=k))
        pools[m] = eps
    return pools


def test_set_lengths_uniform(indexed_pools):
    rng = np.random.default_rng(0)
    sets = datagen.build_sets(indexed_pools, QualityTier.MID, rng, 10_000)
    lengths = np.array([len(s.episodes) for s in sets])
    counts = np.bincount(lengths, minlength=41)[20:41]
    assert lengths.min() >= 20 and lengths.max() <= 40
    _, p = stats.chisquare(counts)
    assert p > 0.001
    assert all(len({e.map_id for e in s.episodes}) == 1 and s.episodes[0].map_id == s.map_id for s in sets)


def test_sets_have_no_chronological_order(indexed_pools):
    rng = np.random.default_rng(1)
    sets = datagen.build_sets(indexed_pools, QualityTier.MID, rng, 1000)
    rho = np.mean([stats.spearmanr(np.arange(len(s.episodes)), [e.index for e in s.episodes])[0] for s in sets])
    assert abs(rho) < 0.05


def test_episode_set_invariants():
    with pytest.raises(ValueError):
        EpisodeSet(0, _pool(5, 5))


def test_assemble_shuffles_sets(indexed_pools):
    sets = datagen.build_sets(indexed_pools, QualityTier.MID, np.random.default_rng(2), 30)
    a = datagen.assemble_slices(sets, 256, np.random.default_rng(10))
    b = datagen.assemble_slices(sets, 256, np.random.default_rng(11))
    ea = [ep for s in a for ep in codec.decode(s.tokens)]
    eb = [ep for s in b for ep in codec.decode(s.tokens)]
    assert ea != eb
    key = lambda e: (e.steps, e.final_obs)
    assert sorted(ea, key=key) == sorted(eb, key=key)
    assert all(len(s.tokens) == 256 for s in a)


@pytest.fixture(scope="module")
def tiny_dataset():
    return datagen.generate_dataset(n_maps=6, tier="mid", seed=3, size_range=(3, 4),
                                    episodes_per_map=60, n_sets=8, slice_len=1024)


def test_dataset_roundtrip_and_determinism(tiny_dataset, tmp_path):
    tiny_dataset.save(tmp_path / "a")
    again = datagen.generate_dataset(n_maps=6, tier="mid", seed=3, size_range=(3, 4),
                                     episodes_per_map=60, n_sets=8, slice_len=1024)
    again.save(tmp_path / "b")
    for name in ("manifest.json", "tokens.u16", "mask.u8", "maps.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    loaded = datagen.Dataset.load(tmp_path / "a")
    assert np.array_equal(loaded.tokens, tiny_dataset.tokens)
    assert np.array_equal(loaded.loss_mask, tiny_dataset.loss_mask)
    assert loaded.maps == tiny_dataset.maps
    m = loaded.manifest
    assert m["slice_count"] == len(loaded) and m["map_count"] == 6 and m["tier"] == "mid"
    assert m["codec_version"] == codec.CODEC_VERSION


def test_dataset_slices_decode(tiny_dataset):
    assert tiny_dataset.tokens.shape[1] == 1024
    for toks, mask in zip(tiny_dataset.tokens, tiny_dataset.loss_mask):
        eps = codec.decode(toks)
        assert eps
        lay = codec.layout(toks)
        assert mask.nonzero()[0].tolist() == lay.position.tolist()


def test_default_map_count_is_distinct():
    maps = env.generate_maps(np.random.default_rng(0), 250, (3, 5), 0.2)
    assert len({m.key() for m in maps}) == 250
