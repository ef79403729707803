from collections import Counter
from dataclasses import replace
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftfix.clusters import generate_clusters
from driftfix.seeds import spawn_rng
from driftfix.streams import (
    EpisodeBudget,
    PoolExhaustedError,
    StreamConfig,
    StreamFileError,
    episode_budget,
    load_stream,
    next_major_cluster,
    round_half_away,
    sample_stream,
    sample_stream_family,
    save_stream,
)

from conftest import small_spec


def cfg(**kw) -> StreamConfig:
    base = dict(T=10, b=16, alpha=0.9, beta=0.5, gamma=0.8, seed=1)
    base.update(kw)
    return StreamConfig(**base)


# --- budgets -----------------------------------------------------------------


def test_budget_first_episode_fully_upstream():
    assert episode_budget(1, cfg(b=64, alpha=0.9, gamma=0.8)) == EpisodeBudget(64, 0, 0)


def test_budget_second_episode():
    assert episode_budget(2, cfg(b=64, alpha=0.9, gamma=0.8)) == EpisodeBudget(58, 6, 5)


def test_budget_late_episode_fully_ood():
    assert episode_budget(50, cfg(b=64, alpha=0.9, gamma=0.8)) == EpisodeBudget(0, 64, 51)


@given(x=st.floats(min_value=0.0, max_value=1e6, allow_nan=False))
def test_round_half_away_matches_decimal_oracle(x):
    expected = int(Decimal(repr(x)).quantize(Decimal("1"), rounding=ROUND_HALF_UP))
    assert round_half_away(x) == expected


@given(
    t=st.integers(min_value=1, max_value=400),
    b=st.integers(min_value=1, max_value=256),
    alpha=st.floats(min_value=0.01, max_value=1.0),
    gamma=st.floats(min_value=0.0, max_value=1.0),
)
@settings(max_examples=200)
def test_budget_identity(t, b, alpha, gamma):
    budget = episode_budget(t, cfg(b=b, alpha=alpha, gamma=gamma))
    assert budget.upstream + budget.ood == b
    assert 0 <= budget.ood_major <= budget.ood
    assert budget.upstream >= 0


def test_budget_monotone_decay():
    c = cfg(T=200, b=64, alpha=0.93)
    series = [episode_budget(t, c).upstream for t in range(1, 201)]
    assert all(a >= b for a, b in zip(series, series[1:]))


# --- markov chain ------------------------------------------------------------


def test_major_cluster_always_stays_at_beta_one():
    rng = spawn_rng(0, "chain")
    assert all(next_major_cluster(3, 5, 1.0, rng) == 3 for _ in range(50))


def test_major_cluster_forced_switch_two_clusters():
    rng = spawn_rng(0, "chain")
    assert all(next_major_cluster(1, 2, 0.0, rng) == 2 for _ in range(50))


def test_major_cluster_single_cluster_is_fixed():
    rng = spawn_rng(0, "chain")
    assert next_major_cluster(1, 1, 0.0, rng) == 1


def test_major_cluster_monte_carlo_rates():
    rng = spawn_rng(42, "chain-mc")
    n, beta, draws = 5, 0.5, 10_000
    stays = 0
    targets: Counter[int] = Counter()
    for _ in range(draws):
        c = next_major_cluster(2, n, beta, rng)
        if c == 2:
            stays += 1
        else:
            targets[c] += 1
    assert abs(stays / draws - beta) < 0.03
    switches = sum(targets.values())
    for other in (1, 3, 4, 5):
        assert abs(targets[other] / switches - 1 / (n - 1)) < 0.03


# --- stream sampling ---------------------------------------------------------


def test_stream_alpha_one_is_fully_upstream(small_clusters):
    stream = sample_stream(small_clusters, cfg(T=1, b=8, alpha=1.0))
    (ep,) = stream.episodes
    assert len(ep.examples) == 8
    assert all(ex.cluster_id == 0 for ex in ep.examples)


def recount_episode(ep):
    """Independent per-cluster recount for comparison with the budget."""
    counts = Counter(ex.cluster_id for ex in ep.examples)
    major = counts.pop(ep.major_cluster, 0) if ep.major_cluster != 0 else 0
    upstream = counts.pop(0, 0)
    if ep.major_cluster == 0:
        major = 0
    other = sum(counts.values())
    return upstream, major, other


def test_stream_episode_recounts_match_budgets(small_clusters):
    rng = np.random.default_rng(0)
    for case in range(20):
        c = cfg(
            T=int(rng.integers(1, 12)),
            b=int(rng.integers(4, 40)),
            alpha=float(rng.uniform(0.5, 1.0)),
            beta=float(rng.uniform(0, 1)),
            gamma=float(rng.uniform(0, 1)),
            seed=case,
        )
        stream = sample_stream(small_clusters, c)
        assert len(stream.episodes) == c.T
        for t, ep in enumerate(stream.episodes, start=1):
            assert ep.t == t
            assert len(ep.examples) == c.b
            ids = [ex.id for ex in ep.examples]
            assert len(ids) == len(set(ids)), "example id repeated within an episode"
            budget = episode_budget(t, c)
            assert ep.budget == budget
            upstream, major, other = recount_episode(ep)
            assert upstream == budget.upstream
            assert major == budget.ood_major
            assert other == budget.ood - budget.ood_major


def test_stream_deterministic(small_clusters):
    a = sample_stream(small_clusters, cfg(seed=77))
    b = sample_stream(small_clusters, cfg(seed=77))
    assert a == b
    c = sample_stream(small_clusters, cfg(seed=78))
    assert a != c


def test_stream_heldout_only_from_heldout_pools(small_clusters):
    stream = sample_stream(small_clusters, cfg(T=6, b=12, heldout_per_cluster=20))
    heldout_ids = {e.id for pool in small_clusters.heldout for e in pool}
    assert stream.heldout_set
    assert all(ex.id in heldout_ids for ex in stream.heldout_set)
    present = {ex.cluster_id for ep in stream.episodes for ex in ep.examples}
    assert {ex.cluster_id for ex in stream.heldout_set} == present


def test_stream_pool_exhaustion_names_cluster(small_clusters):
    with pytest.raises(PoolExhaustedError, match="cluster 0"):
        sample_stream(small_clusters, cfg(T=1, b=10_000, alpha=1.0))


def test_stream_no_ood_clusters_requires_alpha_one():
    cs = generate_clusters(small_spec(shifts=()))
    stream = sample_stream(cs, cfg(T=5, b=8, alpha=1.0))
    assert all(ex.cluster_id == 0 for ep in stream.episodes for ex in ep.examples)
    with pytest.raises(PoolExhaustedError, match="no OOD clusters"):
        sample_stream(cs, cfg(T=5, b=8, alpha=0.5))


def test_stream_without_global_replacement_consumes_pools(small_clusters):
    c = cfg(T=8, b=16, alpha=1.0, replace_across_episodes=False)
    stream = sample_stream(small_clusters, c)
    ids = [ex.id for ep in stream.episodes for ex in ep.examples]
    assert len(ids) == len(set(ids)), "global no-replacement must never repeat an id"


def test_stream_family_split_and_determinism(small_clusters):
    val, test = sample_stream_family(small_clusters, cfg(), 2, 1, base_seed=5)
    assert [s.role for s in val] == ["validation", "validation"]
    assert [s.role for s in test] == ["test"]
    episodes = lambda s: [tuple(ex.id for ex in ep.examples) for ep in s.episodes]
    assert episodes(val[0]) != episodes(val[1])
    val2, test2 = sample_stream_family(small_clusters, cfg(), 2, 1, base_seed=5)
    assert val == val2 and test == test2


@pytest.mark.parametrize(
    "bad",
    [
        dict(T=0),
        dict(b=0),
        dict(alpha=0.0),
        dict(alpha=1.5),
        dict(beta=-0.1),
        dict(gamma=1.01),
    ],
)
def test_config_validation(bad, small_clusters):
    with pytest.raises(ValueError):
        sample_stream(small_clusters, cfg(**bad))


# --- persistence -------------------------------------------------------------


def test_stream_roundtrip(tmp_path, small_clusters):
    stream = sample_stream(small_clusters, cfg(T=4, b=10, seed=13))
    path = tmp_path / "stream.tsv"
    save_stream(stream, path, small_clusters)
    assert load_stream(path, small_clusters) == stream


def test_stream_load_rejects_wrong_clusters(tmp_path, small_clusters):
    stream = sample_stream(small_clusters, cfg(T=2, b=6))
    path = tmp_path / "stream.tsv"
    save_stream(stream, path, small_clusters)
    other = generate_clusters(small_spec(seed=99))
    with pytest.raises(StreamFileError, match="digest"):
        load_stream(path, other)


def test_stream_family_reference_counts(small_clusters):
    # the reference protocol samples 32 validation and 8 test streams
    val, test = sample_stream_family(
        small_clusters, cfg(T=2, b=6, heldout_per_cluster=5), 32, 8, base_seed=3
    )
    assert len(val) == 32 and len(test) == 8
    assert all(s.role == "validation" for s in val)
    assert all(s.role == "test" for s in test)
