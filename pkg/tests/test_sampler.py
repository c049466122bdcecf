"""Cursor-walk sampler: coverage, uniformity, and the exhaustion reshuffle."""

import numpy as np
import pytest
from scipy import stats

from splitmix.base_models import init_sampler, sample_base_models
from splitmix import rngs


def make_sampler(m, seed=0):
    return init_sampler(m, rngs.rng_for(seed, rngs.SAMPLER))


def test_single_pick_returns_exactly_the_cursor_element():
    state = make_sampler(4)
    first = state.order[0]
    assert sample_base_models(state, 1, 4) == [int(first)]
    assert state.cursor == 1


def test_sampling_all_bases_returns_every_id():
    state = make_sampler(5)
    picked = sample_base_models(state, 5, 5)
    assert sorted(picked) == list(range(5))


def test_cursor_sweep_covers_each_base_exactly_once():
    m = 4
    state = make_sampler(m, seed=3)
    picks = [sample_base_models(state, 1, m)[0] for _ in range(m)]
    assert sorted(picks) == list(range(m))


def test_reshuffle_happens_before_selection_on_exhaustion():
    m = 3
    state = make_sampler(m, seed=1)
    for _ in range(m):
        sample_base_models(state, 1, m)
    assert state.cursor == m
    nxt = sample_base_models(state, 1, m)[0]
    assert state.cursor == 1          # reshuffled, then advanced once
    assert nxt == state.order[0]


def test_sweep_coverage_over_fuzzed_configurations():
    rng = np.random.default_rng(42)
    for trial in range(1000):
        m = int(rng.integers(1, 9))
        n = int(rng.integers(1, m + 1))
        state = make_sampler(m, seed=trial)
        sweeps = 3
        for _ in range(sweeps):
            picks = [sample_base_models(state, n, m)[0] for _ in range(m)]
            assert sorted(picks) == list(range(m)), (m, n, trial)


def test_out_of_range_requests_rejected():
    state = make_sampler(3)
    with pytest.raises(ValueError):
        sample_base_models(state, 4, 3)
    with pytest.raises(ValueError):
        sample_base_models(state, 0, 3)


def test_companion_selection_is_uniform_chi_square():
    m, n, calls = 5, 3, 10_000
    state = make_sampler(m, seed=7)
    companion_counts = np.zeros(m)
    for _ in range(calls):
        picked = sample_base_models(state, n, m)
        for other in picked[1:]:
            companion_counts[other] += 1
    # each id serves as companion only when not cursor-picked; the cursor
    # visits ids equally, so expected companion counts are uniform
    _, p = stats.chisquare(companion_counts)
    assert p > 0.01, (companion_counts, p)


def test_companion_uniformity_conditioned_on_cursor():
    m, n, calls = 4, 2, 10_000
    state = make_sampler(m, seed=11)
    counts = np.zeros((m, m))
    for _ in range(calls):
        cursor, companion = sample_base_models(state, n, m)
        counts[cursor, companion] += 1
    for cursor in range(m):
        row = np.delete(counts[cursor], cursor)
        _, p = stats.chisquare(row)
        assert p > 0.01, (cursor, row, p)
