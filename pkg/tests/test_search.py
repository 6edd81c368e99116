import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from npu_cosearch import search, techdb
from npu_cosearch.search import Bounds, HistoryEntry, Metrics, SearchHistory, pareto_front, run_search, scalarize
from npu_cosearch.nn_ir import DEFAULT_SPACE, sample_random

B = Bounds()


def test_lambda_range_and_determinism():
    for s in range(200):
        lam = search.sample_lambdas(B, np.random.default_rng(s))
        assert np.all(lam >= 0) and np.all(lam <= 1 / B.as_array())
    a = search.sample_lambdas(B, np.random.default_rng(1))
    assert np.array_equal(a, search.sample_lambdas(B, np.random.default_rng(1)))
    huge = Bounds(1e300, 1e300, 1e300, 1e300)
    assert np.all(search.sample_lambdas(huge, np.random.default_rng(0)) < 1e-299)


def test_scalarize_examples():
    lam = 1 / B.as_array()
    assert scalarize(Metrics(0, 0, 0, 0), lam) == 0
    assert scalarize(Metrics(0.05, 4.0, 20000, 140000), lam) == pytest.approx(140000 / 150000)
    assert scalarize(Metrics(0.05, 6.0, 20000, 140000), lam) == pytest.approx(1.2)


def test_bounds_positive():
    with pytest.raises(ValueError):
        Bounds(b_power=0)


@settings(max_examples=200)
@given(st.lists(st.floats(0.01, 1e6), min_size=4, max_size=4), st.floats(0.1, 10), st.integers(0, 3))
def test_scale_robustness(m, c, i):
    b = np.array([0.07, 5.0, 25000.0, 150000.0])
    m2, b2 = np.array(m), b.copy()
    m2[i] *= c
    b2[i] *= c
    lam, lam2 = 1 / b, 1 / b2
    assert np.argmax(lam * np.array(m)) == np.argmax(lam2 * m2) or \
        np.isclose(np.max(lam * np.array(m)), np.max(lam2 * m2))


def test_control_flow_b5_s3():
    h = run_search(budget=5, pop_size=3, seed=1)
    assert [e.index for e in h] == [1, 2, 3, 4, 5]
    assert [e.origin for e in h][:3] == ["random"] * 3
    assert all(e.origin.startswith("mutate:") and e.parent in (1, 2, 3, 4) for e in h.entries[3:])


def test_selects_best_scoring_parent():
    h = run_search(budget=40, pop_size=10, seed=4)
    for e in h.entries[10:]:
        rng = np.random.default_rng(e.seed)
        lam = search.sample_lambdas(B, rng)
        window = [x for x in h.entries if e.index - 10 <= x.index < e.index]
        best = min(scalarize(x.metrics, lam) for x in window)
        parent = next(x for x in window if x.index == e.parent)
        assert scalarize(parent.metrics, lam) == best


def test_determinism_and_workers():
    a = run_search(budget=60, pop_size=20, seed=3).to_jsonl()
    b = run_search(budget=60, pop_size=20, seed=3, workers=4).to_jsonl()
    assert a == b
    assert run_search(budget=60, pop_size=20, seed=5).to_jsonl() != a


def test_failures_recorded_and_budget_exact():
    tiny = techdb.TechDatabase(techdb.load_default().macros[:3], techdb.load_default().logic)
    h = run_search(budget=25, pop_size=5, tech=tiny, seed=0)
    assert len(h) == 25
    assert all(e.failure and e.metrics == Metrics.failed() for e in h)


def test_history_jsonl_round_trip():
    h = run_search(budget=12, pop_size=4, seed=2)
    assert SearchHistory.from_jsonl(h.to_jsonl()).to_jsonl() == h.to_jsonl()
    with pytest.raises(ValueError):
        h.append(h.entries[0])


def _hist(points):
    cand = sample_random(DEFAULT_SPACE, np.random.default_rng(0))
    return [HistoryEntry(i + 1, cand, Metrics(*p), 0) for i, p in enumerate(points)]


def test_pareto_small_cases():
    one = _hist([(0.1, 1, 1, 1)])
    assert pareto_front(one) == one
    two = _hist([(0.1, 1, 1, 1), (0.2, 1, 1, 1)])
    assert [e.index for e in pareto_front(two)] == [1]
    with pytest.raises(ValueError):
        pareto_front([])


def test_pareto_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pts = [tuple(map(float, rng.integers(0, 6, 4))) for _ in range(100)]
        front = pareto_front(_hist(pts))
        assert [e.index - 1 for e in front] == oracles.brute_pareto(pts)


def test_hypervolume_2d():
    assert search.hypervolume_2d([(0.5, 0.5)], (1, 1)) == 0.25
    assert search.hypervolume_2d([(0.25, 0.75), (0.75, 0.25)], (1, 1)) == pytest.approx(0.75 * 0.25 * 2 - 0.25 * 0.25)
    assert search.hypervolume_2d([(2, 0)], (1, 1)) == 0


def test_loose_bounds_found_quickly():
    loose = Bounds(1.0, 1e6, 1e9, 1e9)
    hits = sum(
        any(loose.satisfied_by(e.metrics) for e in run_search(budget=200, pop_size=20, bounds=loose, seed=s))
        for s in range(20)
    )
    assert hits == 20
