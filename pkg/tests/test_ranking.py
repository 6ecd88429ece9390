import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fednews.nn import tensor as T
from fednews.nn.tensor import ContractError, DimensionError
from fednews.ranking import (Impression, batch_loss, build_training_samples, click_score, evaluate_ranking,
                             mean_loss, sample_loss, summarize)
from oracles import brute_force_metrics


# -- scoring ----------------------------------------------------------------------

def test_click_score_examples():
    assert click_score([1, 0], [0.5, 2]) == 0.5
    assert click_score([1, 0], [0, 3]) == 0.0
    v = np.array([0.6, 0.8])
    assert click_score(v, v) == pytest.approx(1.0)
    with pytest.raises(DimensionError):
        click_score([1, 0], [1, 0, 0])


# -- sampling -----------------------------------------------------------------------

def _imp(iid, clicks, nonclicks, user="U1"):
    cands = [(f"P{i}", 1) for i in range(clicks)] + [(f"N{i}", 0) for i in range(nonclicks)]
    return Impression(iid, user, "t", cands)


def test_sampling_k20_gives_21_items():
    samples = build_training_samples([_imp("I1", 1, 25)], 20, 0)
    assert len(samples) == 1
    s = samples[0]
    assert len(s.news_ids) == 21 and s.positive == "P0"
    assert len(set(s.negatives)) == 20
    assert all(n.startswith("N") for n in s.negatives)


def test_two_clicks_two_samples():
    samples = build_training_samples([_imp("I1", 2, 6)], 4, 0)
    assert [s.positive for s in samples] == ["P0", "P1"]


def test_sampling_deterministic_per_seed():
    imps = [_imp(f"I{i}", 1 + i % 2, 8) for i in range(6)]
    a = build_training_samples(imps, 4, 11)
    b = build_training_samples(imps, 4, 11)
    assert a == b
    assert a != build_training_samples(imps, 4, 12)


def test_sampling_with_replacement_when_short():
    (s,) = build_training_samples([_imp("I1", 1, 2)], 5, 0)
    assert len(s.negatives) == 5 and set(s.negatives) <= {"N0", "N1"}


def test_sampling_skips_impressions_without_nonclicks():
    stats = {}
    samples = build_training_samples([_imp("I1", 2, 0), _imp("I2", 1, 3)], 2, 0, stats)
    assert len(samples) == 1 and stats["skipped"] == 1


def test_sampling_rejects_bad_k():
    with pytest.raises(ValueError):
        build_training_samples([], 0, 0)


# -- loss -----------------------------------------------------------------------

def test_loss_fixtures():
    assert sample_loss(0.3, [0.3, 0.3]) == pytest.approx(math.log(3), abs=1e-12)
    assert sample_loss(100.0, [0.0, 0.0]) == pytest.approx(0.0, abs=1e-40)
    assert sample_loss(1.0, [0.0]) == pytest.approx(0.313262, abs=1e-6)
    assert sample_loss(1.0, [0.0]) == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-15)


def test_loss_no_overflow():
    assert math.isfinite(sample_loss(1e4, [1e4 - 1, -1e4]))
    assert sample_loss(-800.0, [800.0]) == pytest.approx(1600.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, 20), st.lists(st.floats(-20, 20), min_size=1, max_size=8), st.floats(1e-3, 5))
def test_loss_decreases_in_positive_score(s_pos, negs, delta):
    a, b = sample_loss(s_pos, negs), sample_loss(s_pos + delta, negs)
    assert a >= 0 and b >= 0
    assert b < a or a < 1e-12


def test_batch_loss_mean_properties(rng):
    s = rng.normal(size=(3, 5))
    per = [sample_loss(r[0], r[1:]) for r in s]
    assert batch_loss(s[:1]).item() == pytest.approx(per[0], abs=1e-14)
    assert batch_loss(np.vstack([s[:1], s[:1]])).item() == pytest.approx(per[0], abs=1e-14)
    assert batch_loss(s).item() == pytest.approx((per[0] + per[1] + per[2]) / 3, abs=1e-14)
    assert mean_loss(per) == pytest.approx(sum(per) / 3, abs=1e-15)
    with pytest.raises(ContractError):
        batch_loss(np.zeros((0, 5)))
    with pytest.raises(ContractError):
        mean_loss([])


def test_batch_loss_gradient_closed_form(rng):
    s = rng.normal(size=(4, 6))
    x = T.Tensor(s, requires_grad=True)
    (g,) = T.grad(batch_loss(x), [x])
    p = np.exp(s - s.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    expected = p.copy()
    expected[:, 0] -= 1.0
    np.testing.assert_allclose(g, expected / 4, rtol=1e-12, atol=1e-15)


# -- metrics --------------------------------------------------------------------

def test_metric_examples():
    assert evaluate_ranking([0.9, 0.1], [1, 0]) == (1.0, 1.0, 1.0, 1.0)
    auc, mrr, n5, n10 = evaluate_ranking([0.8, 0.6, 0.4, 0.2], [1, 0, 1, 0])
    assert auc == 0.75 and mrr == 1.0
    assert n5 == pytest.approx(0.9197, abs=1e-4)
    assert n5 == pytest.approx(1.5 / (1 + 1 / math.log2(3)), abs=1e-15)
    auc, mrr, n5, _ = evaluate_ranking([0.1, 0.9], [1, 0])
    assert auc == 0.0 and mrr == 0.5
    assert n5 == pytest.approx(0.6309, abs=1e-4)


def test_ties_counted_half_and_broken_by_index():
    auc, mrr, _, _ = evaluate_ranking([0.5, 0.5], [0, 1])
    assert auc == 0.5 and mrr == 0.5  # tie: index 0 ranks first
    auc, mrr, _, _ = evaluate_ranking([0.5, 0.5], [1, 0])
    assert mrr == 1.0


def test_auc_undefined_excluded_from_mean():
    rows = [evaluate_ranking([0.2, 0.4], [1, 1]), evaluate_ranking([0.9, 0.1], [1, 0])]
    assert rows[0][0] is None
    rep = summarize(rows)
    assert rep.auc == 1.0 and rep.n_auc == 1 and rep.n_impressions == 2
    assert rep.mrr == 1.0


def test_metric_contract_errors():
    with pytest.raises(DimensionError):
        evaluate_ranking([0.1, 0.2], [1])
    with pytest.raises(ContractError):
        evaluate_ranking([0.1], [1])


def test_metrics_match_brute_force_on_1000_instances():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(2, 25))
        # coarse grid so ties occur regularly
        scores = list(np.round(rng.normal(size=n), int(rng.integers(0, 3))))
        labels = list(rng.integers(0, 2, size=n))
        if rng.random() < 0.1:
            labels = [1] * n
        got = evaluate_ranking(scores, labels)
        ref = brute_force_metrics(scores, labels)
        if ref[0] is None:
            assert got[0] is None
        else:
            assert abs(got[0] - ref[0]) <= 1e-12
        assert got[1:] == ref[1:]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(0, 1)), min_size=2, max_size=20))
def test_metrics_invariant_under_increasing_transform(rows):
    scores = np.array([r[0] for r in rows], dtype=np.float64)
    labels = [r[1] for r in rows]
    transformed = scores ** 3 + 2.0 * scores + 7.0  # strictly increasing, exact on small integers
    assert evaluate_ranking(scores, labels) == evaluate_ranking(transformed, labels)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.integers(0, 1)), min_size=2, max_size=30))
def test_metrics_in_unit_interval(rows):
    vals = evaluate_ranking([r[0] for r in rows], [r[1] for r in rows])
    for v in vals:
        assert v is None or 0.0 <= v <= 1.0
