import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faircda.metrics import (EvalSlice, MetricError, auc_roc, average_precision,
                             delta_dp, delta_eo, delta_dp_thresholded,
                             metric_report)


# -- brute-force references --------------------------------------------------

def bf_delta_dp(p, y, a):
    p, a = np.asarray(p, float), np.asarray(a, float)
    return abs(p[a == 0].mean() - p[a == 1].mean())


def bf_delta_eo(p, y, a):
    p, y, a = np.asarray(p, float), np.asarray(y, float), np.asarray(a, float)
    total = 0.0
    for yv in (0, 1):
        total += abs(p[(a == 0) & (y == yv)].mean() - p[(a == 1) & (y == yv)].mean())
    return total


def bf_average_precision(p, y):
    """Precision/recall table walked rank by rank (stable descending order)."""
    p, y = np.asarray(p, float), np.asarray(y, float)
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))
    n_pos = int(y.sum())
    ap, hits, prev_recall = 0.0, 0, 0.0
    for k, idx in enumerate(order, start=1):
        hits += int(y[idx])
        recall = hits / n_pos
        ap += (recall - prev_recall) * (hits / k)
        prev_recall = recall
    return ap


def bf_auc(p, y):
    p, y = np.asarray(p, float), np.asarray(y, float)
    pos, neg = p[y == 1], p[y == 0]
    total = 0.0
    for pp in pos:
        for nn_ in neg:
            total += 1.0 if pp > nn_ else (0.5 if pp == nn_ else 0.0)
    return total / (len(pos) * len(neg))


def sl(p, y, a=None):
    if a is None:
        a = np.zeros(len(p))
        a[: len(p) // 2] = 1
    return EvalSlice(np.asarray(p, float), np.asarray(y, float), np.asarray(a, float))


class TestDeltaDp:
    def test_constant_predictor(self):
        assert delta_dp(sl([0.3] * 4, [0, 1, 0, 1], [0, 0, 1, 1])) == 0.0

    def test_hand_means(self):
        # group0 {0.2, 0.8} vs group1 {0.4} -> |0.5 - 0.4| = 0.1
        val = delta_dp(sl([0.2, 0.8, 0.4], [0, 1, 0], [0, 0, 1]))
        assert val == pytest.approx(bf_delta_dp([0.2, 0.8, 0.4], None, [0, 0, 1]))
        assert val == pytest.approx(0.1)

    def test_group_swap_symmetry(self):
        p, y, a = [0.1, 0.9, 0.4], [0, 1, 1], np.array([0, 1, 1.0])
        assert delta_dp(sl(p, y, a)) == pytest.approx(delta_dp(sl(p, y, 1 - a)))

    def test_empty_group_error_names_group(self):
        with pytest.raises(MetricError, match="group 1"):
            delta_dp(sl([0.1, 0.2], [0, 1], [0, 0]))


class TestDeltaEo:
    def test_constant_predictor(self):
        assert delta_eo(sl([0.5] * 8, [0, 0, 1, 1] * 2, [0, 1] * 4)) == 0.0

    def test_hand_cells(self):
        # y=0 cells: 0.2 vs 0.3 ; y=1 cells: 0.9 vs 0.6 -> 0.1 + 0.3
        p = [0.2, 0.3, 0.9, 0.6]
        y = [0, 0, 1, 1]
        a = [0, 1, 0, 1]
        assert delta_eo(sl(p, y, a)) == pytest.approx(0.4)
        assert delta_eo(sl(p, y, a)) == pytest.approx(bf_delta_eo(p, y, a))

    def test_empty_cell_error_names_cell(self):
        with pytest.raises(MetricError, match=r"attribute=1, label=1"):
            delta_eo(sl([0.5, 0.5, 0.5], [0, 1, 0], [0, 0, 1]))


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision(sl([0.9, 0.8, 0.1], [1, 1, 0])) == 1.0

    def test_single_positive_ranked_last(self):
        n = 5
        p = np.linspace(0.9, 0.1, n)
        y = np.zeros(n)
        y[-1] = 1
        assert average_precision(sl(p, y)) == pytest.approx(1.0 / n)

    def test_worked_example(self):
        val = average_precision(sl([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]))
        assert val == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)

    def test_needs_positive(self):
        with pytest.raises(MetricError):
            average_precision(sl([0.5, 0.6], [0, 0]))

    def test_tie_break_stable(self):
        # equal scores keep input order: positive first -> better AP
        assert average_precision(sl([0.5, 0.5], [1, 0])) == 1.0
        assert average_precision(sl([0.5, 0.5], [0, 1])) == 0.5


class TestAucRoc:
    def test_perfect_separation(self):
        assert auc_roc(sl([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])) == 1.0

    def test_all_ties_half(self):
        assert auc_roc(sl([0.4] * 4, [1, 0, 1, 0])) == 0.5

    def test_worked_example(self):
        assert auc_roc(sl([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])) == pytest.approx(0.75)

    def test_single_class_error(self):
        with pytest.raises(MetricError):
            auc_roc(sl([0.5, 0.6], [1, 1]))


class TestValidation:
    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            EvalSlice(np.array([0.5]), np.array([1, 0]), np.array([0, 1]))

    def test_prediction_range(self):
        with pytest.raises(MetricError):
            EvalSlice(np.array([1.5]), np.array([1.0]), np.array([0.0]))

    def test_non_binary_labels(self):
        with pytest.raises(MetricError):
            EvalSlice(np.array([0.5]), np.array([2.0]), np.array([0.0]))

    def test_empty(self):
        with pytest.raises(MetricError):
            EvalSlice(np.array([]), np.array([]), np.array([]))


def _pred_styles(n, rng):
    yield np.round(rng.random(n), 3)
    tied = np.round(rng.random(n) * 2) / 4.0 + 0.25
    yield tied
    yield np.full(n, 0.5)


def test_matches_brute_force_small_instances():
    rng = np.random.default_rng(99)
    for n in range(1, 9):
        label_patterns = list(itertools.product([0.0, 1.0], repeat=n))
        if n <= 4:
            attr_patterns = list(itertools.product([0.0, 1.0], repeat=n))
        else:
            attr_patterns = [tuple((rng.random(n) < 0.5).astype(float)) for _ in range(6)]
        for labels in label_patterns:
            y = np.array(labels)
            for preds in _pred_styles(n, rng):
                if y.sum() > 0:
                    assert average_precision(sl(preds, y)) == pytest.approx(
                        bf_average_precision(preds, y), abs=1e-12)
                if 0 < y.sum() < n:
                    assert auc_roc(sl(preds, y)) == pytest.approx(bf_auc(preds, y), abs=1e-12)
                for attrs in attr_patterns[:3]:
                    a = np.array(attrs)
                    if 0 < a.sum() < n:
                        assert delta_dp(sl(preds, y, a)) == pytest.approx(
                            bf_delta_dp(preds, y, a), abs=1e-12)


def test_matches_brute_force_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(300):
        n = rng.integers(4, 40)
        p = np.round(rng.random(n), 2)  # coarse grid forces frequent ties
        y = (rng.random(n) < 0.5).astype(float)
        a = (rng.random(n) < 0.5).astype(float)
        if 0 < y.sum() < n:
            assert average_precision(sl(p, y)) == pytest.approx(bf_average_precision(p, y))
            assert auc_roc(sl(p, y)) == pytest.approx(bf_auc(p, y))
        if 0 < a.sum() < n:
            assert delta_dp(sl(p, y, a)) == pytest.approx(bf_delta_dp(p, y, a))
            cells_ok = all(((a == g) & (y == yv)).any() for g in (0, 1) for yv in (0, 1))
            if cells_ok:
                assert delta_eo(sl(p, y, a)) == pytest.approx(bf_delta_eo(p, y, a))


@settings(max_examples=60, deadline=None)
@given(st.integers(4, 30), st.integers(0, 10_000))
def test_gap_ranges_and_relabel_invariance(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.random(n)
    y = (rng.random(n) < 0.5).astype(float)
    a = (rng.random(n) < 0.5).astype(float)
    if not (0 < a.sum() < n):
        return
    dp = delta_dp(sl(p, y, a))
    assert 0.0 <= dp <= 1.0
    assert dp == pytest.approx(delta_dp(sl(p, y, 1 - a)))
    if all(((a == g) & (y == yv)).any() for g in (0, 1) for yv in (0, 1)):
        eo = delta_eo(sl(p, y, a))
        assert 0.0 <= eo <= 2.0
        assert eo == pytest.approx(delta_eo(sl(p, y, 1 - a)))


def test_attribute_blind_predictor_dp_shrinks_with_n():
    # symmetric groups: prediction depends on a group-independent feature only
    rng = np.random.default_rng(3)
    gaps = []
    for n in (200, 20_000):
        x = rng.standard_normal(n)
        a = (rng.random(n) < 0.5).astype(float)
        p = 1 / (1 + np.exp(-x))
        y = (rng.random(n) < p).astype(float)
        gaps.append(delta_dp(sl(p, y, a)))
    assert gaps[1] < gaps[0]
    assert gaps[1] < 0.02


def test_metric_report_structure(small_census):
    view = small_census.view("test")
    rng = np.random.default_rng(0)
    preds = np.clip(0.3 + 0.4 * view.y + rng.normal(0, 0.1, len(view.y)), 0, 1)
    rep = metric_report(EvalSlice(preds, view.y, view.a), split="test", seed=5)
    assert rep["split"] == "test" and rep["seed"] == 5
    names = {m["metric"] for m in rep["metrics"]}
    assert {"average_precision", "auc_roc", "delta_dp", "delta_eo"} <= names
    for m in rep["metrics"]:
        assert np.isfinite(m["value"])


def test_thresholded_variant():
    p = [0.6, 0.4, 0.9, 0.1]
    a = [0, 0, 1, 1]
    val = delta_dp_thresholded(sl(p, [0, 1, 0, 1], a))
    assert val == pytest.approx(abs(0.5 - 0.5))
