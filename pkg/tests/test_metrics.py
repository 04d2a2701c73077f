import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmatch.metrics import (
    EvalReport, EvalRow, UndefinedMetricError, best_f1, evaluate_scores, f1_at_threshold, roc_auc, roc_points,
)
from xmatch.numerics import bce_loss


def brute_auc(s, y):
    pos = [a for a, l in zip(s, y) if l == 1]
    neg = [a for a, l in zip(s, y) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def brute_f1(s, y, t):
    tp = fp = fn = 0
    for a, l in zip(s, y):
        pred = a >= t
        tp += pred and l == 1
        fp += pred and l == 0
        fn += (not pred) and l == 1
    if tp == 0:
        return 0.0
    p, r = tp / (tp + fp), tp / (tp + fn)
    return 2 * p * r / (p + r)


def _instances(count, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        n = int(rng.integers(2, 101))
        y = rng.integers(0, 2, size=n)
        if y.min() == y.max():
            continue
        # coarse rounding on half the instances forces ties
        s = rng.normal(size=n)
        if len(out) % 2:
            s = np.round(s, 1)
        out.append((s, y))
    return out


def test_hand_cases():
    s, y = [0.9, 0.8, 0.3], [1, 0, 1]
    assert roc_auc(s, y) == 0.5
    assert f1_at_threshold(s, y, 0.5) == 0.5
    assert bce_loss(np.array([0.5]), np.array([1.0])) == math.log(2)
    assert bce_loss(np.array([0.5]), np.array([0.0])) == math.log(2)


def test_trivial_cases():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5] * 6, [0, 1] * 3) == 0.5
    assert f1_at_threshold([0.1, 0.9], [0, 1], 0.5) == 1.0
    assert f1_at_threshold([0.1, 0.9], [0, 1], 2.0) == 0.0
    assert best_f1([0.1, 0.2, 0.7, 0.9], [0, 0, 1, 1]) == (1.0, 0.7)


def test_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError, match="annotators"):
        evaluate_scores([0.1, 0.2], [0, 0], "cross", "annotators")


def test_against_brute_force_oracles():
    for s, y in _instances(200, seed=0):
        assert abs(roc_auc(s, y) - brute_auc(s, y)) <= 1e-12
        for t in (0.5, float(np.median(s)), float(s[0])):
            assert abs(f1_at_threshold(s, y, t) - brute_f1(s, y, t)) <= 1e-12
        f, t = best_f1(s, y)
        cands = sorted(set(s.tolist())) + [np.nextafter(s.max(), np.inf)]
        oracle = max(brute_f1(s, y, c) for c in cands)
        assert abs(f - oracle) <= 1e-12
        assert t == min(c for c in cands if abs(brute_f1(s, y, c) - oracle) <= 1e-12)


def test_best_f1_matches_dense_scan():
    grid = np.linspace(0.0, 1.0, 1000)
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = grid[rng.integers(0, 999, size=50)]
        y = rng.integers(0, 2, size=50)
        if y.sum() == 0:
            y[0] = 1
        scan = [brute_f1(s, y, t) for t in grid]
        best = max(scan)
        f, t = best_f1(s, y)
        assert abs(f - best) <= 1e-12
        # grid points below the lowest score are equivalent to it
        assert t == s[s >= grid[scan.index(best)]].min()
        assert f >= f1_at_threshold(s, y, 0.5)


@settings(max_examples=100)
@given(st.lists(st.integers(-40, 40).map(lambda k: k / 8), min_size=4, max_size=40), st.integers(0, 2**31))
def test_auc_monotone_transform_invariance(values, seed):
    s = np.array(values)
    y = np.random.default_rng(seed).integers(0, 2, size=s.size)
    y[0], y[1] = 0, 1
    auc = roc_auc(s, y)
    assert abs(roc_auc(np.exp(s), y) - auc) <= 1e-12
    assert abs(roc_auc(3 * s + 1, y) - auc) <= 1e-12
    assert abs(roc_auc(-s, y) + auc - 1.0) <= 1e-12


def test_roc_points_endpoints():
    fpr, tpr = roc_points([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert (fpr[0], tpr[0]) == (0.0, 0.0) and (fpr[-1], tpr[-1]) == (1.0, 1.0)
    assert np.isclose(np.trapezoid(tpr, fpr), roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]))


def test_evaluate_constant_and_oracle_scorers():
    y = [0, 1, 1, 0, 1]
    const = evaluate_scores([0.5] * 5, y, "const", "d")
    assert const.auc == 0.5
    oracle = evaluate_scores(y, y, "oracle", "d")
    assert oracle.auc == 1.0 and oracle.best_f1 == 1.0
    assert (oracle.n_pos, oracle.n_neg) == (3, 2)


def test_report_round_trip_and_table():
    rep = EvalReport()
    rep.add(EvalRow("cross", "dev", 0.96, 0.8, 0.9, 0.4, 10, 12))
    rep.add(EvalRow("cross", "annot", 0.95, 0.7, 0.85, 0.3, 9, 9))
    rep.add(EvalRow("dual", "dev", 0.7, 0.5, 0.6, 0.1, 10, 12))
    assert EvalReport.from_json(rep.to_json()) == rep
    text = rep.to_text()
    lines = text.splitlines()
    assert "dev" in lines[0] and "annot" in lines[0]
    assert lines[3].split()[0] == "cross" and "0.960" in lines[3] and "0.950" in lines[3]
    assert lines[4].startswith("dual") and lines[4].rstrip().endswith("-")
    assert len(rep.to_tsv().splitlines()) == 4
