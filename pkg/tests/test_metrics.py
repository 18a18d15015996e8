import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradspace.errors import DomainError, UndefinedCorrelationError
from gradspace.metrics import (
    EvalMetrics,
    doubled_ranks,
    evaluate_scores,
    kendall,
    logistic_fit,
    outlier_ratio,
    pearson,
    rmse,
    spearman,
)
from gradspace.tensor import make_rng


def brute_ranks(a):
    """Average ranks by counting: 1 + #smaller + (#equal - 1) / 2, doubled."""
    n = len(a)
    out = []
    for i in range(n):
        less = sum(1 for j in range(n) if a[j] < a[i])
        equal = sum(1 for j in range(n) if a[j] == a[i])
        out.append(2 * less + equal + 1)
    return out


def brute_spearman(a, b):
    r, s = brute_ranks(a), brute_ranks(b)
    n = len(r)
    sxy = n * sum(x * y for x, y in zip(r, s)) - sum(r) * sum(s)
    sxx = n * sum(x * x for x in r) - sum(r) ** 2
    syy = n * sum(y * y for y in s) - sum(s) ** 2
    return sxy / math.sqrt(sxx * syy)


def brute_kendall(a, b):
    n = len(a)
    conc = disc = tie_a = tie_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            da, db = a[i] - a[j], b[i] - b[j]
            if da == 0:
                tie_a += 1
            if db == 0:
                tie_b += 1
            if da * db > 0:
                conc += 1
            elif da * db < 0:
                disc += 1
    n0 = n * (n - 1) // 2
    return (conc - disc) / math.sqrt((n0 - tie_a) * (n0 - tie_b))


def random_pair(r):
    n = int(r.integers(2, 51))
    if r.uniform() < 0.5:  # heavy ties
        a, b = r.integers(0, 4, n).astype(float), r.integers(0, 4, n).astype(float)
    else:
        a, b = r.normal(size=n), r.normal(size=n)
    return a, b


class TestSpearman:
    def test_identity_and_reverse(self):
        a = [3.0, 1.0, 2.0, 5.0]
        assert spearman(a, a) == 1.0
        assert spearman(sorted(a), sorted(a, reverse=True)) == -1.0

    def test_ranks_with_ties(self):
        np.testing.assert_array_equal(doubled_ranks([10, 20, 20, 5]), [4, 7, 7, 2])

    def test_matches_brute_force(self):
        r = make_rng(2024)
        done = 0
        while done < 300:
            a, b = random_pair(r)
            try:
                expected = brute_spearman(a.tolist(), b.tolist())
            except ZeroDivisionError:
                with pytest.raises(UndefinedCorrelationError):
                    spearman(a, b)
                continue
            assert spearman(a, b) == expected
            done += 1

    def test_constant(self):
        with pytest.raises(UndefinedCorrelationError):
            spearman([1, 1, 1], [1, 2, 3])

    def test_length_errors(self):
        with pytest.raises(DomainError):
            spearman([1.0], [2.0])
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2, 3])


class TestKendall:
    def test_examples(self):
        assert kendall([1, 2, 3], [1, 2, 3]) == 1.0
        assert kendall([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(2 / 3, abs=1e-15)

    def test_matches_brute_force(self):
        r = make_rng(77)
        done = 0
        while done < 300:
            a, b = random_pair(r)
            if len(set(a)) < 2 or len(set(b)) < 2:
                with pytest.raises(UndefinedCorrelationError):
                    kendall(a, b)
                continue
            assert kendall(a, b) == brute_kendall(a.tolist(), b.tolist())
            done += 1

    def test_large_input_chunks(self):
        r = make_rng(3)
        a, b = r.normal(size=3000), r.normal(size=3000)
        sub = slice(0, 300)
        assert kendall(a[sub], b[sub]) == brute_kendall(a[sub].tolist(), b[sub].tolist())
        assert -1 <= kendall(a, b) <= 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=30),
       st.integers(0, 2**31))
def test_rank_metrics_invariant_under_monotone_maps(a, seed):
    a = np.array(a)
    b = a + make_rng(seed).normal(size=a.size)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return
    # cube and exp are strictly monotone; exp keeps distinct values distinct here
    for f in (np.exp, lambda v: v ** 3):
        if len(set(f(a))) != len(set(a)):
            continue
        assert spearman(f(a), b) == spearman(a, b)
        assert kendall(a, f(b)) == kendall(a, b)


class TestOtherMetrics:
    def test_pearson(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
        with pytest.raises(UndefinedCorrelationError):
            pearson([1, 1], [1, 2])

    def test_rmse(self):
        assert rmse([1, 2, 3], [1, 2, 5]) == pytest.approx(math.sqrt(4 / 3))

    def test_outlier_ratio(self):
        assert outlier_ratio([0, 0, 0, 0], [0, 1, 3, 5], [1, 1, 1, 1]) == 0.5
        assert outlier_ratio([0, 0], [0.1, 0.2], 0.1) == 0.0
        # global std of the target when none is given
        t = np.array([0.0, 1.0, 2.0, 3.0])
        assert outlier_ratio(t + 2.5 * t.std(), t) == 1.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_ranges_on_fuzz(self, seed):
        r = make_rng(seed)
        n = int(r.integers(5, 40))
        raw, mos = r.normal(size=n), r.normal(size=n) * 10
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m, _, _ = evaluate_scores(raw, mos, np.abs(r.normal(size=n)))
        for v in (m.plcc, m.srcc, m.krcc):
            assert -1 <= v <= 1
        assert m.rmse >= 0 and 0 <= m.outlier_ratio <= 1


class TestLogisticFit:
    def test_recovers_parameters(self):
        q = np.linspace(-3, 5, 60)
        true = (1.0, 9.0, 1.2, 0.8)
        y = true[0] + (true[1] - true[0]) / (1 + np.exp(-(q - true[2]) / true[3]))
        fit = logistic_fit(q, y, seed=0)
        assert fit.kind == "logistic"
        for got, want in zip((fit.a, fit.b, fit.c, fit.d), true):
            assert abs(got - want) <= 0.01 * abs(want)

    def test_decreasing_data_canonical(self):
        q = np.linspace(0, 1, 30)
        y = 5 - 4 / (1 + np.exp(-(q - 0.5) / 0.1))
        fit = logistic_fit(q, y)
        assert fit.d > 0
        np.testing.assert_allclose(fit(q), y, atol=1e-6)

    def test_not_worse_than_affine(self):
        r = make_rng(8)
        q = np.linspace(0, 1, 25)
        y = 2 * q + 1 + 0.01 * r.normal(size=25)
        fit = logistic_fit(q, y)
        slope, icpt = np.polyfit(q, y, 1)
        assert fit.residual <= np.sum((slope * q + icpt - y) ** 2) + 1e-12
        assert np.sum((fit(q) - y) ** 2) == pytest.approx(fit.residual, rel=1e-9, abs=1e-15)

    def test_constant_objective(self):
        with pytest.raises(DomainError):
            logistic_fit(np.ones(6), np.arange(6.0))

    def test_too_few_points(self):
        with pytest.raises(DomainError):
            logistic_fit([1, 2, 3, 4], [1, 2, 3, 4])


def test_eval_metrics_dict():
    m = EvalMetrics(0.9, 0.8, 0.7, 1.5, 0.1)
    assert m.to_dict() == {"plcc": 0.9, "srcc": 0.8, "krcc": 0.7, "rmse": 1.5, "or": 0.1}
