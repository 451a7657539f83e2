from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wips.oracles import (BinomialSpec, binomial_inverse_moment, binomial_inverse_moment_exact,
                          degree_tail_check, degree_threshold, neighbor_sum_checks)


def test_small_enumerations():
    assert binomial_inverse_moment(BinomialSpec(1, 0.5)).value == pytest.approx(0.75, abs=1e-15)
    assert binomial_inverse_moment(BinomialSpec(2, 0.5)).value == pytest.approx(7 / 12, abs=1e-15)
    # by hand: (1/4)(1) + (1/2)(1/2) + (1/4)(1/3)
    assert float(Fraction(1, 4) + Fraction(1, 4) + Fraction(1, 12)) == pytest.approx(7 / 12)


@pytest.mark.parametrize("n", [0, 1, 5, 40])
def test_degenerate_probabilities(n):
    assert binomial_inverse_moment(BinomialSpec(n, 1.0)).value == pytest.approx(1 / (n + 1))
    low = binomial_inverse_moment(BinomialSpec(n, 0.0))
    assert low.value == 1.0 and low.exact


def test_exact_against_pmf_grid():
    for n in range(21):
        for p in np.round(np.arange(0.1, 1.01, 0.1), 10):
            spec = BinomialSpec(n, float(p))
            assert binomial_inverse_moment(spec).value == pytest.approx(binomial_inverse_moment_exact(spec),
                                                                        abs=1e-12)
            for m, r in ((2, 1), (3, 1), (1, 2), (2, 2), (1, 3)):
                bound = binomial_inverse_moment(spec, m, r)
                assert not bound.exact
                assert bound.value >= binomial_inverse_moment_exact(spec, m, r) * (1 - 1e-12)


@given(st.integers(0, 60), st.floats(0.01, 0.99))
def test_monotone_in_n_and_p(n, p):
    here = binomial_inverse_moment(BinomialSpec(n, p)).value
    assert binomial_inverse_moment(BinomialSpec(n + 1, p)).value <= here * (1 + 1e-12)
    assert binomial_inverse_moment(BinomialSpec(n, min(p + 0.01, 1.0))).value <= here * (1 + 1e-12)


def test_small_p_is_stable():
    spec = BinomialSpec(10, 1e-14)
    assert binomial_inverse_moment(spec).value == pytest.approx(1.0, abs=1e-10)


def test_spec_validation():
    with pytest.raises(ValueError):
        BinomialSpec(-1, 0.5)
    with pytest.raises(ValueError):
        BinomialSpec(3, 1.5)
    with pytest.raises(ValueError):
        binomial_inverse_moment(BinomialSpec(3, 0.5), shift=0)


def test_neighbor_sums_complete_graph_exact():
    for chk in neighbor_sum_checks(7, 9, 1.0, 50, seed=1):
        assert chk.mean == 0.0 and chk.se == 0.0 and chk.ok


def test_neighbor_sums_within_bounds():
    checks = neighbor_sum_checks(50, 50, 0.3, 2000, seed=2)
    assert [c.name for c in checks] == ["cross_type", "same_type"]
    for c in checks:
        assert c.ok, c.row()
        assert c.row()["margin"] == pytest.approx(c.margin)


def test_neighbor_sums_reject_bad_input():
    with pytest.raises(ValueError):
        neighbor_sum_checks(10, 10, 0.0, 10)
    with pytest.raises(ValueError):
        neighbor_sum_checks(1, 10, 0.5, 10)


def test_degree_tail_degenerate():
    for p in (0.0, 1.0):
        chk = degree_tail_check(200, p, 1, 1000, seed=3)
        assert chk.mean == 0.0 and chk.ok
    with pytest.raises(ValueError):
        degree_tail_check(200, 0.5, 0, 10)


def test_degree_tail_threshold():
    assert degree_threshold(500, 1) == pytest.approx(np.sqrt(499 * np.log(500)))
    chk = degree_tail_check(500, 0.5, 1, 20000, seed=4)
    assert chk.bound == pytest.approx(2 / 500 ** 2) and chk.ok
