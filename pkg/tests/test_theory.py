from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmexp.theory import (
    d_alpha,
    d_lower_bound,
    random_row_stochastic,
    row_entropy_total,
    tangent_perturbations,
    uniform,
    verify_bounds,
)

from oracles import d_alpha_exact


def test_d_alpha_examples():
    assert d_alpha(uniform(3, exact=True)) == 3
    assert d_alpha(np.eye(3)) == 9
    assert d_alpha(uniform(2)) == 0.0
    assert d_alpha(uniform(3)) == pytest.approx(3, abs=1e-12)


def test_d_alpha_rejects_bad_rows():
    with pytest.raises(ValueError):
        d_alpha(np.full((2, 2), 0.6))
    with pytest.raises(ValueError):
        d_alpha(np.array([[1.5, -0.5], [0.5, 0.5]]))
    d_alpha(np.full((2, 2), 0.5 + 4e-7))  # inside tolerance


def test_lower_bound_examples():
    assert (d_lower_bound(3), d_lower_bound(5), d_lower_bound(2)) == (3, 15, 0)
    with pytest.raises(ValueError):
        d_lower_bound(1)


@pytest.mark.parametrize("n", range(2, 9))
def test_extremes_exact(n):
    assert d_alpha(uniform(n, exact=True)) == d_lower_bound(n) == d_alpha_exact(uniform(n, exact=True))
    assert d_alpha(np.eye(n)) == n * n


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10**6))
def test_bound_on_random_rational_matrices(n, seed):
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 20, size=(n, n)) + 1
    alpha = np.array([[Fraction(int(v), int(r.sum())) for v in r] for r in raw], dtype=object)
    assert d_alpha(alpha) >= d_lower_bound(n)
    assert d_alpha(alpha) == d_alpha_exact(alpha)


def test_path_endpoints_n3():
    perm = np.eye(3)[[2, 0, 1]]
    assert d_alpha(uniform(3, exact=True)) == 3
    assert d_alpha(perm) == 9


def test_flatness_at_uniform():
    rng = np.random.default_rng(0)
    for n in range(3, 9):
        pert = uniform(n) + tangent_perturbations(rng, n, 20, 1e-4)
        assert np.all(np.abs(d_alpha(pert) - d_alpha(uniform(n))) < 1e-9)


def test_convexity_and_entropy_max():
    rng = np.random.default_rng(1)
    for n in range(2, 6):
        a, b = random_row_stochastic(rng, n, 200), random_row_stochastic(rng, n, 200)
        t = rng.uniform(size=(200, 1, 1))
        assert np.all(d_alpha(t * a + (1 - t) * b) <= t[:, 0, 0] * d_alpha(a) + (1 - t[:, 0, 0]) * d_alpha(b) + 1e-9)
        assert np.all(row_entropy_total(a) < n * np.log(n))


def test_verify_bounds_passes_and_counts():
    rep = verify_bounds(200, range(2, 9), seed=3, path_targets=10)
    assert rep.passed and rep.total_violations == 0
    assert rep.counts["lower_bound"] == 200 * 7
    assert rep.counts["flat_at_uniform"] == 100 * 6
    assert any("N=2" in s for s in rep.skipped)


def test_verify_bounds_requires_samples():
    with pytest.raises(ValueError):
        verify_bounds(0)
