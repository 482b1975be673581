"""Sinkhorn-Knopp balancing and permutation decoding."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gencap.sinkhorn import StructurallyInfeasibleError, decode_permutation, sinkhorn_knopp

positive_matrix = hnp.arrays(
    np.float64,
    st.integers(2, 6).map(lambda n: (n, n)),
    elements=st.floats(0.05, 20.0),
)


def balance_oracle(m, iters=5000):
    """Plain fixed-point iteration, kept independent of the library code."""
    m = m.astype(float).copy()
    for _ in range(iters):
        m = m / m.sum(axis=1, keepdims=True)
        m = m / m.sum(axis=0, keepdims=True)
    return m


class TestSinkhornKnopp:
    def test_identity_fixed_point(self):
        eye = np.eye(4)
        assert np.allclose(sinkhorn_knopp(eye), eye)

    def test_uniform_limit(self):
        out = sinkhorn_knopp(np.ones((5, 5)))
        assert np.allclose(out, 1 / 5)

    def test_two_by_two_against_iteration_oracle(self):
        m = np.array([[2.0, 1.0], [1.0, 1.0]])
        got = sinkhorn_knopp(m, tol=1e-12)
        assert np.allclose(got, balance_oracle(m), atol=1e-10)

    @given(positive_matrix)
    @settings(max_examples=60, deadline=None)
    def test_row_and_column_sums(self, m):
        out = sinkhorn_knopp(m)
        assert np.abs(out.sum(axis=0) - 1).max() < 1e-7
        assert np.abs(out.sum(axis=1) - 1).max() < 1e-7

    @given(positive_matrix)
    @settings(max_examples=30, deadline=None)
    def test_idempotent_on_balanced_input(self, m):
        once = sinkhorn_knopp(m)
        twice = sinkhorn_knopp(once)
        assert np.allclose(once, twice, atol=1e-7)

    @given(positive_matrix)
    @settings(max_examples=30, deadline=None)
    def test_row_scaling_invariance(self, m):
        scaled = m.copy()
        scaled[0] *= 7.5
        assert np.allclose(sinkhorn_knopp(m), sinkhorn_knopp(scaled), atol=1e-6)

    def test_zero_pattern_preserved(self, rng):
        # zeros off a permutation support stay exactly zero
        n = 5
        m = rng.uniform(0.5, 2.0, size=(n, n))
        mask = np.eye(n, dtype=bool) | np.roll(np.eye(n, dtype=bool), 1, axis=1)
        m[~mask] = 0.0
        out = sinkhorn_knopp(m)
        assert np.all(out[~mask] == 0.0)
        assert np.all(out[mask] > 0.0)

    def test_zero_row_is_infeasible(self):
        m = np.ones((3, 3))
        m[1] = 0.0
        with pytest.raises(StructurallyInfeasibleError):
            sinkhorn_knopp(m)

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            sinkhorn_knopp(np.ones((2, 3)))

    def test_rejects_negative_entries(self):
        with pytest.raises(ValueError):
            sinkhorn_knopp(np.array([[1.0, -1.0], [1.0, 1.0]]))

    def test_warns_when_iteration_budget_too_small(self):
        m = np.array([[5.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 1.0]])
        with pytest.warns(RuntimeWarning):
            sinkhorn_knopp(m, tol=1e-12, max_iter=1)

    def test_two_by_two_limit_from_cross_ratio(self, rng):
        # scaling preserves m00*m11/(m01*m10); solving for the balanced form
        # gives p/(1-p) = sqrt of that cross-ratio
        for _ in range(25):
            rho = rng.uniform(0.1, 5.0, size=(2, 2))
            w_id = np.sqrt(rho[0, 0] * rho[1, 1])
            w_swap = np.sqrt(rho[0, 1] * rho[1, 0])
            p = w_id / (w_id + w_swap)
            want = np.array([[p, 1 - p], [1 - p, p]])
            assert np.allclose(sinkhorn_knopp(rho, tol=1e-13), want, atol=1e-8)


class TestDecodePermutation:
    def test_permutation_matrix_decodes_to_itself(self):
        P = np.eye(4)[[2, 0, 3, 1]]
        assert np.array_equal(decode_permutation(P), [2, 0, 3, 1])

    def test_uniform_ties_decode_to_identity(self):
        assert np.array_equal(decode_permutation(np.full((4, 4), 0.25)), [0, 1, 2, 3])

    def test_partial_tie_prefers_low_columns(self):
        R = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]])
        assert np.array_equal(decode_permutation(R), [0, 1, 2])

    @given(positive_matrix)
    @settings(max_examples=40, deadline=None)
    def test_output_is_a_bijection(self, m):
        R = sinkhorn_knopp(m)
        perm = decode_permutation(R)
        assert sorted(perm) == list(range(len(R)))

    def test_optimal_against_enumeration(self, rng):
        for _ in range(20):
            R = sinkhorn_knopp(rng.uniform(0.05, 1.0, size=(4, 4)))
            perm = decode_permutation(R)
            score = np.prod([R[i, perm[i]] for i in range(4)])
            best = max(
                np.prod([R[i, p[i]] for i in range(4)])
                for p in itertools.permutations(range(4))
            )
            assert score >= best * (1 - 1e-9)
