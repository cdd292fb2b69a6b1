import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexattn import (MaskMod, NAGeometry, Permutation, alibi, alibi_slopes, and_mask, causal, document_mask,
                      morton_permutation, na_morton, na_naive, na_tiled, noop_mask, noop_score,
                      offset_mask, offset_score, or_mask, prefix_lm, remap_mask, sliding_window,
                      soft_cap, tile_permutation)
from flexattn.errors import GeometryMismatch, IndexOutOfRange, NonPositiveCap
from flexattn.masks import length_mask, prefix_mask, symmetric_window


def grid(m, n=64, b=0, h=0):
    return np.array(m.grid(b, h, n, n))


class TestCausal:
    @pytest.mark.parametrize("q, kv, want", [(3, 3, True), (5, 2, True), (2, 5, False)])
    def test_examples(self, q, kv, want):
        assert bool(causal()(0, 0, q, kv)) is want


class TestSlidingWindow:
    @pytest.mark.parametrize("q, kv, want", [(4, 2, True), (4, 1, False), (1, 3, False)])
    def test_window_2(self, q, kv, want):
        assert bool(sliding_window(2)(0, 0, q, kv)) is want

    def test_infinite_window_is_causal(self):
        assert np.array_equal(grid(sliding_window(64)), grid(causal()))

    def test_negative_window(self):
        with pytest.raises(ValueError):
            sliding_window(-1)

    def test_symmetric_window(self):
        m = symmetric_window(2)
        assert bool(m(0, 0, 1, 3)) and not bool(m(0, 0, 0, 3))


class TestDocumentMask:
    ids = [0, 0, 1, 1]

    @pytest.mark.parametrize("q, kv, want", [(0, 1, True), (1, 2, False), (3, 2, True)])
    def test_examples(self, q, kv, want):
        assert bool(document_mask(self.ids)(0, 0, q, kv)) is want

    def test_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            document_mask(self.ids)(0, 0, 0, 4)

    def test_ids_are_copied(self):
        ids = np.array(self.ids)
        m = document_mask(ids)
        ids[:] = 7
        assert not bool(m(0, 0, 1, 2))


class TestPrefixLM:
    @pytest.mark.parametrize("q, kv, want", [(0, 1, True), (1, 3, False), (3, 1, True)])
    def test_examples(self, q, kv, want):
        assert bool(prefix_lm(2)(0, 0, q, kv)) is want

    def test_composition_8x8(self):
        assert np.array_equal(grid(or_mask(causal(), prefix_mask(2)), 8), grid(prefix_lm(2), 8))


class TestAlibi:
    def test_example(self):
        assert alibi([-0.25])(1.0, 0, 0, 4, 1) == pytest.approx(0.25)

    def test_diagonal_unchanged(self):
        assert alibi(alibi_slopes(8))(1.5, 0, 3, 7, 7) == 1.5

    def test_dapply_one(self):
        assert float(alibi(alibi_slopes(2)).grad(3.0, 0, 1, 9, 2)) == 1.0

    def test_slopes(self):
        np.testing.assert_allclose(alibi_slopes(8), [-(2.0 ** -(i + 1)) for i in range(8)])

    def test_head_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            alibi([-0.5])(1.0, 0, 1, 0, 0)


class TestSoftCap:
    def test_zero(self):
        assert soft_cap(20)(0.0, 0, 0, 0, 0) == 0.0

    def test_saturates(self):
        assert soft_cap(20)(1000.0, 0, 0, 0, 0) == pytest.approx(20.0, abs=1e-6)

    def test_value(self):
        assert soft_cap(20)(10.0, 0, 0, 0, 0) == pytest.approx(20 * math.tanh(0.5), rel=1e-15)

    @pytest.mark.parametrize("cap", [0.0, -3.0])
    def test_nonpositive(self, cap):
        with pytest.raises(NonPositiveCap):
            soft_cap(cap)


class TestNoop:
    def test_mask_everywhere(self):
        assert grid(noop_mask(), 8).all()

    def test_score_identity(self):
        sm = noop_score()
        assert sm(3.25, 0, 0, 1, 2) == 3.25 and float(sm.grad(3.25, 0, 0, 1, 2)) == 1.0
        assert sm.identity


class TestCombinators:
    def test_truth_table(self):
        t = noop_mask()
        never = MaskMod(lambda b, h, q, kv: np.False_)
        assert not bool(and_mask(t, never)(0, 0, 1, 1))
        assert bool(or_mask(t, never)(0, 0, 1, 1))

    def test_and_identity(self):
        m = sliding_window(3)
        assert np.array_equal(grid(and_mask(m, noop_mask())), grid(m))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 64), st.integers(0, 64), st.integers(0, 3))
    def test_commutative_and_associative(self, w, p, which):
        a, b = sliding_window(w), prefix_mask(p)
        c = [causal(), noop_mask(), symmetric_window(w // 2 + 1), prefix_lm(p // 2)][which]
        assert np.array_equal(grid(and_mask(a, b)), grid(and_mask(b, a)))
        assert np.array_equal(grid(or_mask(a, b)), grid(or_mask(b, a)))
        assert np.array_equal(grid(and_mask(and_mask(a, b), c)), grid(and_mask(a, and_mask(b, c))))
        assert np.array_equal(grid(or_mask(or_mask(a, b), c)), grid(or_mask(a, or_mask(b, c))))

    def test_required_len_conflict(self):
        with pytest.raises(GeometryMismatch):
            and_mask(na_naive(NAGeometry(4, 4, 3)), na_naive(NAGeometry(5, 5, 3)))

    def test_b_h_independence(self):
        for m in (causal(), sliding_window(4), prefix_lm(8), document_mask(np.arange(64) // 10)):
            ref = grid(m)
            assert all(np.array_equal(grid(m, b=b, h=h), ref) for b in range(3) for h in range(3))

    def test_length_mask(self):
        m = length_mask([2, 5])
        assert bool(m(1, 0, 0, 4)) and not bool(m(0, 0, 0, 4))


class TestOffset:
    def test_examples(self):
        m = offset_mask(causal(), 3)
        assert bool(m(0, 0, 0, 2))
        assert not bool(m(0, 0, 0, 5))

    def test_zero_offset_identity(self):
        assert np.array_equal(grid(offset_mask(causal(), 0)), grid(causal()))

    def test_offset_drops_required_len(self):
        assert offset_mask(na_naive(NAGeometry(4, 4, 3)), 0).required_len is None

    def test_offset_score(self):
        s = offset_score(alibi([-1.0]), 5)
        assert s(0.0, 0, 0, 0, 2) == -3.0
        assert float(s.grad(0.0, 0, 0, 0, 2)) == 1.0

    def test_negative(self):
        with pytest.raises(ValueError):
            offset_mask(causal(), -1)


class TestNeighborhood:
    g = NAGeometry(4, 4, 3)

    def test_neighbor(self):
        assert bool(na_naive(self.g)(0, 0, 5, 10))

    def test_distance_two(self):
        assert not bool(na_naive(self.g)(0, 0, 5, 15))

    def test_self(self):
        d = np.diag(grid(na_naive(NAGeometry(8, 8, 5)), 64))
        assert d.all()

    def test_centered_corner_sees_fewer(self):
        m = grid(na_naive(NAGeometry(8, 8, 3)), 64)
        assert m[0].sum() == 4 and m[9].sum() == 9

    def test_out_of_canvas(self):
        with pytest.raises(GeometryMismatch):
            na_naive(self.g)(0, 0, 0, 16)

    @pytest.mark.parametrize("args", [(0, 4, 3), (4, 4, 2), (4, 4, 5)])
    def test_bad_geometry(self, args):
        with pytest.raises(GeometryMismatch):
            NAGeometry(*args)

    def test_tile_layout(self):
        assert list(tile_permutation(self.g, 2).forward[:4]) == [0, 1, 4, 5]

    def test_tile_must_divide(self):
        with pytest.raises(GeometryMismatch):
            tile_permutation(self.g, 3)

    def test_morton_slot(self):
        inv = morton_permutation(NAGeometry(8, 8, 3)).inverse
        assert inv[5 * 8 + 3] == 39

    def test_morton_needs_power_of_two(self):
        with pytest.raises(GeometryMismatch):
            morton_permutation(NAGeometry(6, 6, 3))

    @pytest.mark.parametrize("p", [tile_permutation(NAGeometry(8, 8, 3), 4),
                                   morton_permutation(NAGeometry(8, 8, 3)), Permutation.identity(64)])
    def test_bijection(self, p):
        assert np.array_equal(np.sort(p.forward), np.arange(64))
        assert np.array_equal(p.forward[p.inverse], np.arange(64))

    def test_not_a_bijection(self):
        with pytest.raises(ValueError):
            Permutation(np.array([0, 0, 1]))

    def test_identity_remap(self):
        m = na_naive(NAGeometry(8, 8, 3))
        assert np.array_equal(grid(remap_mask(m, Permutation.identity(64))), grid(m))

    @pytest.mark.parametrize("make", [lambda g: na_tiled(g, 2), na_morton])
    def test_remap_preserves_count(self, make):
        g = NAGeometry(8, 8, 5)
        assert grid(make(g)).sum() == grid(na_naive(g)).sum()

    def test_remap_pointwise(self):
        g = NAGeometry(8, 8, 3)
        p = morton_permutation(g)
        a, b = grid(na_morton(g)), grid(na_naive(g))
        assert np.array_equal(a, b[np.ix_(p.forward, p.forward)])

    def test_remap_length_mismatch(self):
        with pytest.raises(GeometryMismatch):
            remap_mask(na_naive(NAGeometry(4, 4, 3)), Permutation.identity(9))
