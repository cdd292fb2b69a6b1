import numpy as np
import pytest

from conftest import qkv
from flexattn import (AttentionConfig, Counters, MaskMod, ScoreMod, alibi, alibi_slopes, backward,
                      causal, create_block_mask, decode, document_mask, forward, mod_from_mask,
                      noop_mask, offset_mask, prefix_lm, sliding_window, soft_cap, transpose)
from flexattn import oracle
from flexattn.block_mask import demote_full, force_dense, sparsity
from flexattn.errors import BlockMaskMismatch, OffsetOutOfRange, ShapeMismatch, StaleStatistics

VARIANTS = {
    "noop": (noop_mask(), None),
    "causal": (causal(), None),
    "sliding": (sliding_window(23), None),
    "document": (document_mask(np.arange(200) // 37), None),
    "prefix_lm": (prefix_lm(50), None),
    "alibi": (causal(), alibi(alibi_slopes(4))),
    "soft_cap": (noop_mask(), soft_cap(2.0)),
}


def run(q, k, v, mask, smod, bs, **kw):
    bm = create_block_mask(mask, q.shape[0], q.shape[1], q.shape[2], k.shape[2], bs, bs)
    return forward(q, k, v, smod, bm, AttentionConfig(**kw)), bm


class TestForwardBasics:
    def test_single_token(self, backend):
        one = lambda x: np.full((1, 1, 1, 1), x, dtype=np.float32)  # noqa: E731
        res = forward(one(2), one(3), one(5), cfg=AttentionConfig(scale=1.0))
        assert res.out.item() == 5.0
        assert res.lse.item() == pytest.approx(6.0)

    def test_fully_masked_row(self, rng, backend):
        q, k, v = qkv(rng, 1, 1, 1, 8, 4)
        later = MaskMod(lambda b, h, qi, kv: kv > qi)
        res, _ = run(q, k, v, later, None, 4)
        assert np.all(res.out[0, 0, -1] == 0) and res.lse[0, 0, -1] == -np.inf
        assert np.all(np.isfinite(res.out))

    def test_causal_alibi_64(self, rng, backend):
        q, k, v = qkv(rng, 1, 2, 2, 64, 8)
        smod = alibi(alibi_slopes(2))
        res, _ = run(q, k, v, causal(), smod, 16)
        gold = oracle.dense_forward(q, k, v, smod, causal())
        assert oracle.max_abs(res.out, gold.out) <= 1e-5
        assert oracle.max_abs(res.lse, gold.lse) <= 1e-5

    def test_uniform_scores_average_v(self, rng):
        q = np.zeros((1, 1, 4, 8), np.float32)
        _, k, v = qkv(rng, 1, 1, 1, 4, 8, kv_len=10)
        res = forward(q, k, v, cfg=AttentionConfig(block_size_q=3, block_size_kv=3))
        np.testing.assert_allclose(res.out[0, 0], np.broadcast_to(v[0, 0].mean(0), (4, 8)), atol=1e-6)

    def test_default_block_mask_is_dense(self, rng):
        q, k, v = qkv(rng, 2, 2, 1, 50, 8)
        gold = oracle.dense_forward(q, k, v)
        assert oracle.max_abs(forward(q, k, v).out, gold.out) <= 1e-6

    def test_integer_inputs_promoted(self):
        x = np.ones((1, 1, 3, 2), dtype=np.int64)
        assert forward(x, x, x).out.dtype == np.float64


class TestOracleEquivalence:
    @pytest.mark.parametrize("name", sorted(VARIANTS))
    @pytest.mark.parametrize("B, G", [(1, 1), (2, 4)])
    @pytest.mark.parametrize("bs", [16, 64, 128])
    def test_64bit_ragged(self, name, B, G, bs):
        mask, smod = VARIANTS[name]
        rng = np.random.default_rng([sorted(VARIANTS).index(name), B, G, bs])
        q, k, v = qkv(rng, B, 4, 4 // G, 200, 16, dtype=np.float64)
        res, _ = run(q, k, v, mask, smod, bs)
        gold = oracle.dense_forward(q, k, v, smod, mask)
        assert oracle.max_abs(res.out, gold.out) <= 1e-12
        np.testing.assert_allclose(res.lse, gold.lse, atol=1e-12)

    @pytest.mark.parametrize("name", sorted(VARIANTS))
    def test_32bit(self, name, rng, backend):
        mask, smod = VARIANTS[name]
        q, k, v = qkv(rng, 2, 4, 1, 200, 16)
        res, _ = run(q, k, v, mask, smod, 64)
        gold = oracle.dense_forward(q, k, v, smod, mask)
        assert res.out.dtype == np.float32
        assert oracle.max_abs(res.out, gold.out) <= 1e-5

    def test_rectangular(self, rng):
        q, k, v = qkv(rng, 1, 2, 2, 37, 8, kv_len=91)
        mask = MaskMod(lambda b, h, qi, kv: kv <= qi + 54)
        res = forward(q, k, v, None, create_block_mask(mask, 1, 2, 37, 91, 16, 32))
        assert oracle.max_abs(res.out, oracle.dense_forward(q, k, v, None, mask).out) <= 1e-5

    def test_block_size_independence(self, rng):
        q, k, v = qkv(rng, 1, 2, 2, 256, 16)
        a, _ = run(q, k, v, sliding_window(40), None, 16)
        b, _ = run(q, k, v, sliding_window(40), None, 128)
        assert oracle.max_abs(a.out, b.out) <= 1e-5

    def test_score_mod_emitting_neg_inf(self, rng):
        q, k, v = qkv(rng, 1, 1, 1, 64, 8)
        masked, _ = run(q, k, v, causal(), None, 16)
        as_score, bm = run(q, k, v, noop_mask(), mod_from_mask(causal()), 16)
        assert sparsity(bm).density == 1.0
        assert oracle.max_abs(masked.out, as_score.out) <= 1e-6


class TestOutputProperties:
    def test_convex_combination(self, rng):
        q, k, v = qkv(rng, 1, 2, 2, 128, 8)
        res, _ = run(q, k, v, document_mask(np.arange(128) // 20), None, 32)
        vmax = np.linalg.norm(v, axis=-1).max()
        assert np.linalg.norm(res.out, axis=-1).max() <= vmax + 1e-6

    def test_recomputed_probabilities_sum_to_one(self, rng):
        q, k, v = qkv(rng, 1, 2, 2, 96, 8)
        smod = alibi(alibi_slopes(2))
        res, _ = run(q, k, v, causal(), smod, 32)
        s = np.einsum("bhqd,bhkd->bhqk", q, k) / np.sqrt(8)
        qi, kv = np.arange(96)[:, None], np.arange(96)[None, :]
        for h in range(2):
            sh = np.where(qi >= kv, smod(s[0, h], 0, h, qi, kv), -np.inf)
            p = np.exp(sh - res.lse[0, h][:, None])
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)


class TestWorkers:
    def test_threads_bitwise_equal(self, rng, backend):
        q, k, v = qkv(rng, 2, 4, 2, 128, 16)
        bm = create_block_mask(causal(), 2, 4, 128, 128, 32)
        a = forward(q, k, v, None, bm, AttentionConfig(num_workers=1))
        b = forward(q, k, v, None, bm, AttentionConfig(num_workers=4))
        assert np.array_equal(a.out, b.out) and np.array_equal(a.lse, b.lse)
        ga = backward(q, k, v, a.out, a.lse, a.out, None, bm, cfg=AttentionConfig(num_workers=1))
        gb = backward(q, k, v, a.out, a.lse, a.out, None, bm, cfg=AttentionConfig(num_workers=4))
        assert all(np.array_equal(x, y) for x, y in zip((ga.dq, ga.dk, ga.dv), (gb.dq, gb.dk, gb.dv)))

    def test_env_var(self, rng, monkeypatch):
        q, k, v = qkv(rng, 1, 2, 2, 64, 8)
        monkeypatch.setenv("FLEXATTN_NUM_WORKERS", "3")
        assert np.array_equal(forward(q, k, v).out, forward(q, k, v, cfg=AttentionConfig(num_workers=1)).out)


class TestCounters:
    def test_madds_proportional_to_blocks(self, rng):
        q, k, v = qkv(rng, 1, 1, 1, 256, 16)
        c = Counters()
        _, bm = run(q, k, v, causal(), None, 64)
        forward(q, k, v, None, bm, counters=c)
        assert c.blocks == 10
        assert c.madds == 10 * 2 * 64 * 64 * 16
        assert c.mask_evals == 4 * 64 * 64
        assert c.score_evals == 0

    def test_score_evals_on_every_block(self, rng):
        q, k, v = qkv(rng, 1, 1, 1, 128, 8)
        c = Counters()
        bm = create_block_mask(causal(), 1, 1, 128, 128, 32)
        forward(q, k, v, soft_cap(5.0), bm, counters=c)
        assert c.score_evals == 10 * 32 * 32

    def test_demote_counts_exact(self, rng):
        q, k, v = qkv(rng, 1, 2, 2, 200, 8)
        bm = create_block_mask(prefix_lm(70), 1, 2, 200, 200, 32)
        c1, c2 = Counters(), Counters()
        a = forward(q, k, v, None, bm, counters=c1)
        b = forward(q, k, v, None, demote_full(bm), counters=c2)
        full_positions = int(bm.full_kv_num.sum()) * 32 * 32
        assert c2.mask_evals - c1.mask_evals == full_positions
        assert oracle.max_abs(a.out, b.out) <= 1e-6

    def test_force_dense_unobservable(self, rng):
        q, k, v = qkv(rng, 1, 2, 2, 200, 8)
        bm = create_block_mask(document_mask(np.arange(200) // 33), 1, 2, 200, 200, 32)
        a = forward(q, k, v, None, bm)
        b = forward(q, k, v, None, force_dense(bm))
        assert oracle.max_abs(a.out, b.out) <= 1e-6

    def test_backward_counts(self, rng):
        q, k, v = qkv(rng, 1, 1, 1, 128, 8)
        bm = create_block_mask(causal(), 1, 1, 128, 128, 32)
        f = forward(q, k, v, None, bm)
        c = Counters()
        backward(q, k, v, f.out, f.lse, f.out, None, bm, counters=c)
        assert c.blocks == 20
        assert c.madds == 10 * (3 + 4) * 32 * 32 * 8


class TestBlockMaskChecks:
    def test_length_mismatch(self, rng):
        q, k, v = qkv(rng, 1, 1, 1, 64, 8)
        with pytest.raises(BlockMaskMismatch):
            forward(q, k, v, None, create_block_mask(causal(), 1, 1, 32, 64, 16))

    def test_head_mismatch(self, rng):
        q, k, v = qkv(rng, 1, 4, 4, 64, 8)
        with pytest.raises(BlockMaskMismatch):
            forward(q, k, v, None, create_block_mask(causal(), 1, 2, 64, 64, 16))

    def test_partial_without_source(self, rng):
        from dataclasses import replace
        q, k, v = qkv(rng, 1, 1, 1, 64, 8)
        bm = replace(create_block_mask(causal(), 1, 1, 64, 64, 16), source_mask=None)
        with pytest.raises(BlockMaskMismatch, match="source mask"):
            forward(q, k, v, None, bm)


def fd_check(q, k, v, mask, smod, bs=4):
    bm = create_block_mask(mask, q.shape[0], q.shape[1], q.shape[2], k.shape[2], bs, bs)
    f = forward(q, k, v, smod, bm)
    g = backward(q, k, v, f.out, f.lse, f.out, smod, bm, transpose(bm))
    fd = oracle.dense_backward_fd(q, k, v, smod, mask)
    for got, ref in ((g.dq, fd.dq), (g.dk, fd.dk), (g.dv, fd.dv)):
        assert np.linalg.norm(got - ref) <= 1e-6 * np.linalg.norm(ref)
    return g


class TestBackward:
    def test_single_token(self, backend):
        one = lambda x: np.full((1, 1, 1, 1), x, dtype=np.float64)  # noqa: E731
        cfg = AttentionConfig(scale=1.0)
        f = forward(one(2), one(3), one(5), cfg=cfg)
        g = backward(one(2), one(3), one(5), f.out, f.lse, one(1), cfg=cfg)
        assert (g.dv.item(), g.dq.item(), g.dk.item()) == (1.0, 0.0, 0.0)

    @pytest.mark.parametrize("name", sorted(VARIANTS))
    def test_finite_differences(self, name, rng, backend):
        mask, smod = VARIANTS[name]
        if name == "document":
            mask = document_mask(np.array([0, 0, 0, 1, 1, 2, 2, 2]))
        elif name == "prefix_lm":
            mask = prefix_lm(3)
        elif name == "sliding":
            mask = sliding_window(2)
        if smod is not None and name == "alibi":
            smod = alibi(alibi_slopes(2))
        q, k, v = qkv(rng, 1, 2, 2, 8, 4, dtype=np.float64)
        fd_check(q, k, v, mask, smod)

    def test_gqa_and_ragged(self, rng, backend):
        q, k, v = qkv(rng, 2, 4, 1, 7, 3, kv_len=11, dtype=np.float64)
        mask = MaskMod(lambda b, h, qi, kv: kv <= qi + 4)
        fd_check(q, k, v, mask, alibi(alibi_slopes(4)), bs=3)

    def test_against_analytic_oracle(self, rng, backend):
        q, k, v = qkv(rng, 1, 4, 2, 150, 16, dtype=np.float64)
        d_out = rng.uniform(-1, 1, q.shape)
        smod = soft_cap(3.0)
        bm = create_block_mask(sliding_window(60), 1, 4, 150, 150, 32, 32)
        f = forward(q, k, v, smod, bm)
        g = backward(q, k, v, f.out, f.lse, d_out, smod, bm)
        ref = oracle.dense_backward(q, k, v, d_out, smod, sliding_window(60))
        for got, want in ((g.dq, ref.dq), (g.dk, ref.dk), (g.dv, ref.dv)):
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_zero_d_out(self, rng):
        q, k, v = qkv(rng, 1, 1, 1, 16, 4)
        f = forward(q, k, v)
        g = backward(q, k, v, f.out, f.lse, np.zeros_like(q))
        assert not (g.dq.any() or g.dk.any() or g.dv.any())

    def test_masked_positions_get_no_gradient(self, rng):
        q, k, v = qkv(rng, 1, 1, 1, 16, 4, dtype=np.float64)
        bm = create_block_mask(causal(), 1, 1, 16, 16, 4)
        f = forward(q, k, v, None, bm)
        d_out = np.zeros_like(q)
        d_out[0, 0, 5] = 1.0
        g = backward(q, k, v, f.out, f.lse, d_out, None, bm)
        assert not g.dv[0, 0, 6:].any() and not g.dk[0, 0, 6:].any()

    def test_stale_lse(self, rng):
        q, k, v = qkv(rng, 1, 1, 1, 16, 4)
        f = forward(q, k, v)
        with pytest.raises(StaleStatistics):
            backward(q, k, v, f.out, f.lse[..., :8], f.out)

    def test_out_shape(self, rng):
        q, k, v = qkv(rng, 1, 1, 1, 16, 4)
        f = forward(q, k, v)
        with pytest.raises(ShapeMismatch):
            backward(q, k, v, f.out[:, :, :8], f.lse, f.out)

    def test_wrong_transpose(self, rng):
        q, k, v = qkv(rng, 1, 1, 1, 16, 4, kv_len=24)
        bm = create_block_mask(causal(), 1, 1, 16, 24, 4, 8)
        f = forward(q, k, v, None, bm)
        with pytest.raises(BlockMaskMismatch):
            backward(q, k, v, f.out, f.lse, f.out, None, bm, bm)

    def test_score_mod_without_derivative(self, rng):
        q, k, v = qkv(rng, 1, 1, 1, 8, 4)
        sm = ScoreMod(lambda s, b, h, qi, kv: 2 * s)
        f = forward(q, k, v, sm)
        with pytest.raises(TypeError):
            backward(q, k, v, f.out, f.lse, f.out, sm)


class TestDecode:
    def test_offset_zero_full_length(self, rng):
        q, k, v = qkv(rng, 1, 2, 2, 64, 8)
        bm = create_block_mask(causal(), 1, 2, 64, 64, 16)
        a = forward(q, k, v, None, bm, AttentionConfig(block_size_q=16, block_size_kv=16))
        b = decode(q, k, v, 0, causal(), cfg=AttentionConfig(block_size_q=16, block_size_kv=16))
        assert np.array_equal(a.out, b.out)

    def test_token_by_token(self, rng, backend):
        q, k, v = qkv(rng, 1, 2, 1, 128, 16)
        smod = alibi(alibi_slopes(2))
        cfg = AttentionConfig(block_size_q=32, block_size_kv=32)
        full = forward(q, k, v, smod, create_block_mask(causal(), 1, 2, 128, 128, 32), cfg).out
        steps = [decode(q[:, :, t:t + 1], k, v, t, causal(), smod, cfg=cfg).out for t in range(128)]
        assert oracle.max_abs(np.concatenate(steps, axis=2), full) <= 1e-5

    def test_sees_only_prefix(self, rng):
        q, k, v = qkv(rng, 1, 1, 1, 10, 4)
        a = decode(q[:, :, 3:4], k, v, 3, causal()).out
        v2 = v.copy()
        v2[:, :, 4:] = 0
        assert np.array_equal(a, decode(q[:, :, 3:4], k, v2, 3, causal()).out)

    def test_with_prebuilt_mask(self, rng):
        q, k, v = qkv(rng, 1, 1, 1, 40, 4)
        bm = create_block_mask(offset_mask(causal(), 30), 1, 1, 5, 40, 8)
        a = decode(q[:, :, 30:35], k, v, 30, causal(), block_mask=bm,
                   cfg=AttentionConfig(block_size_q=8, block_size_kv=8)).out
        full = forward(q, k, v, None, create_block_mask(causal(), 1, 1, 40, 40, 8)).out
        assert oracle.max_abs(a, full[:, :, 30:35]) <= 1e-6

    @pytest.mark.parametrize("offset", [-1, 10])
    def test_out_of_range(self, rng, offset):
        q, k, v = qkv(rng, 1, 1, 1, 10, 4)
        with pytest.raises(OffsetOutOfRange):
            decode(q[:, :, :1], k, v, offset, causal())
