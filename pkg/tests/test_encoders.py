import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdil import autograd as ag
from sdil.autograd import Tensor
from sdil.dim import DimEncoder, pool_history
from sdil.nn import attention, masked_mean
from sdil.sim import SimEncoder, multi_head_attention

L = 20


def dim_encoder(d=8, n_items=30, layers=2, heads=1, seed=0):
    return DimEncoder(5, n_items, d, L, layers, heads, np.random.default_rng(seed), init_std=0.3)


def random_context(rng, n_items=30, lo=1, hi=L, batch=1):
    ctx = np.zeros((batch, L), dtype=np.int64)
    for b in range(batch):
        k = int(rng.integers(lo, hi + 1))
        ctx[b, L - k:] = rng.integers(1, n_items + 1, size=k)
    return ctx


def softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


class TestEmbedContext:
    def test_all_padding_is_zero(self):
        enc = dim_encoder()
        ctx = np.zeros((1, L), dtype=np.int64)
        assert not enc.embed_context(ctx, ctx != 0).data.any()

    def test_single_item_last_slot(self):
        enc = dim_encoder()
        ctx = np.zeros((1, L), dtype=np.int64)
        ctx[0, -1] = 7
        x = enc.embed_context(ctx, ctx != 0).data[0]
        np.testing.assert_array_equal(x[-1], enc.item_emb.data[7] + enc.pos_emb.data[19])
        assert not x[:-1].any()

    def test_direct_table_reads(self):
        enc = dim_encoder()
        rng = np.random.default_rng(1)
        ctx = random_context(rng, batch=4)
        x = enc.embed_context(ctx, ctx != 0).data
        for b in range(4):
            for s in range(L):
                want = enc.item_emb.data[ctx[b, s]] + enc.pos_emb.data[s] if ctx[b, s] else np.zeros(8)
                np.testing.assert_array_equal(x[b, s], want)

    def test_out_of_range_id(self):
        enc = dim_encoder()
        ctx = np.full((1, L), 31)
        with pytest.raises(IndexError):
            enc.embed_context(ctx, ctx != 0)


class TestAttention:
    def test_single_valid_position(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(1, 4, 3)))
        mask = np.array([[False, False, False, True]])
        w = [Tensor(rng.normal(size=(3, 3))) for _ in range(3)]
        _, weights = attention(x, mask, *w, return_weights=True)
        np.testing.assert_array_equal(weights.data[0, 0, :, 3], np.ones(4))

    def test_two_slot_hand_computed(self):
        x = np.array([[0.5, -1.0], [2.0, 0.25]])
        wq = np.array([[0.1, 0.2], [-0.3, 0.4]])
        wk = np.array([[0.5, -0.1], [0.2, 0.3]])
        wv = np.array([[1.0, 0.5], [-0.5, 2.0]])
        want = np.zeros((2, 2))
        for i in range(2):
            q = [sum(x[i, a] * wq[a, c] for a in range(2)) for c in range(2)]
            s = []
            for j in range(2):
                k = [sum(x[j, a] * wk[a, c] for a in range(2)) for c in range(2)]
                s.append((q[0] * k[0] + q[1] * k[1]) / math.sqrt(2))
            e = [math.exp(v) for v in s]
            p = [v / sum(e) for v in e]
            for c in range(2):
                want[i, c] = sum(p[j] * sum(x[j, a] * wv[a, c] for a in range(2)) for j in range(2))
        out = attention(Tensor(x[None]), np.ones((1, 2), bool), Tensor(wq), Tensor(wk), Tensor(wv)).data[0]
        np.testing.assert_allclose(out, want, atol=1e-10, rtol=0)

    def test_identical_rows_give_identical_outputs(self):
        enc = dim_encoder(layers=1)
        for k in ("ffn_w1", "ffn_w2"):
            enc.blocks[0].p[k].data[:] = 0.0
        x = Tensor(np.tile(np.random.default_rng(2).normal(size=8), (1, 5, 1)))
        out = enc.blocks[0](x, np.ones((1, 5), bool)).data[0]
        assert np.allclose(out, out[0], atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000))
    def test_rows_sum_to_one_over_valid_keys(self, seed):
        rng = np.random.default_rng(seed)
        ctx = random_context(rng, batch=2)
        mask = ctx != 0
        x = Tensor(rng.normal(size=(2, L, 4)))
        w = [Tensor(rng.normal(size=(4, 4))) for _ in range(3)]
        _, weights = attention(x, mask, *w, heads=2, return_weights=True)
        s = (weights.data * mask[:, None, None, :]).sum(-1)
        np.testing.assert_allclose(s, 1.0, atol=1e-12)


class TestPooling:
    def test_one_and_two_rows(self):
        x = Tensor(np.array([[[9.0, 9.0], [1.0, 2.0], [3.0, 6.0]]]))
        np.testing.assert_array_equal(pool_history(x, np.array([[False, False, True]])).data, [[3.0, 6.0]])
        np.testing.assert_array_equal(pool_history(x, np.array([[False, True, True]])).data, [[2.0, 4.0]])

    def test_masked_mean_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 7, 3))
        mask = rng.random((5, 7)) < 0.6
        mask[:, -1] = True
        want = np.array([x[b][mask[b]].sum(0) / mask[b].sum() for b in range(5)])
        np.testing.assert_allclose(masked_mean(Tensor(x), mask).data, want, atol=1e-14)

    def test_all_padding_rejected(self):
        with pytest.raises(ag.UsageError):
            masked_mean(Tensor(np.ones((1, 3, 2))), np.zeros((1, 3), bool))


class TestDimEncoder:
    def test_zero_layers_is_mean_of_embeddings(self):
        enc = dim_encoder(layers=0)
        ctx = random_context(np.random.default_rng(4), batch=3)
        mask = ctx != 0
        rows = enc.item_emb.data[ctx] + enc.pos_emb.data[None]
        want = np.array([rows[b][mask[b]].mean(0) for b in range(3)])
        np.testing.assert_allclose(enc(ctx, mask).data, want, atol=1e-14)

    def test_base_intensity_cases(self):
        enc = dim_encoder(d=3)
        zero = Tensor(np.zeros((1, 3)))
        assert enc.base_intensity(zero, np.array([0]), np.array([[4]])).data[0, 0] == 0.0
        enc.item_emb.data[4] = [0.0, 1.0, 0.0]
        unit = Tensor(np.array([[0.0, 1.0, 0.0]]))
        assert enc.base_intensity(unit, np.array([0]), np.array([[4]])).data[0, 0] == 1.0

    def test_base_intensity_loop_oracle(self):
        enc = dim_encoder(d=5)
        rng = np.random.default_rng(5)
        enc.user_bias.data[:] = rng.normal(size=5)
        enc.item_bias.data[1:] = rng.normal(size=30)
        e_h = rng.normal(size=(2, 5))
        users, cands = np.array([1, 3]), rng.integers(1, 31, size=(2, 4))
        got = enc.base_intensity(Tensor(e_h), users, cands).data
        for b in range(2):
            for c in range(4):
                v = cands[b, c]
                want = sum(e_h[b, k] * enc.item_emb.data[v, k] for k in range(5))
                want += enc.user_bias.data[users[b]] + enc.item_bias.data[v]
                assert abs(got[b, c] - want) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000))
    def test_padding_irrelevance(self, seed):
        rng = np.random.default_rng(seed)
        enc = dim_encoder(seed=seed % 7)
        ctx = random_context(rng, hi=12)
        mask = ctx != 0
        base = enc(ctx, mask).data
        # whatever sits in padded slots is ignored
        junk = np.where(mask, ctx, rng.integers(1, 31, size=ctx.shape))
        assert np.array_equal(enc(junk, mask).data, base)
        # a shorter window with less padding gives the same result
        short = ctx[:, -12:]
        np.testing.assert_allclose(enc(short, short != 0).data, base, rtol=0, atol=1e-13)

    def test_frozen_padding_rows_after_steps(self):
        enc = dim_encoder()
        params = enc.params()
        opt = ag.Adam(params, lr=0.1)
        ctx = random_context(np.random.default_rng(6), batch=3)
        for _ in range(3):
            with ag.Tape() as tape:
                e_h = enc(ctx, ctx != 0)
                loss = ag.sum(enc.base_intensity(e_h, np.array([0, 1, 2]), np.array([[0, 1]] * 3)))
            ag.backward(loss, tape)
            for p in params.values():
                if p.grad is None:
                    p.zero_grad()
            opt.step()
        assert not enc.item_emb.data[0].any() and enc.item_bias.data[0] == 0.0


class Cat:
    def __init__(self, n_items, rng, n_cat=4, n_brand=5):
        self.item_cat = np.concatenate([[0], rng.integers(1, n_cat + 2, size=n_items)])
        self.item_brand = np.concatenate([[0], rng.integers(1, n_brand + 2, size=n_items)])
        self.item_price = np.concatenate([[0], rng.integers(1, 12, size=n_items)])


def sim_encoder(d=8, heads=4, layers=2, seed=0):
    return SimEncoder(4, 5, d, layers, heads, np.random.default_rng(seed), init_std=0.3)


class TestSimEncoder:
    def test_fuse_features(self):
        enc = sim_encoder()
        cat = Cat(30, np.random.default_rng(0))
        cat.item_cat[3] = cat.item_brand[3] = 1
        cat.item_price[3] = 11
        ctx = np.array([[0, 3, 8]])
        f = enc.fuse_features(ctx, ctx != 0, cat.item_cat, cat.item_brand, cat.item_price).data[0]
        assert not f[0].any()
        np.testing.assert_array_equal(f[1], enc.cat_emb.data[1] + enc.brand_emb.data[1] + enc.price_emb.data[11])
        want = (enc.cat_emb.data[cat.item_cat[8]] + enc.brand_emb.data[cat.item_brand[8]]
                + enc.price_emb.data[cat.item_price[8]])
        np.testing.assert_array_equal(f[2], want)

    def test_single_head_matches_plain_attention(self):
        rng = np.random.default_rng(1)
        f = Tensor(rng.normal(size=(2, 6, 4)))
        mask = rng.random((2, 6)) < 0.7
        mask[:, -1] = True
        w = [Tensor(rng.normal(size=(4, 4))) for _ in range(3)]
        a = multi_head_attention(f, mask, *w, Tensor(np.eye(4)), heads=1).data
        np.testing.assert_array_equal(a, attention(f, mask, *w).data)

    def test_two_head_hand_oracle(self):
        rng = np.random.default_rng(2)
        f = rng.normal(size=(2, 4))
        wq, wk, wv, wo = (rng.normal(size=(4, 4)) for _ in range(4))
        heads = []
        for h in range(2):
            sl = slice(2 * h, 2 * h + 2)
            q, k, v = f @ wq[:, sl], f @ wk[:, sl], f @ wv[:, sl]
            p = np.array([softmax(q[i] @ k.T / math.sqrt(2)) for i in range(2)])
            heads.append(p @ v)
        want = np.concatenate(heads, axis=1) @ wo
        got = multi_head_attention(Tensor(f[None]), np.ones((1, 2), bool), Tensor(wq), Tensor(wk),
                                   Tensor(wv), Tensor(wo), heads=2).data[0]
        np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            sim_encoder(d=6, heads=4)

    def test_duplicated_item_equals_single(self):
        enc = sim_encoder()
        cat = Cat(30, np.random.default_rng(3))
        one = np.zeros((1, L), dtype=np.int64)
        one[0, -1] = 5
        many = np.zeros((1, L), dtype=np.int64)
        many[0, -4:] = 5
        np.testing.assert_allclose(enc(many, many != 0, cat).data, enc(one, one != 0, cat).data, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        enc = sim_encoder(seed=seed % 5)
        cat = Cat(30, rng)
        ctx = random_context(rng, lo=2)
        mask = ctx != 0
        k = int(mask.sum())
        perm = ctx.copy()
        perm[0, L - k:] = rng.permutation(ctx[0, L - k:])
        np.testing.assert_allclose(enc(perm, mask, cat).data, enc(ctx, mask, cat).data, atol=1e-12, rtol=0)
        # encoded rows move with their items
        fa = enc.fuse_features(ctx, mask, cat.item_cat, cat.item_brand, cat.item_price)
        fb = enc.fuse_features(perm, mask, cat.item_cat, cat.item_brand, cat.item_price)
        ea, eb = enc.encode(fa, mask).data[0], enc.encode(fb, mask).data[0]
        for s in range(L - k, L):
            match = np.where((fb.data[0] == fa.data[0, s]).all(axis=1))[0]
            assert any(np.allclose(eb[m], ea[s], atol=1e-12) for m in match)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000))
    def test_padding_irrelevance(self, seed):
        rng = np.random.default_rng(seed)
        enc = sim_encoder(seed=seed % 5)
        cat = Cat(30, rng)
        ctx = random_context(rng, hi=12)
        mask = ctx != 0
        base = enc(ctx, mask, cat).data
        junk = np.where(mask, ctx, rng.integers(1, 31, size=ctx.shape))
        assert np.array_equal(enc(junk, mask, cat).data, base)
        short = ctx[:, -12:]
        np.testing.assert_allclose(enc(short, short != 0, cat).data, base, rtol=0, atol=1e-13)
