import numpy as np
import pytest

import contrast_sr.nn as nn
from contrast_sr.attention import (Ocab, overlap_window, rel_bias_lookup,
                                   softmax, unfold_overlapping)
from contrast_sr.errors import ShapeError
from contrast_sr.model import Sgfn
from contrast_sr.tensor import Tensor

from gradcheck import check_gradients, scalar_probe
from oracles import attention_two_loop


def make_ocab(dim=4, window=2, overlap_ratio=0.5, heads=2, seed=0):
    rng = np.random.default_rng(seed)
    return Ocab(dim, window, overlap_ratio, heads, rng, ffn=Sgfn(dim, 2 * dim, rng))


class TestOverlapWindow:
    def test_published_pairings(self):
        assert overlap_window(32, 0.5) == 48
        assert overlap_window(16, 0.5) == 24
        assert overlap_window(4, 0.5) == 6
        assert overlap_window(2, 0.5) == 4
        assert overlap_window(8, 0.0) == 8


class TestUnfold:
    def test_zero_overlap_equals_window_partition(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        a = unfold_overlapping(x, 2, 2)
        b = nn.window_partition(x, 2)
        assert np.array_equal(a.data, b.data)

    def test_corner_zero_border(self, rng):
        x = Tensor(rng.uniform(1.0, 2.0, size=(1, 1, 4, 4)))
        patches = unfold_overlapping(x, 2, 4).data  # pad 1 on all sides
        corner = patches[0].reshape(4, 4)
        assert np.array_equal(corner[0], np.zeros(4))   # padded top row
        assert np.array_equal(corner[:, 0], np.zeros(4))  # padded left column
        assert (corner[1:, 1:] > 0).all()

    def test_patches_match_direct_slices(self, rng):
        x = rng.normal(size=(1, 3, 6, 6))
        m, mo = 3, 5
        patches = unfold_overlapping(Tensor(x), m, mo).data
        pad = (mo - m) // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        k = 0
        for wy in range(2):
            for wx in range(2):
                ref = xp[0, :, wy * m:wy * m + mo, wx * m:wx * m + mo]
                assert np.array_equal(patches[k], ref.reshape(3, -1).T)
                k += 1

    def test_indivisible_extents(self, rng):
        with pytest.raises(ShapeError):
            unfold_overlapping(Tensor(rng.normal(size=(1, 1, 5, 4))), 2, 4)

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        check_gradients(scalar_probe(lambda: unfold_overlapping(x, 2, 4)), [x])


class TestRelBias:
    def test_degenerate_single_cell(self):
        idx = rel_bias_lookup(1, 1)
        assert idx.shape == (1, 1) and idx[0, 0] == 0

    def test_depends_only_on_displacement(self):
        idx = rel_bias_lookup(2, 4)
        # translate query and key by one cell in y (query rows step by M=2's
        # grid; key rows by Mo=4's): displacement preserved => same index
        m, mo = 2, 4
        for q in range(m * m):
            for k in range(mo * mo):
                qy, qx = divmod(q, m)
                ky, kx = divmod(k, mo)
                if qy + 1 < m and ky + 1 < mo:
                    assert idx[q, k] == idx[(qy + 1) * m + qx, (ky + 1) * mo + kx]
                if qx + 1 < m and kx + 1 < mo:
                    assert idx[q, k] == idx[qy * m + qx + 1, ky * mo + kx + 1]

    def test_exhaustive_range(self):
        idx = rel_bias_lookup(2, 4)
        span = (2 + 4 - 1) ** 2
        assert idx.min() >= 0 and idx.max() < span

    def test_identical_positions_share_index(self):
        m, mo = 2, 4
        idx = rel_bias_lookup(m, mo)
        pad = (mo - m) // 2
        vals = set()
        for q in range(m * m):
            qy, qx = divmod(q, m)
            ky, kx = qy + pad, qx + pad  # same spatial cell in the padded grid
            vals.add(idx[q, ky * mo + kx])
        assert len(vals) == 1


class TestOcabAttention:
    def test_single_pixel_identity_weighting(self, rng):
        blk = make_ocab(dim=4, window=1, overlap_ratio=0.0, heads=2)
        x = rng.normal(size=(1, 4, 1, 1))
        out = blk.attention(Tensor(x)).data
        tokens = x.reshape(1, 4)
        kv = tokens @ blk.kv_proj.weight.data.T + blk.kv_proj.bias.data
        v = kv[:, 4:]
        expected = v @ blk.out_proj.weight.data.T + blk.out_proj.bias.data
        assert np.abs(out.reshape(1, 4) - expected).max() < 1e-12

    def test_zero_query_uniform_weights(self, rng):
        blk = make_ocab(dim=4, window=2, overlap_ratio=0.5, heads=2)
        blk.q_proj.weight.data[:] = 0.0
        blk.q_proj.bias.data[:] = 0.0
        blk.rel_pos_bias.data[:] = 0.0
        x = rng.normal(size=(1, 4, 2, 2))
        out = blk.attention(Tensor(x)).data
        tokens = x.reshape(1, 4, 4).transpose(0, 2, 1)
        kv = tokens @ blk.kv_proj.weight.data.T + blk.kv_proj.bias.data
        vmap = kv[:, :, 4:].transpose(0, 2, 1).reshape(1, 4, 2, 2)
        patches = unfold_overlapping(Tensor(vmap), 2, 4).data  # (1, 16, 4)
        mean_v = patches[0].mean(axis=0)
        expected = mean_v @ blk.out_proj.weight.data.T + blk.out_proj.bias.data
        assert np.abs(out.reshape(4, 4) - expected[None].repeat(4, 0).reshape(2, 2, 4)
                      .transpose(2, 0, 1).reshape(4, 4)).max() < 1e-12

    def test_matches_naive_attention_oracle(self, rng):
        blk = make_ocab(dim=4, window=2, overlap_ratio=0.5, heads=2, seed=5)
        x = rng.normal(size=(2, 4, 4, 4))
        out = blk.attention(Tensor(x)).data

        c, m, mo, heads = 4, 2, blk.overlap, 2
        d = c // heads
        tokens = x.reshape(2, c, 16).transpose(0, 2, 1)
        q = tokens @ blk.q_proj.weight.data.T + blk.q_proj.bias.data
        kv = tokens @ blk.kv_proj.weight.data.T + blk.kv_proj.bias.data
        qmap = q.transpose(0, 2, 1).reshape(2, c, 4, 4)
        kvmap = kv.transpose(0, 2, 1).reshape(2, 2 * c, 4, 4)
        qw = nn.window_partition(Tensor(qmap), m).data
        kvw = unfold_overlapping(Tensor(kvmap), m, mo).data
        kw, vw = kvw[:, :, :c], kvw[:, :, c:]

        nw = qw.shape[0]
        qh = qw.reshape(nw, m * m, heads, d).transpose(0, 2, 1, 3)
        kh = kw.reshape(nw, mo * mo, heads, d).transpose(0, 2, 1, 3)
        vh = vw.reshape(nw, mo * mo, heads, d).transpose(0, 2, 1, 3)
        bias = blk.rel_pos_bias.data[:, rel_bias_lookup(m, mo).reshape(-1)] \
            .reshape(heads, m * m, mo * mo)
        attn = attention_two_loop(qh, kh, vh, bias, 1.0 / np.sqrt(d))
        merged = attn.transpose(0, 2, 1, 3).reshape(nw, m * m, c)
        merged = merged @ blk.out_proj.weight.data.T + blk.out_proj.bias.data
        ref = nn.window_reverse(Tensor(merged), m, 4, 4).data
        assert np.abs(out - ref).max() < 1e-10

    def test_zero_overlap_reduces_to_plain_windowed(self, rng):
        blk = make_ocab(dim=4, window=2, overlap_ratio=0.0, heads=2, seed=7)
        x = rng.normal(size=(1, 4, 4, 4))
        out = blk.attention(Tensor(x)).data

        c, m, heads, d = 4, 2, 2, 2
        tokens = x.reshape(1, c, 16).transpose(0, 2, 1)
        q = tokens @ blk.q_proj.weight.data.T + blk.q_proj.bias.data
        kv = tokens @ blk.kv_proj.weight.data.T + blk.kv_proj.bias.data
        qw = nn.window_partition(Tensor(q.transpose(0, 2, 1).reshape(1, c, 4, 4)), m).data
        kvw = nn.window_partition(Tensor(kv.transpose(0, 2, 1).reshape(1, 2 * c, 4, 4)), m).data
        kw, vw = kvw[:, :, :c], kvw[:, :, c:]
        nw = qw.shape[0]
        qh = qw.reshape(nw, m * m, heads, d).transpose(0, 2, 1, 3)
        kh = kw.reshape(nw, m * m, heads, d).transpose(0, 2, 1, 3)
        vh = vw.reshape(nw, m * m, heads, d).transpose(0, 2, 1, 3)
        bias = blk.rel_pos_bias.data[:, rel_bias_lookup(m, m).reshape(-1)] \
            .reshape(heads, m * m, m * m)
        attn = attention_two_loop(qh, kh, vh, bias, 1.0 / np.sqrt(d))
        merged = attn.transpose(0, 2, 1, 3).reshape(nw, m * m, c)
        merged = merged @ blk.out_proj.weight.data.T + blk.out_proj.bias.data
        ref = nn.window_reverse(Tensor(merged), m, 4, 4).data
        assert np.abs(out - ref).max() < 1e-10

    def test_softmax_rows_and_convexity(self, rng):
        logits = Tensor(rng.normal(size=(3, 5, 7)) * 30.0)
        w = softmax(logits).data
        assert np.abs(w.sum(-1) - 1.0).max() < 1e-12
        assert (w >= 0).all()

    def test_output_within_value_range(self, rng):
        blk = make_ocab(dim=4, window=2, overlap_ratio=0.5, heads=2)
        blk.rel_pos_bias.data[:] = 0.0
        x = rng.normal(size=(1, 4, 2, 2))
        # inspect head outputs before the final projection: replace out_proj
        # with identity so convexity survives inspection
        blk.out_proj.weight.data = np.eye(4)
        blk.out_proj.bias.data[:] = 0.0
        out = blk.attention(Tensor(x)).data
        tokens = x.reshape(1, 4, 4).transpose(0, 2, 1)
        kv = tokens @ blk.kv_proj.weight.data.T + blk.kv_proj.bias.data
        vmap = kv[:, :, 4:].transpose(0, 2, 1).reshape(1, 4, 2, 2)
        vw = unfold_overlapping(Tensor(vmap), 2, 4).data[0]  # (mo^2, c)
        for head in range(2):
            cols = slice(head * 2, head * 2 + 2)
            vmin, vmax = vw[:, cols].min(), vw[:, cols].max()
            got = out[0, head * 2:head * 2 + 2]
            assert got.min() >= vmin - 1e-12 and got.max() <= vmax + 1e-12

    def test_key_value_permutation_invariance(self, rng):
        # permuting K and V rows together must not change attention output
        from oracles import attention_two_loop as naive
        q = rng.normal(size=(1, 2, 4, 3))
        k = rng.normal(size=(1, 2, 9, 3))
        v = rng.normal(size=(1, 2, 9, 3))
        bias = np.zeros((2, 4, 9))
        perm = rng.permutation(9)
        base = naive(q, k, v, bias, 0.7)
        shuffled = naive(q, k[:, :, perm], v[:, :, perm], bias, 0.7)
        assert np.abs(base - shuffled).max() < 1e-12

    def test_block_residual_and_gradients(self, rng):
        blk = make_ocab(dim=4, window=2, overlap_ratio=0.5, heads=2)
        x = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
        out = blk(x)
        assert out.shape == x.shape
        params = [blk.rel_pos_bias, blk.q_proj.weight, blk.kv_proj.bias]
        check_gradients(scalar_probe(lambda: blk(x)), [x] + params, h=1e-4)
