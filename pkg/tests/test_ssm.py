import numpy as np
import pytest

import contrast_sr.tensor as T
from contrast_sr.errors import ShapeError
from contrast_sr.model import Sgfn
from contrast_sr.ssm import (Ss2d, VssBlock, cross_merge, cross_scan,
                             selective_scan, vss_block)
from contrast_sr.tensor import Tensor

from gradcheck import check_gradients, scalar_probe
from oracles import selective_scan_sequential, ss2d_straight_line


def random_scan_inputs(rng, b=1, L=8, c=2, n=1, grad=False):
    u = Tensor(rng.normal(size=(b, L, c)), requires_grad=grad)
    delta = Tensor(rng.uniform(0.01, 0.5, size=(b, L, c)), requires_grad=grad)
    A = Tensor(-rng.uniform(0.2, 2.0, size=(c, n)), requires_grad=grad)
    B = Tensor(rng.normal(size=(b, L, n)), requires_grad=grad)
    C = Tensor(rng.normal(size=(b, L, n)), requires_grad=grad)
    D = Tensor(rng.normal(size=(c,)), requires_grad=grad)
    return u, delta, A, B, C, D


class TestSelectiveScan:
    def test_zero_delta_leaves_skip_path(self, rng):
        u, delta, A, B, C, D = random_scan_inputs(rng, L=5)
        delta = Tensor(np.zeros(delta.shape))
        y = selective_scan(u, delta, A, B, C, D)
        assert np.allclose(y.data, D.data * u.data, atol=1e-14)

    def test_single_step_closed_form(self, rng):
        u, delta, A, B, C, D = random_scan_inputs(rng, L=1, c=3, n=2)
        y = selective_scan(u, delta, A, B, C, D)
        h = delta.data[:, 0, :, None] * B.data[:, 0, None, :] * u.data[:, 0, :, None]
        expected = (h * C.data[:, 0, None, :]).sum(-1) + D.data * u.data[:, 0]
        assert np.abs(y.data[:, 0] - expected).max() < 1e-14

    def test_matches_sequential_oracle(self, rng):
        for _ in range(25):
            b = int(rng.integers(1, 3))
            L = int(rng.integers(1, 33))
            c = int(rng.integers(1, 9))
            n = int(rng.integers(1, 5))
            u, delta, A, B, C, D = random_scan_inputs(rng, b=b, L=L, c=c, n=n)
            y = selective_scan(u, delta, A, B, C, D)
            ref = selective_scan_sequential(u.data, delta.data, A.data,
                                            B.data, C.data, D.data)
            assert np.abs(y.data - ref).max() < 1e-10

    def test_parallel_agrees_with_loop(self, rng):
        u, delta, A, B, C, D = random_scan_inputs(rng, b=2, L=37, c=4, n=3)
        y_loop = selective_scan(u, delta, A, B, C, D, method="loop")
        y_par = selective_scan(u, delta, A, B, C, D, method="parallel")
        assert np.abs(y_loop.data - y_par.data).max() < 1e-10

    def test_linearity_in_input(self, rng):
        _, delta, A, B, C, D = random_scan_inputs(rng, L=6, c=3, n=2)
        u1 = Tensor(rng.normal(size=(1, 6, 3)))
        u2 = Tensor(rng.normal(size=(1, 6, 3)))
        alpha, beta = 0.7, -1.3
        lhs = selective_scan(Tensor(alpha * u1.data + beta * u2.data), delta, A, B, C, D)
        rhs = alpha * selective_scan(u1, delta, A, B, C, D).data \
            + beta * selective_scan(u2, delta, A, B, C, D).data
        assert np.abs(lhs.data - rhs).max() < 1e-12

    def test_causality(self, rng):
        u, delta, A, B, C, D = random_scan_inputs(rng, L=10, c=2, n=2)
        y0 = selective_scan(u, delta, A, B, C, D).data
        bumped = u.data.copy()
        bumped[:, 6] += 1.0
        y1 = selective_scan(Tensor(bumped), delta, A, B, C, D).data
        assert np.array_equal(y0[:, :6], y1[:, :6])
        assert not np.allclose(y0[:, 6:], y1[:, 6:])

    def test_stability_long_constant_input(self):
        L = 10_000
        ones = np.ones((1, L, 1))
        y = selective_scan(Tensor(ones), Tensor(0.05 * ones),
                           Tensor(np.array([[-1.0]])), Tensor(np.ones((1, L, 1))),
                           Tensor(np.ones((1, L, 1))), Tensor(np.ones(1)))
        assert np.isfinite(y.data).all()
        # geometric bound: |h| <= delta / (1 - exp(-delta)) with unit drive
        assert np.abs(y.data).max() < 0.05 / (1 - np.exp(-0.05)) + 1.0 + 1e-9

    def test_shape_errors(self, rng):
        u, delta, A, B, C, D = random_scan_inputs(rng)
        with pytest.raises(ShapeError):
            selective_scan(u, Tensor(np.zeros((1, 3, 2))), A, B, C, D)
        with pytest.raises(ShapeError):
            selective_scan(u, delta, A, Tensor(np.zeros((1, 8, 3))), C, D)
        with pytest.raises(ShapeError):
            selective_scan(u, delta, A, B, C, Tensor(np.zeros(5)))

    def test_gradients_all_inputs(self, rng):
        inputs = random_scan_inputs(rng, b=1, L=5, c=2, n=2, grad=True)
        check_gradients(scalar_probe(lambda: selective_scan(*inputs)), list(inputs))

    def test_gradients_parallel_path(self, rng):
        inputs = random_scan_inputs(rng, b=1, L=6, c=2, n=1, grad=True)
        check_gradients(scalar_probe(
            lambda: selective_scan(*inputs, method="parallel")), list(inputs))


class TestCrossScan:
    def test_single_pixel(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 1, 1)))
        seqs = cross_scan(x)
        assert seqs.shape == (1, 4, 1, 3)
        for d in range(4):
            assert np.array_equal(seqs.data[:, d, 0], x.data[:, :, 0, 0])
        merged = cross_merge(seqs, 1, 1)
        assert np.allclose(merged.data, 4 * x.data)

    def test_2x2_orders(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        seqs = cross_scan(x).data[0, :, :, 0]
        assert np.array_equal(seqs[0], [1, 2, 3, 4])      # row-major
        assert np.array_equal(seqs[1], [4, 3, 2, 1])      # row-major reversed
        assert np.array_equal(seqs[2], [1, 3, 2, 4])      # column-major
        assert np.array_equal(seqs[3], [4, 2, 3, 1])      # column-major reversed

    def test_expand_merge_round_trip(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 5)))
        merged = cross_merge(cross_scan(x), 4, 5)
        assert np.allclose(merged.data, 4 * x.data, atol=1e-14)

    def test_adjointness(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        y = rng.normal(size=(2, 4, 20, 3))
        lhs = (cross_scan(Tensor(x)).data * y).sum()
        rhs = (x * cross_merge(Tensor(y), 4, 5).data).sum()
        assert abs(lhs - rhs) < 1e-10

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        check_gradients(scalar_probe(lambda: cross_scan(x)), [x])
        y = Tensor(rng.normal(size=(1, 4, 9, 2)), requires_grad=True)
        check_gradients(scalar_probe(lambda: cross_merge(y, 3, 3)), [y])


def make_ss2d(dim=4, gate=False, seed=0):
    return Ss2d(dim, state_dim=2, ssm_ratio=1.0, dt_rank=2,
                rng=np.random.default_rng(seed), gate=gate)


class TestSs2d:
    def test_zero_weights_give_bias(self, rng):
        blk = make_ss2d()
        for _, p in blk.named_parameters():
            p.data = np.zeros_like(p.data)
        blk.out_proj.bias.data = np.array([1.0, -2.0, 0.5, 3.0])
        out = blk(Tensor(rng.normal(size=(1, 4, 3, 3))))
        assert np.allclose(out.data, blk.out_proj.bias.data.reshape(1, 4, 1, 1))

    def test_shape_contract(self, rng):
        blk = make_ss2d()
        for h, w in [(2, 2), (3, 5), (6, 4)]:
            out = blk(Tensor(rng.normal(size=(2, 4, h, w))))
            assert out.shape == (2, 4, h, w)

    @pytest.mark.parametrize("gate", [False, True])
    def test_straight_line_oracle(self, rng, gate):
        blk = make_ss2d(gate=gate, seed=3)
        x = rng.normal(size=(1, 4, 4, 4))
        out = blk(Tensor(x))
        ref = ss2d_straight_line(x, blk, gate)
        assert np.abs(out.data - ref).max() < 1e-10


class TestVssBlock:
    def make_block(self, dim=8, seed=0, gate=False):
        rng = np.random.default_rng(seed)
        ffn = Sgfn(dim, 2 * dim, rng)
        return VssBlock(dim, state_dim=1, ssm_ratio=1.0, dt_rank=1,
                        rng=rng, ffn=ffn, gate=gate)

    def test_residual_identity_when_zeroed(self, rng):
        blk = self.make_block()
        blk.ss2d.out_proj.weight.data[:] = 0.0
        blk.ss2d.out_proj.bias.data[:] = 0.0
        blk.ffn.w2.weight.data[:] = 0.0
        blk.ffn.w2.bias.data[:] = 0.0
        x = rng.normal(size=(1, 8, 4, 4))
        out = blk(Tensor(x))
        assert np.allclose(out.data, x, atol=1e-14)

    def test_shape_preserved(self, rng):
        blk = self.make_block()
        out = blk(Tensor(rng.normal(size=(2, 8, 4, 8))))
        assert out.shape == (2, 8, 4, 8)

    def test_gradient_whole_block(self, rng):
        blk = self.make_block()
        x = Tensor(rng.normal(size=(1, 8, 4, 4)), requires_grad=True)
        err = check_gradients(scalar_probe(lambda: vss_block(x, blk)), [x])
        assert err < 1e-4
