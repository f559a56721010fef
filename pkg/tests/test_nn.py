import numpy as np
import pytest

import contrast_sr.nn as nn
from contrast_sr.errors import ShapeError
from contrast_sr.tensor import Tensor

from gradcheck import check_gradients, scalar_probe
from oracles import conv2d_loops


def make_conv(cin, cout, k, groups=1, seed=0):
    return nn.Conv2d(cin, cout, k, np.random.default_rng(seed), groups=groups)


class TestConv2d:
    def test_identity_1x1(self, rng):
        conv = make_conv(2, 2, 1)
        conv.weight.data = np.eye(2).reshape(2, 2, 1, 1)
        conv.bias.data = np.zeros(2)
        x = rng.uniform(size=(1, 2, 5, 5))
        out = nn.conv2d(Tensor(x), conv)
        assert np.allclose(out.data, x)

    def test_ones_kernel_on_constant(self):
        conv = make_conv(1, 1, 3)
        conv.weight.data = np.ones((1, 1, 3, 3))
        conv.bias.data = np.zeros(1)
        out = nn.conv2d(Tensor(np.full((1, 1, 5, 5), 2.0)), conv)
        assert np.allclose(out.data[0, 0, 1:-1, 1:-1], 18.0)  # 9 * c interior

    def test_against_loop_oracle(self, rng):
        conv = make_conv(2, 3, 3, seed=1)
        x = rng.normal(size=(1, 2, 5, 5))
        out = nn.conv2d(Tensor(x), conv)
        ref = conv2d_loops(x, conv.weight.data, conv.bias.data, padding=1)
        assert np.abs(out.data - ref).max() < 1e-12

    def test_grouped_matches_loop_oracle(self, rng):
        conv = make_conv(4, 6, 3, groups=2, seed=2)
        x = rng.normal(size=(2, 4, 4, 4))
        out = nn.conv2d(Tensor(x), conv)
        ref = conv2d_loops(x, conv.weight.data, conv.bias.data, padding=1, groups=2)
        assert np.abs(out.data - ref).max() < 1e-12

    def test_depthwise_equals_per_channel(self, rng):
        conv = make_conv(3, 3, 3, groups=3, seed=3)
        x = rng.normal(size=(1, 3, 6, 6))
        out = nn.conv2d(Tensor(x), conv)
        for c in range(3):
            single = conv2d_loops(x[:, c:c + 1], conv.weight.data[c:c + 1],
                                  conv.bias.data[c:c + 1], padding=1)
            assert np.abs(out.data[:, c:c + 1] - single).max() < 1e-12

    def test_channel_mismatch(self, rng):
        conv = make_conv(2, 2, 3)
        with pytest.raises(ShapeError):
            nn.conv2d(Tensor(rng.normal(size=(1, 3, 5, 5))), conv)

    def test_gradients(self, rng):
        conv = make_conv(2, 3, 3, seed=4)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        check_gradients(scalar_probe(lambda: nn.conv2d(x, conv)),
                        [x, conv.weight, conv.bias])


class TestLinear:
    def test_identity(self, rng):
        lin = nn.Linear(3, 3, rng)
        lin.weight.data = np.eye(3)
        lin.bias.data = np.zeros(3)
        x = rng.normal(size=(2, 3))
        assert np.allclose(lin(Tensor(x)).data, x)

    def test_zero_weight_broadcasts_bias(self, rng):
        lin = nn.Linear(3, 2, rng)
        lin.weight.data = np.zeros((2, 3))
        lin.bias.data = np.array([5.0, -1.0])
        out = lin(Tensor(rng.normal(size=(4, 3))))
        assert np.allclose(out.data, [[5.0, -1.0]] * 4)

    def test_against_matmul_oracle(self, rng):
        lin = nn.Linear(4, 3, rng)
        x = rng.normal(size=(2, 5, 4))
        out = lin(Tensor(x))
        ref = x @ lin.weight.data.T + lin.bias.data
        assert np.abs(out.data - ref).max() < 1e-12

    def test_mismatch(self, rng):
        with pytest.raises(ShapeError):
            nn.Linear(4, 3, rng)(Tensor(rng.normal(size=(2, 5))))

    def test_gradients(self, rng):
        lin = nn.Linear(3, 2, rng)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        check_gradients(scalar_probe(lambda: lin(x)), [x, lin.weight, lin.bias])


class TestLayerNorm:
    def test_constant_gives_beta(self):
        ln = nn.LayerNorm(4)
        ln.beta.data = np.array([1.0, 2.0, 3.0, 4.0])
        out = ln(Tensor(np.full((2, 4), 7.0)))
        assert np.allclose(out.data, [[1, 2, 3, 4]] * 2)

    def test_symmetric_pair(self):
        out = nn.LayerNorm(2)(Tensor(np.array([[1.0, -1.0]])))
        expected = 1.0 / np.sqrt(1.0 + 1e-6)
        assert np.allclose(out.data, [[expected, -expected]], atol=1e-12)

    def test_statistics(self, rng):
        ln = nn.LayerNorm(16)
        ln.gamma.data = rng.uniform(0.5, 1.5, 16)
        ln.beta.data = np.full(16, 0.3)
        out = ln(Tensor(rng.normal(size=(400, 16)))).data
        assert abs(out.mean() - 0.3) < 5e-2
        assert abs(out.var() - (ln.gamma.data ** 2).mean()) < 0.15

    def test_gradients(self, rng):
        ln = nn.LayerNorm(5)
        ln.gamma.data = rng.uniform(0.5, 1.5, 5)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        check_gradients(scalar_probe(lambda: ln(x)), [x, ln.gamma, ln.beta])


class TestPixelShuffle:
    def test_definitional_layout(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
        out = nn.pixel_shuffle(x, 2)
        assert np.array_equal(out.data[0, 0], [[1.0, 2.0], [3.0, 4.0]])

    def test_r1_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        assert np.array_equal(nn.pixel_shuffle(Tensor(x), 1).data, x)

    def test_round_trip(self, rng):
        x = rng.normal(size=(2, 12, 3, 5))
        out = nn.pixel_unshuffle(nn.pixel_shuffle(Tensor(x), 2), 2)
        assert np.array_equal(out.data, x)

    def test_preserves_sum_and_multiset(self, rng):
        x = rng.normal(size=(1, 8, 2, 3))
        out = nn.pixel_shuffle(Tensor(x), 2).data
        assert abs(out.sum() - x.sum()) < 1e-12
        assert np.array_equal(np.sort(out.ravel()), np.sort(x.ravel()))

    def test_indivisible_channels(self, rng):
        with pytest.raises(ShapeError):
            nn.pixel_shuffle(Tensor(rng.normal(size=(1, 6, 2, 2))), 2)

    def test_gradient_is_inverse_rearrangement(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 2, 2)), requires_grad=True)
        check_gradients(scalar_probe(lambda: nn.pixel_shuffle(x, 2)), [x])


class TestWindows:
    def test_single_window(self, rng):
        x = rng.normal(size=(1, 3, 4, 4))
        wins = nn.window_partition(Tensor(x), 4)
        assert wins.shape == (1, 16, 3)
        assert np.array_equal(wins.data[0], x[0].reshape(3, 16).T)

    def test_four_windows_top_left(self, rng):
        x = rng.normal(size=(1, 1, 4, 4))
        wins = nn.window_partition(Tensor(x), 2)
        assert wins.shape == (4, 4, 1)
        assert np.array_equal(wins.data[0, :, 0], x[0, 0, :2, :2].ravel())

    def test_round_trip(self, rng):
        x = rng.normal(size=(2, 5, 6, 8))
        wins = nn.window_partition(Tensor(x), 2)
        back = nn.window_reverse(wins, 2, 6, 8)
        assert np.array_equal(back.data, x)

    def test_indivisible(self, rng):
        with pytest.raises(ShapeError):
            nn.window_partition(Tensor(rng.normal(size=(1, 1, 5, 4))), 2)

    def test_pad_crop_round_trip(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 5, 7)))
        padded, (h, w) = nn.pad_to_multiple(x, 4)
        assert padded.shape[-2] % 4 == 0 and padded.shape[-1] % 4 == 0
        assert np.array_equal(nn.crop_to(padded, h, w).data, x.data)


class TestInit:
    def test_same_seed_bit_identical(self):
        a = nn.init_params(42, "weight", (100, 30))
        b = nn.init_params(42, "weight", (100, 30))
        assert np.array_equal(a, b)

    def test_truncation_bound(self):
        draws = nn.init_params(0, "weight", (100_000,))
        assert np.abs(draws).max() <= 0.04

    def test_sample_mean(self):
        draws = nn.init_params(1, "weight", (100_000,))
        # mean of 1e5 truncated draws within 3 sigma / sqrt(n)
        assert abs(draws.mean()) < 3 * 0.02 / np.sqrt(draws.size)

    def test_other_kinds(self):
        assert np.array_equal(nn.init_params(0, "bias", (4,)), np.zeros(4))
        assert np.array_equal(nn.init_params(0, "norm_gamma", (4,)), np.ones(4))
        assert np.array_equal(nn.init_params(0, "norm_beta", (4,)), np.zeros(4))
        with pytest.raises(ValueError):
            nn.init_params(0, "mystery", (4,))
