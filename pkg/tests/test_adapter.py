import math

import numpy as np
import pytest
from scipy.special import erf

from colonmm import autodiff as ad
from colonmm.adapter import (
    AdapterConfig,
    AdapterParams,
    EncoderConfig,
    MlpAdapterParams,
    adapter_forward,
    adaptive_avg_pool2d,
    grad_check,
    init_adapter_params,
    init_encoder_params,
    init_mlp_adapter_params,
    mlp_adapter_forward,
    patch_embed,
    positional_conv,
    visual_token_count,
)
from colonmm.autodiff import Tensor
from colonmm.errors import ShapeError, UsageError

TOKEN_TABLE = [
    ((16, 8), True, 321, "44.03"),
    ((14, 7), True, 246, "33.74"),
    ((14, 7), False, 245, "33.61"),
    ((12, 6), True, 181, "24.83"),
    ((10, 5), True, 126, "17.28"),
    ((8, 4), True, 81, "11.11"),
]


def naive_gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def naive_pool(grid, s):
    h, w, c = grid.shape
    out = np.zeros((s, s, c))
    for i in range(s):
        for j in range(s):
            r0, r1 = math.floor(i * h / s), math.ceil((i + 1) * h / s)
            c0, c1 = math.floor(j * w / s), math.ceil((j + 1) * w / s)
            out[i, j] = grid[r0:r1, c0:c1].mean(axis=(0, 1))
    return out


def naive_conv3x3(grid, weight, bias):
    h, w, cin = grid.shape
    cout = weight.shape[0]
    padded = np.zeros((h + 2, w + 2, cin))
    padded[1:-1, 1:-1] = grid
    out = np.zeros((h, w, cout))
    for y in range(h):
        for x in range(w):
            for o in range(cout):
                acc = 0.0
                for dy in range(3):
                    for dx in range(3):
                        for c in range(cin):
                            acc += padded[y + dy, x + dx, c] * weight[o, c, dy, dx]
                out[y, x, o] = acc + bias[o]
    return out


def naive_adapter_forward(E, g_h, g_w, cfg, params):
    """Independent straight-line re-implementation of the adapter."""
    x = naive_gelu(E @ params.linear1_w.data + params.linear1_b.data)
    grid = x.reshape(g_h, g_w, cfg.out_dim)
    blocks = []
    for s in cfg.kernels:
        pooled = naive_pool(grid, s)
        encoded = naive_conv3x3(pooled, params.pos_conv_w.data, params.pos_conv_b.data)
        blocks.append(encoded.reshape(s * s, cfg.out_dim))
    if cfg.include_global:
        blocks.append(grid.mean(axis=(0, 1)).reshape(1, cfg.out_dim))
    tokens = np.concatenate(blocks, axis=0)
    return tokens @ params.linear2_w.data + params.linear2_b.data


def o1_adapter_params(rng, d, D):
    t = lambda shape: Tensor(rng.normal(0, 0.6, size=shape), requires_grad=True)
    return AdapterParams(
        linear1_w=t((d, D)), linear1_b=t((D,)),
        pos_conv_w=t((D, D, 3, 3)), pos_conv_b=t((D,)),
        linear2_w=t((D, D)), linear2_b=t((D,)),
    )


class TestPatchEmbed:
    def test_paper_default_729_rows(self):
        cfg = EncoderConfig(height=384, width=384, patch=14, dim=8)
        out = patch_embed(np.zeros((384, 384, 3)), cfg, init_encoder_params(cfg, 0))
        assert out.shape == (729, 8)

    def test_2x2_grid(self):
        cfg = EncoderConfig(height=28, width=28, patch=14, dim=4)
        out = patch_embed(np.zeros((28, 28, 3)), cfg, init_encoder_params(cfg, 0))
        assert out.shape == (4, 4)

    def test_floor_rule(self):
        cfg = EncoderConfig(height=30, width=30, patch=14, dim=4)
        out = patch_embed(np.zeros((30, 30, 3)), cfg, init_encoder_params(cfg, 0))
        assert out.shape == (4, 4)

    def test_dimension_mismatch(self):
        cfg = EncoderConfig(height=28, width=28, patch=14, dim=4)
        with pytest.raises(ShapeError):
            patch_embed(np.zeros((30, 28, 3)), cfg, init_encoder_params(cfg, 0))

    def test_patch_order_row_major(self):
        # paint one patch; only its row should be nonzero
        cfg = EncoderConfig(height=28, width=28, patch=14, dim=4)
        params = init_encoder_params(cfg, 0)
        image = np.zeros((28, 28, 3))
        image[0:14, 14:28] = 1.0  # grid cell (0, 1) -> row 1
        out = patch_embed(image, cfg, params) - params["proj_b"]
        nonzero = np.flatnonzero(np.abs(out).sum(axis=1) > 1e-12)
        assert nonzero.tolist() == [1]


class TestVisualTokenCount:
    @pytest.mark.parametrize("kernels,include_global,count,pct", TOKEN_TABLE)
    def test_budget_table(self, kernels, include_global, count, pct):
        cfg = AdapterConfig(kernels=kernels, include_global=include_global, in_dim=4, out_dim=4)
        assert visual_token_count(cfg) == count
        assert f"{100 * count / 729:.2f}" == pct

    def test_reduction_claim(self):
        assert f"{100 * (1 - 246 / 729):.2f}" == "66.26"

    def test_global_only(self):
        cfg = AdapterConfig(kernels=(), include_global=True, in_dim=4, out_dim=4)
        assert visual_token_count(cfg) == 1

    def test_kernels_must_decrease(self):
        with pytest.raises(ShapeError):
            AdapterConfig(kernels=(7, 14), include_global=True, in_dim=4, out_dim=4)

    def test_empty_without_global_rejected(self):
        with pytest.raises(ShapeError):
            AdapterConfig(kernels=(), include_global=False, in_dim=4, out_dim=4)


class TestAdaptiveAvgPool:
    def test_hand_case_4x4_s2(self):
        grid = np.arange(1, 17, dtype=float).reshape(4, 4, 1)
        out = adaptive_avg_pool2d(Tensor(grid), 2).data[:, :, 0]
        assert out.tolist() == [[3.5, 5.5], [11.5, 13.5]]

    def test_identity_when_s_equals_side(self):
        grid = np.random.default_rng(0).normal(size=(3, 3, 2))
        out = adaptive_avg_pool2d(Tensor(grid), 3).data
        np.testing.assert_array_equal(out, grid)

    def test_s1_is_global_mean(self):
        grid = np.random.default_rng(1).normal(size=(5, 7, 3))
        out = adaptive_avg_pool2d(Tensor(grid), 1).data
        np.testing.assert_allclose(out[0, 0], grid.mean(axis=(0, 1)), atol=1e-14)

    def test_mean_preserved_when_divisible(self):
        grid = np.random.default_rng(2).normal(size=(8, 8, 2))
        out = adaptive_avg_pool2d(Tensor(grid), 4).data
        np.testing.assert_allclose(out.mean(axis=(0, 1)), grid.mean(axis=(0, 1)), atol=1e-14)

    def test_uneven_bins_match_naive(self):
        grid = np.random.default_rng(3).normal(size=(5, 7, 2))
        out = adaptive_avg_pool2d(Tensor(grid), 3).data
        np.testing.assert_allclose(out, naive_pool(grid, 3), atol=1e-14)

    def test_values_within_channel_range(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            h, w = rng.integers(2, 9, size=2)
            s = int(rng.integers(1, min(h, w) + 1))
            grid = rng.normal(size=(h, w, 3))
            out = adaptive_avg_pool2d(Tensor(grid), s).data
            for c in range(3):
                assert out[:, :, c].min() >= grid[:, :, c].min() - 1e-12
                assert out[:, :, c].max() <= grid[:, :, c].max() + 1e-12

    def test_channel_equivariance(self):
        grid = np.random.default_rng(5).normal(size=(6, 6, 4))
        perm = [2, 0, 3, 1]
        a = adaptive_avg_pool2d(Tensor(grid[:, :, perm]), 3).data
        b = adaptive_avg_pool2d(Tensor(grid), 3).data[:, :, perm]
        np.testing.assert_array_equal(a, b)

    def test_out_of_range_side(self):
        grid = np.zeros((3, 3, 1))
        with pytest.raises(ShapeError):
            adaptive_avg_pool2d(Tensor(grid), 4)


class TestPositionalConv:
    def test_zero_weight_gives_constant_bias(self):
        grid = np.random.default_rng(0).normal(size=(4, 4, 3))
        b = np.array([1.5, -2.0, 0.25])
        out = positional_conv(Tensor(grid), Tensor(np.zeros((3, 3, 3, 3))), Tensor(b)).data
        np.testing.assert_allclose(out, np.broadcast_to(b, (4, 4, 3)), atol=1e-15)

    def test_identity_center_tap(self):
        grid = np.random.default_rng(1).normal(size=(5, 4, 3))
        weight = np.zeros((3, 3, 3, 3))
        for c in range(3):
            weight[c, c, 1, 1] = 1.0
        out = positional_conv(Tensor(grid), Tensor(weight), Tensor(np.zeros(3))).data
        np.testing.assert_allclose(out, grid, atol=1e-15)

    def test_matches_naive_quadruple_loop(self):
        rng = np.random.default_rng(2)
        grid = rng.normal(size=(3, 3, 2))
        weight = rng.normal(size=(2, 2, 3, 3))
        bias = rng.normal(size=2)
        out = positional_conv(Tensor(grid), Tensor(weight), Tensor(bias)).data
        np.testing.assert_allclose(out, naive_conv3x3(grid, weight, bias), atol=1e-13)

    def test_zero_padding_visible_at_border(self):
        # ones kernel on a ones grid: interior sums 9 cells, corner only 4
        grid = np.ones((3, 3, 1))
        weight = np.ones((1, 1, 3, 3))
        out = positional_conv(Tensor(grid), Tensor(weight), Tensor(np.zeros(1))).data[:, :, 0]
        assert out[1, 1] == pytest.approx(9.0)
        assert out[0, 0] == pytest.approx(4.0)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            positional_conv(Tensor(np.zeros((3, 3, 2))), Tensor(np.zeros((2, 3, 3, 3))),
                            Tensor(np.zeros(2)))


class TestAdapterForward:
    def test_paper_shape_contract(self):
        cfg = AdapterConfig(kernels=(14, 7), include_global=True, in_dim=1152, out_dim=2048)
        params = init_adapter_params(cfg, seed=0)
        E = np.random.default_rng(1).normal(size=(729, 1152))
        out = adapter_forward(E, (27, 27), cfg, params)
        assert out.data.shape == (246, 2048)

    def test_tiny_shape(self):
        cfg = AdapterConfig(kernels=(2,), include_global=True, in_dim=2, out_dim=3)
        params = init_adapter_params(cfg, seed=0)
        E = np.random.default_rng(2).normal(size=(16, 2))
        out = adapter_forward(E, (4, 4), cfg, params)
        assert out.data.shape == (5, 3)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(3)
        cfg = AdapterConfig(kernels=(3, 2), include_global=True, in_dim=4, out_dim=6)
        params = o1_adapter_params(rng, 4, 6)
        E = rng.normal(size=(30, 4))
        out = adapter_forward(E, (5, 6), cfg, params).data
        ref = naive_adapter_forward(E, 5, 6, cfg, params)
        np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)

    def test_random_admissible_configs_shape_property(self):
        rng = np.random.default_rng(4)
        for _ in range(110):
            g_h, g_w = rng.integers(2, 8, size=2)
            d, D = int(rng.integers(1, 5)), int(rng.integers(1, 6))
            max_k = min(g_h, g_w)
            n_kernels = int(rng.integers(0, min(max_k, 3) + 1))
            kernels = tuple(sorted(rng.choice(np.arange(1, max_k + 1), size=n_kernels,
                                              replace=False).tolist(), reverse=True))
            include_global = bool(rng.integers(0, 2)) or not kernels
            cfg = AdapterConfig(kernels=kernels, include_global=include_global,
                                in_dim=d, out_dim=D)
            params = init_adapter_params(cfg, seed=int(rng.integers(1 << 30)))
            E = rng.normal(size=(g_h * g_w, d))
            out = adapter_forward(E, (int(g_h), int(g_w)), cfg, params)
            assert out.data.shape == (visual_token_count(cfg), D)

    def test_kernel_exceeding_grid_rejected(self):
        cfg = AdapterConfig(kernels=(5,), include_global=True, in_dim=2, out_dim=3)
        params = init_adapter_params(cfg, seed=0)
        with pytest.raises(ShapeError):
            adapter_forward(np.zeros((16, 2)), (4, 4), cfg, params)


class TestMlpAdapter:
    def test_token_count_preserved(self):
        params = init_mlp_adapter_params(8, 16, seed=0)
        E = np.random.default_rng(0).normal(size=(729, 8))
        out = mlp_adapter_forward(E, params)
        assert out.data.shape == (729, 16)

    def test_zero_weights_bias_passthrough(self):
        D = 5
        params = MlpAdapterParams(
            w1=Tensor(np.zeros((3, D))), b1=Tensor(np.zeros(D)),
            w2=Tensor(np.zeros((D, D))), b2=Tensor(np.zeros(D)),
            w3=Tensor(np.zeros((D, D))), b3=Tensor(np.arange(D, dtype=float)),
        )
        out = mlp_adapter_forward(np.ones((7, 3)), params).data
        np.testing.assert_allclose(out, np.broadcast_to(np.arange(D, dtype=float), (7, D)))

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        params = init_mlp_adapter_params(3, 4, seed=5)
        E = rng.normal(size=(11, 3))
        out = mlp_adapter_forward(E, params).data
        x = naive_gelu(E @ params.w1.data + params.b1.data)
        x = naive_gelu(x @ params.w2.data + params.b2.data)
        ref = x @ params.w3.data + params.b3.data
        np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)


class TestGradCheck:
    def test_tiny_adapter_below_1e5(self):
        rng = np.random.default_rng(7)
        cfg = AdapterConfig(kernels=(2,), include_global=True, in_dim=3, out_dim=5)
        params = o1_adapter_params(rng, 3, 5)
        E = rng.normal(size=(16, 3))
        report = grad_check(lambda: adapter_forward(E, (4, 4), cfg, params),
                            params.named(), eps=1e-4)
        assert report.max_rel_error < 1e-5

    def test_mlp_adapter_below_1e5(self):
        rng = np.random.default_rng(8)
        t = lambda shape: Tensor(rng.normal(0, 0.6, size=shape), requires_grad=True)
        params = MlpAdapterParams(w1=t((3, 5)), b1=t((5,)), w2=t((5, 5)), b2=t((5,)),
                                  w3=t((5, 5)), b3=t((5,)))
        E = rng.normal(size=(12, 3))
        report = grad_check(lambda: mlp_adapter_forward(E, params), params.named(), eps=1e-4)
        assert report.max_rel_error < 1e-5

    def test_pure_linear_is_machine_exact(self):
        # sum-of-squares of a linear map is quadratic; central differences
        # have no truncation error
        rng = np.random.default_rng(9)
        w = Tensor(rng.normal(0, 0.6, size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(0, 0.6, size=(3,)), requires_grad=True)
        E = rng.normal(size=(6, 4))
        report = grad_check(lambda: ad.matmul(Tensor(E), w) + b, {"w": w, "b": b}, eps=1e-4)
        assert report.max_rel_error < 1e-9

    def test_frozen_group_excluded_from_report(self):
        rng = np.random.default_rng(10)
        cfg = AdapterConfig(kernels=(2,), include_global=True, in_dim=3, out_dim=4)
        params = o1_adapter_params(rng, 3, 4)
        E = rng.normal(size=(9, 3))
        subset = {"linear1_w": params.linear1_w, "linear2_w": params.linear2_w}
        report = grad_check(lambda: adapter_forward(E, (3, 3), cfg, params), subset, eps=1e-4)
        assert set(report.per_param) == set(subset)

    def test_eps_outside_range_rejected(self):
        with pytest.raises(UsageError):
            grad_check(lambda: Tensor(0.0), {}, eps=1e-2)
