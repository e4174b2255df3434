"""Cascade and multi-scale fusion, the exact MAP oracle and the fusion backward pass."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crffusion.fusion import (
    FusionConfig,
    FusionError,
    exact_map_oracle,
    fuse,
    fuse_cascade,
    fuse_multiscale,
    fusion_backward,
    make_kernels,
    stage_energy_gradient,
)
from crffusion.gradcheck import central_difference, relative_error

from conftest import random_image

# features so wide apart in bandwidth units that both pixels coincide (K = 1)
WIDE = dict(bilateral_xy=1e12, bilateral_rgb=1e12, spatial_xy=1e12)


def two_pixel_config(iterations=50):
    return FusionConfig(mode="cascade", scales=1, iterations=iterations, beta=[[0.0, 0.25]], **WIDE)


def instance(seed, h=5, w=6, scales=2, mode="multiscale", beta_max=0.5, iterations=5):
    rng = np.random.default_rng(seed)
    img = random_image(rng, h, w)
    sides = [rng.uniform(1, 4, (h, w)) for _ in range(scales)]
    shape = (scales, 2) if mode == "cascade" else (4,)
    config = FusionConfig(mode=mode, scales=scales, iterations=iterations, filter_method="dense",
                          beta=rng.uniform(0, beta_max, shape))
    return sides, img, config


class TestConfig:
    def test_bad_values(self):
        for kwargs in ({"mode": "tree"}, {"order": "middle"}, {"combiner": "max"}, {"scales": 0},
                       {"mode": "cascade", "beta": np.zeros(4)}, {"beta": -np.ones(4)},
                       {"scales": 2, "iterations": (1, 2, 3)}):
            with pytest.raises(FusionError):
                FusionConfig(**kwargs)

    def test_default_beta(self):
        assert np.all(FusionConfig(mode="cascade", scales=2).beta == 0.1)
        assert FusionConfig().beta.shape == (4,)

    def test_side_output_checks(self):
        sides, img, config = instance(0)
        with pytest.raises(FusionError):
            fuse([], img, config)
        with pytest.raises(FusionError):
            fuse(sides[:1], img, config)
        with pytest.raises(FusionError):
            fuse([sides[0], sides[1][:, :-1]], img, config)
        with pytest.raises(FusionError):
            fuse_cascade(sides, img, config)


class TestIdentities:
    def test_cascade_single_scale(self):
        sides, img, config = instance(1, scales=1, mode="cascade")
        config.beta[:] = 0
        assert np.array_equal(fuse(sides, img, config).prediction, sides[0])

    def test_cascade_two_scales_adds(self):
        sides, img, config = instance(2, scales=2, mode="cascade")
        config.beta[:] = 0
        np.testing.assert_array_equal(fuse(sides, img, config).prediction, sides[1] + sides[0])

    @pytest.mark.parametrize("scales", [1, 2, 4])
    def test_multiscale_zero_beta(self, scales):
        sides, img, config = instance(3, scales=scales)
        config.beta[:] = 0
        assert np.array_equal(fuse(sides, img, config).prediction, sides[-1])

    def test_outer_order_ends_at_coarsest_scale(self):
        sides, img, config = instance(4, scales=3)
        config.beta[:] = 0
        config.order = "outer"
        assert np.array_equal(fuse(sides, img, config).prediction, sides[0])


class TestFixedPoint:
    def test_two_pixel_cascade(self):
        img = np.zeros((1, 2, 3))
        pred = fuse([np.array([[0.0, 3.0]])], img, two_pixel_config()).prediction
        np.testing.assert_allclose(pred, [[0.75, 2.25]], atol=1e-9)

    def test_two_pixel_oracle(self):
        img = np.zeros((1, 2, 3))
        (sol,) = exact_map_oracle([np.array([[0.0, 3.0]])], img, two_pixel_config())
        np.testing.assert_allclose(sol, [[0.75, 2.25]], atol=1e-12)

    def test_single_scale_modes_agree(self):
        sides, img, cfg = instance(5, scales=1, iterations=40)
        cascade = FusionConfig(mode="cascade", scales=1, iterations=40, filter_method="dense",
                               beta=cfg.beta[None, :2])
        np.testing.assert_allclose(fuse(sides, img, cfg).prediction, fuse(sides, img, cascade).prediction,
                                   atol=1e-12)

    def test_zero_cross_weights_decouple_scales(self):
        sides, img, config = instance(6, scales=3, iterations=7)
        config.beta[2:] = 0
        trace = fuse(sides, img, config).trace
        for l in range(3):
            single = FusionConfig(mode="cascade", scales=1, iterations=7, filter_method="dense",
                                  beta=config.beta[None, :2])
            np.testing.assert_allclose(trace.mu(l)[-1], fuse([sides[l]], img, single).prediction, atol=1e-13)

    @pytest.mark.parametrize("mode", ["multiscale", "cascade"])
    def test_small_instance_matches_oracle(self, mode):
        sides, img, config = instance(7, 12, 12, scales=2, mode=mode, iterations=200)
        trace = fuse(sides, img, config).trace
        oracle = exact_map_oracle(sides, img, config)
        for l in range(2):
            assert np.abs(trace.mu(l)[-1] - oracle[l]).max() <= 1e-4

    @pytest.mark.parametrize("mode", ["multiscale", "cascade"])
    @pytest.mark.parametrize("order", ["inner", "outer"])
    def test_oracle_is_stationary(self, mode, order):
        sides, img, config = instance(8, 6, 6, scales=3, mode=mode)
        config.order = order
        sol = exact_map_oracle(sides, img, config)
        previous = None
        for l in config.stage_order():
            unary = sides[l]
            if mode == "cascade" and previous is not None:
                unary = sides[l] + np.maximum(previous, 0)
            grad = stage_energy_gradient(sol[l], unary, previous if mode == "multiscale" else None,
                                         img, config, l)
            assert np.abs(grad).max() <= 1e-8
            previous = sol[l]

    def test_oracle_zero_beta(self):
        sides, img, config = instance(9, scales=3)
        config.beta[:] = 0
        for a, b in zip(exact_map_oracle(sides, img, config), sides):
            np.testing.assert_allclose(a, b, atol=1e-15)

    def test_oracle_size_limit(self):
        sides, img, config = instance(10, 40, 40, scales=3)
        with pytest.raises(FusionError):
            exact_map_oracle(sides, img, config)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from(["multiscale", "cascade"]))
    def test_residual_decreases(self, seed, mode):
        sides, img, config = instance(seed, 5, 5, scales=2, mode=mode, iterations=10)
        res = fuse(sides, img, config).trace.residuals()
        assert np.all(np.diff(res[1:]) < 0) or res[1:].max() == 0

    def test_deterministic(self):
        sides, img, config = instance(11, scales=3)
        a = fuse(sides, img, config).prediction
        b = fuse([s.copy() for s in sides], img.copy(), config).prediction
        assert a.tobytes() == b.tobytes()

    def test_lattice_close_to_dense(self):
        rng = np.random.default_rng(12)
        img = random_image(rng, 40, 40)
        sides = [rng.uniform(1, 4, (40, 40)) for _ in range(2)]
        dense = FusionConfig(scales=2, filter_method="dense")
        lattice = FusionConfig(scales=2, filter_method="lattice")
        a, b = fuse(sides, img, dense).prediction, fuse(sides, img, lattice).prediction
        assert np.linalg.norm(a - b) / np.linalg.norm(a) <= 0.05


class TestBackward:
    def test_zero_gradient(self):
        sides, img, config = instance(13, scales=3)
        grads, gbeta = fusion_backward(fuse(sides, img, config).trace, np.zeros((5, 6)))
        assert all(np.all(g == 0) for g in grads) and np.all(gbeta == 0)

    def test_zero_beta_cascade_passes_through(self):
        sides, img, config = instance(14, scales=2, mode="cascade")
        config.beta[:] = 0
        g = np.random.default_rng(0).normal(size=(5, 6))
        grads, _ = fusion_backward(fuse(sides, img, config).trace, g)
        np.testing.assert_array_equal(grads[0], g)
        np.testing.assert_array_equal(grads[1], g)

    @pytest.mark.parametrize("mode", ["multiscale", "cascade"])
    def test_against_finite_differences(self, mode):
        sides, img, config = instance(15, 6, 6, scales=2, mode=mode, beta_max=0.4)
        kernels = make_kernels(img, config)
        w = np.random.default_rng(1).normal(size=(6, 6))

        def loss():
            return float(np.sum(w * fuse(sides, img, config, kernels).prediction))

        grads, gbeta = fusion_backward(fuse(sides, img, config, kernels).trace, w)
        numeric = central_difference(loss, config.beta)
        assert relative_error(gbeta, numeric, 1e-6 * np.abs(numeric).max()).max() <= 1e-5
        for l in range(2):
            idx = np.random.default_rng(l).choice(36, 12, replace=False)
            numeric = central_difference(loss, sides[l], step=1e-4, indices=idx).ravel()[idx]
            analytic = grads[l].ravel()[idx]
            assert relative_error(analytic, numeric, 1e-6 * np.abs(numeric).max() + 1e-12).max() <= 1e-5

    def test_trace_mismatch(self):
        sides, img, config = instance(16)
        trace = fuse(sides, img, config).trace
        with pytest.raises((FusionError, ValueError)):
            fusion_backward(trace, np.zeros((4, 4)))
