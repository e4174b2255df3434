"""The continuous mean-field block."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crffusion.cmf import (
    CASCADE_GATES,
    MULTISCALE_GATES,
    CmfInputs,
    ContractError,
    GateConfig,
    Kernel,
    cmf_backward,
    cmf_forward,
)
from crffusion.gaussfilter import FilterPlan
from crffusion.gradcheck import central_difference, relative_error
from crffusion.grid import extract_features

from conftest import coincident_plan, random_image


def two_pixel_inputs(o=(0.0, 3.0), prev=(0.0, 0.0), beta=0.25):
    return CmfInputs(np.array(o), np.array(prev), [Kernel(coincident_plan(), "within")], np.array([beta]))


def random_inputs(rng, h=5, w=6, multiscale=True, prev_scale=True):
    img = random_image(rng, h, w)
    bil = FilterPlan(extract_features(img, "bilateral", 2.0, 0.3), "dense")
    spa = FilterPlan(extract_features(img, "spatial", 1.5), "dense")
    kernels = [Kernel(bil, "within"), Kernel(spa, "within")]
    if multiscale:
        kernels += [Kernel(bil, "cross"), Kernel(spa, "cross")]
    return CmfInputs(
        rng.normal(size=(h, w)),
        rng.normal(size=(h, w)),
        kernels,
        rng.uniform(0.05, 0.5, len(kernels)),
        rng.normal(size=(h, w)) if multiscale and prev_scale else None,
    )


class TestGates:
    def test_mixed_rejected(self):
        with pytest.raises(ValueError):
            GateConfig(True, False)

    def test_cross_kernel_needs_multiscale_gates(self, rng):
        inputs = random_inputs(rng)
        with pytest.raises(ValueError):
            cmf_forward(inputs, CASCADE_GATES)


class TestForward:
    @pytest.mark.parametrize("gates", [CASCADE_GATES, MULTISCALE_GATES])
    def test_zero_beta_identity(self, rng, gates):
        inputs = random_inputs(rng, multiscale=gates.multiscale)
        inputs.beta = np.zeros_like(inputs.beta)
        out = cmf_forward(inputs, gates)
        assert np.all(out.gamma == 2.0)
        assert np.array_equal(out.mu, inputs.unary)

    def test_two_pixel_hand_values(self):
        out = cmf_forward(two_pixel_inputs(), CASCADE_GATES)
        np.testing.assert_allclose(out.gamma, [3.0, 3.0], rtol=1e-15)
        np.testing.assert_allclose(out.mu, [0.0, 2.0], rtol=1e-15)

    def test_two_pixel_fixed_point(self):
        mu = np.zeros(2)
        for _ in range(60):
            mu = cmf_forward(two_pixel_inputs(prev=mu), CASCADE_GATES).mu
        np.testing.assert_allclose(mu, [0.75, 2.25], atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.booleans())
    def test_gamma_at_least_two(self, seed, multiscale):
        out = cmf_forward(random_inputs(np.random.default_rng(seed), 3, 4, multiscale),
                          MULTISCALE_GATES if multiscale else CASCADE_GATES)
        assert np.all(out.gamma >= 2.0)

    def test_missing_previous_scale_drops_cross_terms(self, rng):
        full = random_inputs(rng, prev_scale=False)
        within = CmfInputs(full.unary, full.mu_prev_iter, full.kernels[:2], full.beta[:2])
        a = cmf_forward(full, MULTISCALE_GATES)
        b = cmf_forward(within, MULTISCALE_GATES)
        np.testing.assert_array_equal(a.mu, b.mu)
        np.testing.assert_array_equal(a.gamma, b.gamma)

    def test_cross_kernel_includes_self(self):
        # one coincident pair: cross mass is 2 (self + other), within mass is 1
        inputs = CmfInputs(np.zeros(2), np.zeros(2), [Kernel(coincident_plan(), "cross")], np.array([0.25]),
                           np.array([1.0, 1.0]))
        out = cmf_forward(inputs, MULTISCALE_GATES)
        np.testing.assert_allclose(out.gamma, 2 * (1 + 2 * 0.25 * 2))

    def test_shape_and_beta_errors(self, rng):
        inputs = random_inputs(rng)
        inputs.beta = inputs.beta[:3]
        with pytest.raises(ValueError):
            cmf_forward(inputs, MULTISCALE_GATES)
        inputs = random_inputs(rng)
        inputs.beta[0] = -0.1
        with pytest.raises(ValueError):
            cmf_forward(inputs, MULTISCALE_GATES)
        inputs = random_inputs(rng)
        inputs.mu_prev_iter = inputs.mu_prev_iter[:, :-1]
        with pytest.raises(ValueError):
            cmf_forward(inputs, MULTISCALE_GATES)

    def test_frozen_neighbour_iteration_contracts(self, rng):
        inputs = random_inputs(rng, multiscale=False)
        mu, steps = inputs.unary, []
        for _ in range(12):
            new = cmf_forward(CmfInputs(inputs.unary, mu, inputs.kernels, inputs.beta), CASCADE_GATES).mu
            steps.append(np.abs(new - mu).max())
            mu = new
        assert all(b < a for a, b in zip(steps[1:], steps[2:]))


class TestBackward:
    def test_zero_grad(self, rng):
        inputs = random_inputs(rng)
        grads = cmf_backward(cmf_forward(inputs, MULTISCALE_GATES), inputs, np.zeros((5, 6)))
        for g in (grads.unary, grads.mu_prev_iter, grads.mu_prev_scale, grads.beta):
            assert np.all(g == 0)

    def test_zero_beta_passes_gradient_through(self, rng):
        inputs = random_inputs(rng, multiscale=False)
        inputs.beta[:] = 0
        g = rng.normal(size=(5, 6))
        grads = cmf_backward(cmf_forward(inputs, CASCADE_GATES), inputs, g)
        np.testing.assert_array_equal(grads.unary, g)

    def test_two_pixel_beta_gradient(self):
        inputs = two_pixel_inputs(prev=(0.4, 1.3))
        w = np.array([0.7, -1.1])
        out = cmf_forward(inputs, CASCADE_GATES)
        analytic = cmf_backward(out, inputs, w).beta
        numeric = central_difference(lambda: w @ cmf_forward(inputs, CASCADE_GATES).mu, inputs.beta)
        assert relative_error(analytic, numeric, 1e-12).max() <= 1e-6

    @pytest.mark.parametrize("multiscale", [True, False])
    def test_all_inputs_against_finite_differences(self, rng, multiscale):
        gates = MULTISCALE_GATES if multiscale else CASCADE_GATES
        inputs = random_inputs(rng, 4, 4, multiscale)
        w = rng.normal(size=(4, 4))
        grads = cmf_backward(cmf_forward(inputs, gates), inputs, w)

        def loss():
            return float(np.sum(w * cmf_forward(inputs, gates).mu))

        pairs = [(grads.unary, inputs.unary), (grads.mu_prev_iter, inputs.mu_prev_iter), (grads.beta, inputs.beta)]
        if multiscale:
            pairs.append((grads.mu_prev_scale, inputs.mu_prev_scale))
        for analytic, x in pairs:
            # mu is linear in the grids, so a wider step only removes roundoff
            numeric = central_difference(loss, x, step=1e-4)
            floor = 1e-6 * np.abs(numeric).max()  # same floor as run_gradcheck
            assert relative_error(analytic, numeric, floor).max() <= 1e-5

    def test_stale_cache(self, rng):
        inputs = random_inputs(rng)
        out = cmf_forward(inputs, MULTISCALE_GATES)
        inputs.mu_prev_iter[0, 0] += 1.0
        with pytest.raises(ContractError):
            cmf_backward(out, inputs, np.ones((5, 6)))
        inputs.mu_prev_iter[0, 0] -= 1.0
        inputs.beta = inputs.beta * 2
        with pytest.raises(ContractError):
            cmf_backward(out, inputs, np.ones((5, 6)))
