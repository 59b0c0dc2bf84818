"""Tests for the encoder/decoder networks and the factorized latent prior."""
import logging

import numpy as np
import pytest

from core.codec import (
    LATENT_CHANNELS,
    CodecConfig,
    CodecModel,
    FactorizedPrior,
    build_model,
    check_finite_softplus,
    decode_features,
    encode_features,
    init,
    latent_likelihood,
    param_counts,
    prior_bin_probability,
    prior_is_monotone,
    prior_names,
)
from core.errors import DimensionError
from core.tensor import NumpyOps, grad


class TestInit:
    """Test parameter initialization."""

    def test_parameter_shapes(self, small_codec):
        """Test encoder, decoder and prior shapes."""
        phi, theta = init(0, small_codec)
        assert phi["enc.conv0.weight"].shape == (4, 2, 3, 3)
        assert phi["enc.conv2.weight"].shape == (LATENT_CHANNELS, 4, 3, 3)
        assert theta["dec.conv2.bias"].shape == (2,)
        assert theta["prior.matrix0"].shape == (LATENT_CHANNELS, 3, 1)
        assert theta["prior.matrix2"].shape == (LATENT_CHANNELS, 1, 3)
        assert "prior.factor2" not in theta
        assert len(prior_names(theta)) == 3 + 3 + 2

    def test_deterministic_per_seed(self, small_codec):
        """Test that the seed fixes every parameter."""
        a, _ = init(5, small_codec)
        b, _ = init(5, small_codec)
        c, _ = init(6, small_codec)
        assert a.equals(b)
        assert not a.equals(c)

    def test_even_kernel_rejected(self):
        """Test that even kernels are refused."""
        with pytest.raises(DimensionError):
            init(0, CodecConfig(kernel=4))

    def test_param_counts(self, small_codec):
        """Test trainable counts per fine-tuning scheme."""
        phi, theta = init(0, small_codec)
        counts = param_counts(phi, theta)
        assert counts["no_ft"] == 0
        assert counts["encoder_only"] == phi.num_params()
        assert counts["full_model"] == counts["genie_aided"] == phi.num_params() + theta.num_params()
        assert counts["update_vector"] == theta.num_params()


class TestNetworks:
    """Test the forward passes."""

    def test_shapes(self, small_model, csi_dataset):
        """Test the latent and reconstruction shapes."""
        z = encode_features(csi_dataset.samples[:3], small_model.phi)
        assert z.shape == (3, LATENT_CHANNELS, 2, 2)
        h_hat = decode_features(np.round(z), small_model.theta)
        assert h_hat.shape == (3, 2, 8, 8)
        assert encode_features(csi_dataset.samples[0], small_model.phi).shape == (LATENT_CHANNELS, 2, 2)

    def test_single_equals_batched(self, small_model, csi_dataset):
        """Test that batching does not change the latent."""
        batched = encode_features(csi_dataset.samples[:2], small_model.phi)
        np.testing.assert_allclose(batched[1], encode_features(csi_dataset.samples[1], small_model.phi))

    def test_indivisible_input_rejected(self, small_model):
        """Test that spatial dims must be divisible by 4."""
        with pytest.raises(DimensionError):
            encode_features(np.zeros((2, 6, 8)), small_model.phi)
        with pytest.raises(DimensionError):
            encode_features(np.zeros((3, 8, 8)), small_model.phi)

    def test_latent_shape(self, small_model, small_codec):
        """Test the recorded latent shape and its absence without a CSI shape."""
        assert small_model.latent_shape() == (2, 2, 2)
        assert small_codec.latent_shape(64, 64) == (2, 16, 16)
        with pytest.raises(DimensionError):
            CodecModel(small_model.phi, small_model.theta).latent_shape()


class TestFactorizedPrior:
    """Test the learned per-channel CDF and its bin probabilities."""

    def test_initial_prior_is_centered_and_monotone(self, small_model):
        """Test CDF(0) = 1/2 and monotonicity at initialization."""
        prior = small_model.prior
        np.testing.assert_allclose(prior.cdf(np.array([0.0])), 0.5)
        assert prior_is_monotone(prior)
        cdf = prior.cdf(np.array([-1e4, 1e4]))
        assert np.all(cdf[:, 0] < 1e-6) and np.all(cdf[:, 1] > 1 - 1e-6)

    def test_pmf_table_normalized(self, small_model):
        """Test the coder table shape, floor and normalization."""
        pmf = small_model.prior.pmf_table()
        assert pmf.shape == (LATENT_CHANNELS, 2 * 255 + 1)
        np.testing.assert_allclose(pmf.sum(axis=1), 1.0)
        assert pmf.min() > 0

    def test_likelihood_matches_cdf_difference(self, small_model):
        """Test bin probabilities against CDF differences."""
        prior = small_model.prior
        z = np.array([[[[-3.0, 0.0], [1.0, 7.0]], [[2.0, -1.0], [0.0, 4.0]]]])
        p = prior.likelihood(z)
        for c in range(LATENT_CHANNELS):
            v = z[0, c].ravel()
            expected = prior.cdf(v + 0.5)[c] - prior.cdf(v - 0.5)[c]
            np.testing.assert_allclose(p[0, c].ravel(), np.maximum(expected, 2.0 ** -16), rtol=1e-9)

    def test_likelihood_gradient_through_tape(self, small_model):
        """Test that the tape and NumpyOps agree on the value and give finite prior gradients."""
        theta = small_model.theta.subset(prior_names(small_model.theta))
        z = np.random.default_rng(0).uniform(-5, 5, size=(2, LATENT_CHANNELS, 2, 2))
        config = small_model.config

        def loss(ops, values):
            return ops.sum(ops.log2(latent_likelihood(ops, values, z, config)))

        value, grads = grad(lambda tape, leaves: loss(tape, leaves), theta)
        assert value == pytest.approx(float(loss(NumpyOps, theta)))
        assert grads.all_finite()
        eps = 1e-6
        plus, minus = theta.copy(), theta.copy()
        plus["prior.bias0"][0, 1, 0] += eps
        minus["prior.bias0"][0, 1, 0] -= eps
        numeric = (float(loss(NumpyOps, plus)) - float(loss(NumpyOps, minus))) / (2 * eps)
        assert grads["prior.bias0"][0, 1, 0] == pytest.approx(numeric, rel=1e-4, abs=1e-8)

    def test_bin_probability_outside_alphabet(self, small_model):
        """Test that symbols outside the alphabet have zero coder probability."""
        assert prior_bin_probability(256, 0, small_model.prior) == 0.0
        assert prior_bin_probability(0, 1, small_model.prior) > 0.0

    def test_coverage_warning(self, small_model, caplog):
        """Test the warning when the alphabet truncates a wide prior."""
        assert small_model.prior.check_coverage()
        narrow = FactorizedPrior(small_model.theta, small_model.config.model_copy(update={"alphabet": 5}))
        with caplog.at_level(logging.WARNING):
            assert not narrow.check_coverage()
        assert "outside the coder alphabet" in caplog.text

    def test_finite_softplus(self, small_model):
        """Test the softplus finiteness check on prior matrices."""
        assert check_finite_softplus(small_model.theta)

    def test_build_model_records_shape(self, small_codec):
        """Test that build_model stores the CSI shape."""
        model = build_model(0, (16, 8), small_codec)
        assert model.csi_shape == (16, 8)
        assert model.latent_shape() == (2, 4, 2)
