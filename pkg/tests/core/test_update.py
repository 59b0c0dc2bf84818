"""Tests for model-update quantization, priors, rates and section coding."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from core.codec import CodecConfig, build_model
from core.errors import ConfigError, ContractViolation, DataFormatError, PriorMismatchError
from core.rangecoder import FrequencyTable
from core.update import (
    CODING_P_MIN,
    UPDATE_HEADER,
    GaussianPrior,
    SpikeSlabPrior,
    UniformPrior,
    UpdatePriorConfig,
    UpdateQuantizer,
    bin_pmf,
    coding_pmf,
    count_nonzero,
    decode_update,
    encode_update,
    grid_indices,
    make_prior,
    make_update_configs,
    pmf_vector,
    quantize_update,
    read_update_header,
    ste_backward,
    surrogate_terms,
    update_rate,
)


@pytest.fixture
def spike_slab(quantizer):
    return make_prior(UpdatePriorConfig(), quantizer)


def sparse_update(rng, q, n=2000, nonzero=40):
    delta = np.zeros(n)
    idx = rng.choice(n, size=nonzero, replace=False)
    delta[idx] = rng.normal(0, 0.03, size=nonzero)
    return quantize_update(delta, q)


class TestQuantizer:
    """Test the N-bin update quantizer."""

    @pytest.mark.parametrize(
        "delta, expected",
        [(1.0, 0.1225), (-1.0, -0.1225), (0.0074, 0.005), (0.0, 0.0), (0.0025, 0.005), (-0.0026, -0.005),
         (0.1224, 0.12), (0.1226, 0.1225), (0.1174, 0.115)],
    )
    def test_quantize_values(self, quantizer, delta, expected):
        """Test rounding to the grid and clipping at +-(N-1)t/2."""
        assert quantize_update(np.array([delta]), quantizer)[0] == pytest.approx(expected, abs=1e-15)

    def test_grid_for_even_n(self, quantizer):
        """Test that even N keeps zero and saturates at the half-bin clip bound."""
        grid = quantizer.grid()
        assert quantizer.clip_bound == pytest.approx(49 * 0.005 / 2)
        assert grid.size == quantizer.n_levels == 51
        assert 0.0 in grid
        assert grid[0] == pytest.approx(-0.1225) and grid[-1] == pytest.approx(0.1225)
        np.testing.assert_allclose(np.diff(grid[1:-1]), 0.005)

    def test_grid_for_odd_n(self):
        """Test that odd N gives exactly N levels ending at the clip bound."""
        q = UpdateQuantizer(t=0.005, n_bins=51)
        grid = q.grid()
        assert grid.size == q.n_levels == 51
        assert grid[-1] == pytest.approx(q.clip_bound) == pytest.approx(0.125)
        np.testing.assert_allclose(np.diff(grid), 0.005)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-1.0, 1.0, allow_nan=False), st.integers(2, 256))
    def test_quantized_values_are_on_grid(self, delta, n_bins):
        """Test that every quantized value is a grid level inside the clip bound and is idempotent."""
        q = UpdateQuantizer(t=0.005, n_bins=n_bins)
        value = quantize_update(np.array([delta]), q)
        assert abs(value[0]) <= q.clip_bound + 1e-15
        index = grid_indices(value, q)[0]
        assert 0 <= index < q.n_levels
        assert q.grid()[index] == pytest.approx(value[0], abs=1e-15)
        np.testing.assert_array_equal(quantize_update(value, q), value)

    def test_non_finite_rejected(self, quantizer):
        """Test that NaN updates are contract violations."""
        with pytest.raises(ContractViolation):
            quantize_update(np.array([np.nan]), quantizer)

    def test_off_grid_rejected(self, quantizer):
        """Test that grid_indices refuses values off the grid."""
        with pytest.raises(ContractViolation):
            grid_indices(np.array([0.0031]), quantizer)
        with pytest.raises(ContractViolation):
            grid_indices(np.array([1.0]), quantizer)

    def test_ste_and_nonzero(self):
        """Test the identity backward pass and the non-zero count."""
        g = np.array([0.1, -2.0])
        np.testing.assert_array_equal(ste_backward(g), g)
        assert count_nonzero(np.array([0.0, 0.005, 0.0, -0.01])) == 2

    def test_invalid_configs(self):
        """Test validation of quantizer and prior parameters."""
        with pytest.raises(ConfigError):
            make_update_configs(t=0.0, n_bins=50, kind="spike_slab", sigma=0.05, alpha=1000)
        with pytest.raises(ConfigError):
            make_update_configs(t=0.005, n_bins=1, kind="spike_slab", sigma=0.05, alpha=1000)
        with pytest.raises(ConfigError):
            make_update_configs(t=0.005, n_bins=50, kind="laplace", sigma=0.05, alpha=1000)


class TestPriors:
    """Test the spike-and-slab, Gaussian and uniform update priors."""

    def test_spike_slab_density_matches_mixture(self, spike_slab):
        """Test the density against the scipy mixture."""
        x = np.linspace(-0.1, 0.1, 41)
        expected = (norm.pdf(x, scale=0.05) + 1000 * norm.pdf(x, scale=0.005 / 6)) / 1001
        np.testing.assert_allclose(spike_slab.density(x), expected)

    def test_density_derivative(self, spike_slab):
        """Test the analytic derivative against central differences."""
        x = np.array([-0.03, -0.002, 0.0007, 0.04])
        eps = 1e-7
        numeric = (spike_slab.density(x + eps) - spike_slab.density(x - eps)) / (2 * eps)
        np.testing.assert_allclose(spike_slab.density_derivative(x), numeric, rtol=1e-4)

    def test_slab_narrower_than_spike_bound_rejected(self):
        """Test that sigma must be at least 5t/6."""
        with pytest.raises(ConfigError):
            SpikeSlabPrior(sigma=0.004, t=0.005)
        SpikeSlabPrior(sigma=5 * 0.005 / 6, t=0.005)

    def test_infinite_alpha_is_pure_spike(self, quantizer):
        """Test that alpha = inf drops the slab."""
        prior = SpikeSlabPrior(alpha=math.inf)
        assert prior.weights == (0.0, 1.0)
        pmf = pmf_vector(prior, quantizer)
        assert pmf[quantizer.half_levels] == pytest.approx(0.9973, abs=5e-4)

    @pytest.mark.parametrize("kind", ["spike_slab", "gaussian", "uniform"])
    def test_pmf_sums_to_one(self, quantizer, kind):
        """Test that bin masses (tails absorbed at the edges) sum to one."""
        prior = make_prior(UpdatePriorConfig(kind=kind), quantizer)
        pmf = pmf_vector(prior, quantizer)
        assert pmf.shape == (quantizer.n_levels,)
        assert pmf.sum() == pytest.approx(1.0)
        assert coding_pmf(prior, quantizer).min() >= CODING_P_MIN / 2

    def test_pmf_sums_to_one_for_random_priors(self):
        """Test the bin masses of 100 random (sigma, t, alpha, N) spike-and-slab priors."""
        rng = np.random.default_rng(99)
        for _ in range(100):
            t = rng.uniform(1e-3, 1e-2)
            sigma = rng.uniform(5 * t / 6, 0.2)
            alpha = rng.choice([0.0, rng.uniform(0.0, 10.0), rng.uniform(10.0, 1e4)])
            q = UpdateQuantizer(t=t, n_bins=int(rng.integers(2, 257)))
            pmf = pmf_vector(SpikeSlabPrior(sigma=sigma, t=t, alpha=alpha), q)
            assert abs(pmf.sum() - 1.0) <= 1e-9
            assert np.all(pmf >= 0.0)

    def test_zero_bin_mass_grows_with_alpha(self, quantizer):
        """Test that a heavier spike makes zero updates strictly more likely."""
        masses = [
            pmf_vector(SpikeSlabPrior(alpha=alpha), quantizer)[quantizer.half_levels]
            for alpha in (0.0, 1.0, 10.0, 100.0, 1000.0, math.inf)
        ]
        assert all(later > earlier for earlier, later in zip(masses, masses[1:]))
        assert masses[0] == pytest.approx(norm.cdf(0.0025, scale=0.05) - norm.cdf(-0.0025, scale=0.05))

    def test_spike_concentrates_mass_on_zero(self, spike_slab, quantizer):
        """Test that the zero bin is the most probable by far."""
        pmf = pmf_vector(spike_slab, quantizer)
        assert pmf.argmax() == quantizer.half_levels
        assert pmf[quantizer.half_levels] > 0.99
        assert bin_pmf(np.array([0.0]), spike_slab, quantizer)[0] == pmf[quantizer.half_levels]

    def test_uniform_and_gaussian_headers(self, quantizer):
        """Test the header parameters that identify each prior."""
        assert UniformPrior(quantizer).header_params() == (0.0, 0.0)
        assert GaussianPrior(0.05).header_params() == (0.05, 0.0)
        assert UniformPrior(quantizer).kind == "uniform"


class TestRates:
    """Test discrete and continuous update rates."""

    def test_uniform_rate_is_log2_levels_per_param(self, quantizer):
        """Test that a uniform prior costs log2 of the level count per parameter."""
        prior = UniformPrior(quantizer)
        delta = quantize_update(np.linspace(-0.1, 0.1, 100), quantizer)
        assert update_rate(delta, prior, quantizer) == pytest.approx(100 * math.log2(51))

    def test_zero_update_is_nearly_free_under_spike(self, spike_slab, quantizer):
        """Test that an all-zero update costs a small fraction of a bit per parameter."""
        bits = update_rate(np.zeros(10000), spike_slab, quantizer)
        assert bits < 0.01 * 10000

    def test_surrogate_zero_at_origin(self, spike_slab, quantizer):
        """Test that the clamped surrogate charges nothing for an unchanged parameter."""
        bits, local = surrogate_terms(np.array([0.0]), spike_slab, quantizer)
        assert bits[0] == 0.0
        assert local[0] == 0.0

    def test_surrogate_gradient(self, spike_slab, quantizer):
        """Test the surrogate derivative inside the clamp against central differences."""
        x = np.array([0.02, -0.035])
        eps = 1e-7
        bits_plus, _ = surrogate_terms(x + eps, spike_slab, quantizer)
        bits_minus, _ = surrogate_terms(x - eps, spike_slab, quantizer)
        _, local = surrogate_terms(x, spike_slab, quantizer)
        np.testing.assert_allclose(local, (bits_plus - bits_minus) / (2 * eps), rtol=1e-4)

    def test_surrogate_is_clamped_in_far_tail(self, spike_slab, quantizer):
        """Test the upper clamp at -log2(p_min) = 16 bits."""
        bits, local = surrogate_terms(np.array([5.0]), spike_slab, quantizer)
        assert bits[0] == pytest.approx(16.0)
        assert local[0] == 0.0

    def test_continuous_rate(self, spike_slab, quantizer):
        """Test that the continuous rate sums the surrogate."""
        x = np.array([0.0, 0.01, -0.02])
        bits, _ = surrogate_terms(x, spike_slab, quantizer)
        assert update_rate(x, spike_slab, quantizer, continuous=True) == pytest.approx(bits.sum())


class TestSectionCoding:
    """Test lossless coding of the quantized update."""

    @pytest.mark.parametrize("kind", ["spike_slab", "gaussian", "uniform"])
    def test_decode_inverts_encode(self, quantizer, rng, kind):
        """Test exact recovery under each prior."""
        prior = make_prior(UpdatePriorConfig(kind=kind), quantizer)
        delta_bar = sparse_update(rng, quantizer)
        section = encode_update(delta_bar, prior, quantizer)
        np.testing.assert_array_equal(decode_update(section, prior, quantizer, delta_bar.size), delta_bar)

    def test_section_size_tracks_rate(self, spike_slab, quantizer, rng):
        """Test that payload bits are close to the discrete rate."""
        delta_bar = sparse_update(rng, quantizer)
        section = encode_update(delta_bar, spike_slab, quantizer)
        payload_bits = 8 * (len(section) - UPDATE_HEADER.size)
        assert payload_bits == pytest.approx(update_rate(delta_bar, spike_slab, quantizer), abs=128)

    def test_sparse_cheaper_than_uniform(self, spike_slab, quantizer, rng):
        """Test that the spike-and-slab prior beats uniform coding on sparse updates."""
        delta_bar = sparse_update(rng, quantizer)
        uniform = UniformPrior(quantizer)
        assert len(encode_update(delta_bar, spike_slab, quantizer)) < len(encode_update(delta_bar, uniform, quantizer)) / 5

    @pytest.mark.slow
    def test_full_length_updates_round_trip(self, spike_slab, quantizer):
        """Test ten random decoder-sized updates for exact recovery and entropy-bounded section size."""
        length = build_model(0, (64, 64), CodecConfig()).theta.num_params()
        table = FrequencyTable.from_pmf(coding_pmf(spike_slab, quantizer))
        rng = np.random.default_rng(17)
        for density in np.linspace(0.005, 0.5, 10):
            delta = np.where(rng.random(length) < density, rng.normal(0.0, 0.05, size=length), 0.0)
            delta_bar = quantize_update(delta, quantizer)
            section = encode_update(delta_bar, spike_slab, quantizer)
            np.testing.assert_array_equal(decode_update(section, spike_slab, quantizer, length), delta_bar)
            ideal = table.code_length(grid_indices(delta_bar, quantizer))
            payload_bits = 8 * (len(section) - UPDATE_HEADER.size)
            assert ideal <= payload_bits <= 1.02 * ideal + 256

    def test_header_fields(self, spike_slab, quantizer):
        """Test the (t, N, sigma, alpha, count) header."""
        section = encode_update(np.zeros(7), spike_slab, quantizer)
        t, n_bins, sigma, alpha, count = read_update_header(section)
        assert (n_bins, count) == (50, 7)
        assert t == pytest.approx(0.005) and sigma == pytest.approx(0.05) and alpha == 1000.0

    def test_prior_mismatch_detected(self, spike_slab, quantizer):
        """Test that a decoder with other prior parameters refuses the section."""
        section = encode_update(np.zeros(10), spike_slab, quantizer)
        with pytest.raises(PriorMismatchError):
            decode_update(section, SpikeSlabPrior(sigma=0.1), quantizer, 10)
        with pytest.raises(PriorMismatchError):
            decode_update(section, spike_slab, UpdateQuantizer(n_bins=64), 10)

    def test_length_mismatch(self, spike_slab, quantizer):
        """Test that the parameter count must match theta0."""
        section = encode_update(np.zeros(10), spike_slab, quantizer)
        with pytest.raises(DataFormatError):
            decode_update(section, spike_slab, quantizer, 11)

    def test_truncated_header(self, spike_slab, quantizer):
        """Test that a short section fails to decode."""
        with pytest.raises(DataFormatError):
            decode_update(b"\x00" * 5, spike_slab, quantizer, 1)
