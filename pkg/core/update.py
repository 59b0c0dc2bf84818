"""Quantization, priors, rates and lossless coding of decoder model updates delta = theta - theta0."""
import logging
import struct
from dataclasses import dataclass
from typing import Literal, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.stats import norm

from core.errors import ConfigError, ContractViolation, DataFormatError, DecodeError, PriorMismatchError
from core.rangecoder import PRECISION, FrequencyTable, decode_symbols, encode_symbols
from core.tensor import Tensor

# Set up logging
logger = logging.getLogger(__name__)
bitstream_logger = logging.getLogger("bitstream")

UPDATE_HEADER = struct.Struct("<fHffI")
SURROGATE_P_MIN = 2.0 ** -16
CODING_P_MIN = 2.0 ** -PRECISION
LN2 = np.log(2.0)


class UpdateQuantizer(BaseModel):
    """Bins of width t around the integer grid k*t, clipped to +-(N-1)t/2; 0 is always a level.

    Odd N gives exactly N levels. Even N puts the clip bound half a bin past the
    last interior multiple, so the two saturated levels +-(N-1)t/2 sit next to
    the N-1 interior ones and the alphabet has N+1 symbols.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    t: float = Field(0.005, gt=0.0)
    n_bins: int = Field(50, ge=2)

    @property
    def clip_bound(self) -> float:
        return (self.n_bins - 1) * self.t / 2.0

    @property
    def half_levels(self) -> int:
        return self.n_bins // 2

    @property
    def n_levels(self) -> int:
        return 2 * self.half_levels + 1

    def grid(self) -> Tensor:
        k = np.arange(-self.half_levels, self.half_levels + 1, dtype=np.float64)
        return np.clip(k * self.t, -self.clip_bound, self.clip_bound)

    def bin_edges(self) -> Tuple[Tensor, Tensor]:
        """Lower/upper bin edges; the outermost bins extend to -inf and +inf."""
        centers = np.arange(-self.half_levels, self.half_levels + 1, dtype=np.float64) * self.t
        lower = centers - self.t / 2.0
        upper = centers + self.t / 2.0
        lower[0], upper[-1] = -np.inf, np.inf
        return lower, upper


QuantizerConfig = UpdateQuantizer


class UpdatePriorConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["spike_slab", "uniform", "gaussian"] = "spike_slab"
    sigma: float = Field(0.05, gt=0.0, description="Slab standard deviation")
    alpha: float = Field(1000.0, ge=0.0, description="Spike weight")


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpikeSlabPrior:
    """(N(0, sigma^2) + alpha * N(0, (t/6)^2)) / (1 + alpha)."""

    kind = "spike_slab"

    sigma: float = 0.05
    t: float = 0.005
    alpha: float = 1000.0

    def __post_init__(self):
        if not self.t > 0:
            raise ConfigError(f"spike scale t must be positive, got {self.t}")
        if self.alpha < 0 or np.isnan(self.alpha):
            raise ConfigError(f"spike weight alpha must be >= 0, got {self.alpha}")
        if self.sigma < 5.0 * self.t / 6.0:
            raise ConfigError(
                f"slab std {self.sigma} must be at least 5*t/6 = {5.0 * self.t / 6.0:g}"
            )

    @property
    def spike_std(self) -> float:
        return self.t / 6.0

    @property
    def weights(self) -> Tuple[float, float]:
        if np.isinf(self.alpha):
            return 0.0, 1.0
        return 1.0 / (1.0 + self.alpha), self.alpha / (1.0 + self.alpha)

    def density(self, x) -> Tensor:
        w_slab, w_spike = self.weights
        return w_slab * norm.pdf(x, scale=self.sigma) + w_spike * norm.pdf(x, scale=self.spike_std)

    def density_derivative(self, x) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        w_slab, w_spike = self.weights
        return -x * (
            w_slab * norm.pdf(x, scale=self.sigma) / self.sigma ** 2
            + w_spike * norm.pdf(x, scale=self.spike_std) / self.spike_std ** 2
        )

    def cdf(self, x) -> Tensor:
        w_slab, w_spike = self.weights
        return w_slab * norm.cdf(x, scale=self.sigma) + w_spike * norm.cdf(x, scale=self.spike_std)

    def header_params(self) -> Tuple[float, float]:
        return self.sigma, self.alpha


@dataclass(frozen=True)
class GaussianPrior:
    kind = "gaussian"

    sigma: float = 0.05

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"Gaussian prior std must be positive, got {self.sigma}")

    def density(self, x) -> Tensor:
        return norm.pdf(x, scale=self.sigma)

    def density_derivative(self, x) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        return -x * norm.pdf(x, scale=self.sigma) / self.sigma ** 2

    def cdf(self, x) -> Tensor:
        return norm.cdf(x, scale=self.sigma)

    def header_params(self) -> Tuple[float, float]:
        return self.sigma, 0.0


@dataclass(frozen=True)
class UniformPrior:
    """Every grid bin equally likely; the density is flat over the quantizer's range."""

    kind = "uniform"

    quantizer: UpdateQuantizer

    @property
    def _support(self) -> Tuple[float, float]:
        q = self.quantizer
        return -(q.half_levels + 0.5) * q.t, (q.half_levels + 0.5) * q.t

    def density(self, x) -> Tensor:
        lo, hi = self._support
        x = np.asarray(x, dtype=np.float64)
        return np.where((x >= lo) & (x <= hi), 1.0 / (hi - lo), 0.0)

    def density_derivative(self, x) -> Tensor:
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def cdf(self, x) -> Tensor:
        lo, hi = self._support
        return np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)

    def header_params(self) -> Tuple[float, float]:
        return 0.0, 0.0


UpdatePrior = Union[SpikeSlabPrior, GaussianPrior, UniformPrior]


def make_prior(config: UpdatePriorConfig, quantizer: UpdateQuantizer) -> UpdatePrior:
    if config.kind == "spike_slab":
        return SpikeSlabPrior(sigma=config.sigma, t=quantizer.t, alpha=config.alpha)
    if config.kind == "gaussian":
        return GaussianPrior(sigma=config.sigma)
    return UniformPrior(quantizer)


def make_update_configs(t: float, n_bins: int, kind: str, sigma: float, alpha: float):
    try:
        return UpdateQuantizer(t=t, n_bins=n_bins), UpdatePriorConfig(kind=kind, sigma=sigma, alpha=alpha)
    except ValidationError as e:
        raise ConfigError(f"invalid update quantizer/prior: {e}") from e


def prior_density(delta, prior: UpdatePrior) -> Tensor:
    return prior.density(delta)


# ---------------------------------------------------------------------------
# Quantizer
# ---------------------------------------------------------------------------

def _round_half_up(x: Tensor) -> Tensor:
    return np.floor(x + 0.5)


def quantize_indices(delta: Tensor, q: UpdateQuantizer) -> Tensor:
    """Integer k of each quantized value; delta_bar = clip(k * t, -c, c)."""
    delta = np.asarray(delta, dtype=np.float64)
    if not np.all(np.isfinite(delta)):
        raise ContractViolation("model update contains non-finite values")
    k = q.half_levels
    return np.clip(_round_half_up(delta / q.t), -k, k).astype(np.int64)


def quantize_update(delta: Tensor, q: UpdateQuantizer) -> Tensor:
    return np.clip(quantize_indices(delta, q) * q.t, -q.clip_bound, q.clip_bound)


def ste_backward(upstream_grad: Tensor) -> Tensor:
    """The quantizer's backward pass: gradients pass through unchanged."""
    return np.asarray(upstream_grad, dtype=np.float64)


def grid_indices(delta_bar: Tensor, q: UpdateQuantizer) -> Tensor:
    """Symbol index 0..n_levels-1 of on-grid values; raises for off-grid input."""
    delta_bar = np.asarray(delta_bar, dtype=np.float64)
    scaled = delta_bar / q.t
    k = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5 + 1e-6)
    in_range = np.abs(k) <= q.half_levels
    k = np.clip(k, -q.half_levels, q.half_levels)
    expected = np.clip(k * q.t, -q.clip_bound, q.clip_bound)
    off_grid = (np.abs(delta_bar - expected) > 1e-9 * q.t) | ~in_range
    if np.any(off_grid):
        bad = delta_bar[off_grid].ravel()[0]
        raise ContractViolation(f"update value {bad!r} is not on the t={q.t} grid of {q.n_bins} bins")
    return k.astype(np.int64) + q.half_levels


def count_nonzero(delta_bar: Tensor) -> int:
    return int(np.count_nonzero(np.asarray(delta_bar)))


# ---------------------------------------------------------------------------
# Pushed-forward pmf and rates
# ---------------------------------------------------------------------------

def pmf_vector(prior: UpdatePrior, q: UpdateQuantizer) -> Tensor:
    """Mass of each of the N bins; the edge bins absorb the tails."""
    if isinstance(prior, UniformPrior):
        return np.full(q.n_levels, 1.0 / q.n_levels)
    lower, upper = q.bin_edges()
    pmf = prior.cdf(upper) - prior.cdf(lower)
    return np.maximum(pmf, 0.0)


def bin_pmf(delta_bar, prior: UpdatePrior, q: UpdateQuantizer) -> Tensor:
    return pmf_vector(prior, q)[grid_indices(delta_bar, q)]


def coding_pmf(prior: UpdatePrior, q: UpdateQuantizer) -> Tensor:
    pmf = np.maximum(pmf_vector(prior, q), CODING_P_MIN)
    return pmf / pmf.sum()


def surrogate_terms(delta: Tensor, prior: UpdatePrior, q: UpdateQuantizer) -> Tuple[Tensor, Tensor]:
    """Per-parameter -log2 clamp(p(delta) * t, p_min, 1) and its derivative in delta."""
    delta = np.asarray(delta, dtype=np.float64)
    density = prior.density(delta)
    prob = density * q.t
    inside = (prob > SURROGATE_P_MIN) & (prob < 1.0)
    bits = -np.log2(np.clip(prob, SURROGATE_P_MIN, 1.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        local = np.where(inside, -prior.density_derivative(delta) / (density * LN2), 0.0)
    return bits, local


def update_rate(delta, prior: UpdatePrior, q: UpdateQuantizer, continuous: bool = False) -> float:
    """Bits for the whole update: discrete -sum log2 p[delta_bar], or the continuous training surrogate."""
    if continuous:
        bits, _ = surrogate_terms(delta, prior, q)
        return float(bits.sum())
    pmf = coding_pmf(prior, q)
    return float(-np.log2(pmf[grid_indices(delta, q)]).sum())


# ---------------------------------------------------------------------------
# Section coding
# ---------------------------------------------------------------------------

def _header_values(prior: UpdatePrior, q: UpdateQuantizer) -> Tuple[float, int, float, float]:
    sigma, alpha = prior.header_params()
    return float(np.float32(q.t)), q.n_bins, float(np.float32(sigma)), float(np.float32(alpha))


def encode_update(delta_bar: Tensor, prior: UpdatePrior, q: UpdateQuantizer) -> bytes:
    symbols = grid_indices(np.asarray(delta_bar).ravel(), q)
    table = FrequencyTable.from_pmf(coding_pmf(prior, q))
    payload = encode_symbols(symbols, [table], np.zeros(symbols.size, dtype=np.int64))
    t, n_bins, sigma, alpha = _header_values(prior, q)
    header = UPDATE_HEADER.pack(t, n_bins, sigma, alpha, symbols.size)
    bitstream_logger.info(
        f"Update section: {symbols.size} params, {count_nonzero(delta_bar)} non-zero, "
        f"{len(payload)} payload bytes (t={q.t}, N={q.n_bins}, prior={prior.kind})"
    )
    return header + payload


def read_update_header(section: bytes) -> Tuple[float, int, float, float, int]:
    if len(section) < UPDATE_HEADER.size:
        raise DecodeError("truncated model-update header", offset=len(section))
    return UPDATE_HEADER.unpack_from(section)


def decode_update(section: bytes, prior: UpdatePrior, q: UpdateQuantizer, length: int) -> Tensor:
    t, n_bins, sigma, alpha, count = read_update_header(section)
    expected = _header_values(prior, q)
    if (t, n_bins, sigma, alpha) != expected:
        raise PriorMismatchError(
            f"update section was coded with (t={t}, N={n_bins}, sigma={sigma}, alpha={alpha}), "
            f"decoder expects (t={expected[0]}, N={expected[1]}, sigma={expected[2]}, alpha={expected[3]})",
            offset=0,
        )
    if count != length:
        raise DataFormatError(f"update section holds {count} parameters, expected {length}", offset=14)
    table = FrequencyTable.from_pmf(coding_pmf(prior, q))
    symbols = decode_symbols(section[UPDATE_HEADER.size:], [table], np.zeros(count, dtype=np.int64))
    return q.grid()[symbols]
