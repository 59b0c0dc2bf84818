"""Latent quantization, the uniform-noise relaxation, rate estimates and range coding of Z-bar."""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from core.codec import ALPHABET, POOL_STAGES, FactorizedPrior, latent_likelihood
from core.errors import ContractViolation, DimensionError
from core.rangecoder import FrequencyTable, decode_symbols, encode_symbols
from core.tensor import Tensor

# Set up logging
logger = logging.getLogger(__name__)

PriorLike = Union[FactorizedPrior, np.ndarray]


@dataclass
class LatentGrid:
    values: Tensor
    quantized: bool = False
    alphabet: int = ALPHABET

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.quantized:
            v = self.values
            if not np.all(v == np.round(v)) or np.any(np.abs(v) > self.alphabet):
                raise ContractViolation(f"quantized latent has values outside the integer alphabet ±{self.alphabet}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class RateEstimate:
    bits: float
    bits_per_element: float


def quantize_unit(z: Tensor, alphabet: int = ALPHABET) -> Tensor:
    """Round half away from zero, then clamp to [-alphabet, alphabet]."""
    z = np.asarray(z, dtype=np.float64)
    rounded = np.sign(z) * np.floor(np.abs(z) + 0.5)
    clamped = np.abs(rounded) > alphabet
    if np.any(clamped):
        logger.warning(f"Clamped {int(clamped.sum())} latent values to ±{alphabet}")
    return np.clip(rounded, -alphabet, alphabet) + 0.0


def dequantize(z_bar: Tensor) -> Tensor:
    return np.asarray(z_bar, dtype=np.float64).copy()


def relax(z: Tensor, rng: np.random.Generator) -> Tensor:
    z = np.asarray(z, dtype=np.float64)
    return z + rng.uniform(-0.5, 0.5, size=z.shape)


def csi_elements(latent_shape: Tuple[int, ...]) -> int:
    """N_t * N_c of the CSI a latent of this shape came from."""
    h, w = latent_shape[-2:]
    factor = 2 ** POOL_STAGES
    return h * factor * w * factor


def _channel_axis_values(z: Tensor) -> Tuple[Tensor, Tensor]:
    """Flatten z and return (values, channel index per value)."""
    z = np.asarray(z)
    if z.ndim not in (3, 4):
        raise DimensionError(f"latent must be [C,h,w] or [N,C,h,w], got {z.shape}")
    channels = np.broadcast_to(np.arange(z.shape[-3]).reshape(-1, 1, 1), z.shape[-3:])
    channels = np.broadcast_to(channels, z.shape)
    return z.ravel(), channels.ravel()


def estimate_rate(
    z: Union[LatentGrid, Tensor],
    prior: PriorLike,
    relaxed: Optional[bool] = None,
    n_elements: Optional[int] = None,
) -> RateEstimate:
    """-sum log2 p(z): bin probabilities for quantized input, CDF differences at z +- 1/2 otherwise.

    `prior` is a FactorizedPrior or a [C, 2A+1] pmf table (discrete path only).
    """
    if isinstance(z, LatentGrid):
        relaxed = (not z.quantized) if relaxed is None else relaxed
        values = z.values
    else:
        values = np.asarray(z, dtype=np.float64)
        relaxed = bool(relaxed)
    n_elements = n_elements or csi_elements(values.shape) * (values.shape[0] if values.ndim == 4 else 1)

    if relaxed:
        if not isinstance(prior, FactorizedPrior):
            raise ContractViolation("the relaxed rate needs a FactorizedPrior, not a pmf table")
        bits = float(-np.log2(prior.likelihood(values)).sum())
    else:
        pmf = prior.pmf_table() if isinstance(prior, FactorizedPrior) else np.asarray(prior, dtype=np.float64)
        alphabet = (pmf.shape[1] - 1) // 2
        flat, channels = _channel_axis_values(values)
        if np.any(np.abs(flat) > alphabet) or np.any(flat != np.round(flat)):
            raise ContractViolation(f"latent symbols must be integers within ±{alphabet}")
        bits = float(-np.log2(pmf[channels, flat.astype(np.int64) + alphabet]).sum())
    return RateEstimate(bits, bits / n_elements)


def relaxed_rate_bits(ops, theta, z_tilde, config):
    """Differentiable -sum log2 p(z~) on `ops` (GradTape or NumpyOps)."""
    p = latent_likelihood(ops, theta, z_tilde, config)
    return ops.scale(ops.sum(ops.log2(p)), -1.0)


def frequency_tables(prior: PriorLike) -> List[FrequencyTable]:
    pmf = prior.pmf_table() if isinstance(prior, FactorizedPrior) else np.asarray(prior, dtype=np.float64)
    return [FrequencyTable.from_pmf(row) for row in pmf]


def _symbols(z_bar: Union[LatentGrid, Tensor], alphabet: int) -> Tuple[Tensor, Tensor]:
    values = z_bar.values if isinstance(z_bar, LatentGrid) else np.asarray(z_bar, dtype=np.float64)
    flat, channels = _channel_axis_values(values)
    if flat.size and (np.any(np.abs(flat) > alphabet) or np.any(flat != np.round(flat))):
        bad = flat[(np.abs(flat) > alphabet) | (flat != np.round(flat))][0]
        raise ContractViolation(f"latent symbol {bad} outside the coder alphabet ±{alphabet}")
    return flat.astype(np.int64) + alphabet, channels


def entropy_encode(z_bar: Union[LatentGrid, Tensor], prior: PriorLike) -> bytes:
    tables = frequency_tables(prior)
    alphabet = (tables[0].size - 1) // 2
    symbols, channels = _symbols(z_bar, alphabet)
    if channels.size and channels.max() >= len(tables):
        raise DimensionError(f"latent has {channels.max() + 1} channels, prior has {len(tables)}")
    data = encode_symbols(symbols, tables, channels)
    logger.debug(f"Latent section: {symbols.size} symbols -> {len(data)} bytes")
    return data


def entropy_decode(section: bytes, prior: PriorLike, shape: Tuple[int, ...]) -> Tensor:
    """Inverse of entropy_encode; `shape` fixes the symbol count. A mismatched prior is not detected."""
    tables = frequency_tables(prior)
    alphabet = (tables[0].size - 1) // 2
    _, channels = _channel_axis_values(np.zeros(shape))
    symbols = decode_symbols(section, tables, channels)
    return (symbols - alphabet).astype(np.float64).reshape(shape)
