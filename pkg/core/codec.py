"""Convolutional CSI encoder f_phi, decoder g_theta and the factorized latent prior.

Both networks and the prior are written once against the op surface shared by
`GradTape` and `NumpyOps`, so the same definition serves training and inference.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core.errors import DimensionError
from core.tensor import NumpyOps, ParamSet, Tensor, sigmoid, softplus

# Set up logging
logger = logging.getLogger(__name__)

LATENT_CHANNELS = 2
POOL_STAGES = 2
ALPHABET = 255
P_MIN = 2.0 ** -16


class CodecConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden: int = Field(64, ge=1, description="Kernels in the two inner conv layers")
    kernel: int = Field(5, ge=1, description="Odd conv kernel size")
    prior_filters: Tuple[int, ...] = (3, 3, 3)
    init_scale: float = Field(10.0, gt=0.0)
    tail_mass: float = Field(1e-9, gt=0.0, lt=1.0)
    p_min: float = Field(P_MIN, gt=0.0, lt=1.0)
    alphabet: int = Field(ALPHABET, ge=1, description="Latent symbols live in [-A, A]")

    def latent_shape(self, n_tx: int, n_sub: int) -> Tuple[int, int, int]:
        factor = 2 ** POOL_STAGES
        return LATENT_CHANNELS, n_tx // factor, n_sub // factor


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _conv_layers(prefix: str, hidden: int, c_in: int, c_out: int):
    return [
        (f"{prefix}.conv0", c_in, hidden),
        (f"{prefix}.conv1", hidden, hidden),
        (f"{prefix}.conv2", hidden, c_out),
    ]


def _prior_layer_shapes(config: CodecConfig):
    filters = (1,) + tuple(config.prior_filters) + (1,)
    for i in range(len(filters) - 1):
        yield i, filters[i + 1], filters[i]


def init(seed: int, config: CodecConfig = CodecConfig()) -> Tuple[ParamSet, ParamSet]:
    """He-scaled conv kernels, zero biases, a prior near-uniform over about [-init_scale, init_scale]."""
    if config.kernel % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {config.kernel}")
    rng = np.random.default_rng(seed)
    k = config.kernel

    def conv_params(layers):
        params = ParamSet()
        for name, c_in, c_out in layers:
            std = np.sqrt(2.0 / (c_in * k * k))
            params[f"{name}.weight"] = rng.standard_normal((c_out, c_in, k, k)) * std
            params[f"{name}.bias"] = np.zeros(c_out)
        return params

    phi = conv_params(_conv_layers("enc", config.hidden, 2, LATENT_CHANNELS))
    theta = conv_params(_conv_layers("dec", config.hidden, LATENT_CHANNELS, 2))

    n_layers = len(config.prior_filters) + 1
    scale = config.init_scale ** (1.0 / n_layers)
    for i, f_out, f_in in _prior_layer_shapes(config):
        theta[f"prior.matrix{i}"] = np.full(
            (LATENT_CHANNELS, f_out, f_in), np.log(np.expm1(1.0 / scale / f_out))
        )
        theta[f"prior.bias{i}"] = np.zeros((LATENT_CHANNELS, f_out, 1))
        if i < len(config.prior_filters):
            theta[f"prior.factor{i}"] = np.zeros((LATENT_CHANNELS, f_out, 1))

    logger.info(
        f"Initialized codec (seed {seed}): |phi|={phi.num_params()}, |theta|={theta.num_params()}"
    )
    return phi, theta


def param_counts(phi: ParamSet, theta: ParamSet) -> Dict[str, int]:
    """Trainable parameters per fine-tuning scheme."""
    return {
        "no_ft": 0,
        "encoder_only": phi.num_params(),
        "full_model": phi.num_params() + theta.num_params(),
        "genie_aided": phi.num_params() + theta.num_params(),
        "update_vector": theta.num_params(),
    }


def prior_names(theta: ParamSet):
    return [n for n in theta.names() if n.startswith("prior.")]


# ---------------------------------------------------------------------------
# Networks (generic over GradTape / NumpyOps)
# ---------------------------------------------------------------------------

def _check_input(x, expected_channels: int, divisor: int):
    shape = x.shape
    if len(shape) not in (3, 4) or shape[-3] != expected_channels:
        raise DimensionError(f"expected {expected_channels} input channels, got shape {tuple(shape)}")
    if shape[-1] % divisor or shape[-2] % divisor:
        raise DimensionError(f"spatial dims {tuple(shape[-2:])} must be divisible by {divisor}")


def encoder_forward(ops, phi, h):
    _check_input(h, 2, 2 ** POOL_STAGES)
    x = ops.relu(ops.conv2d(h, phi["enc.conv0.weight"], phi["enc.conv0.bias"]))
    x = ops.maxpool2d(x, 2)
    x = ops.relu(ops.conv2d(x, phi["enc.conv1.weight"], phi["enc.conv1.bias"]))
    x = ops.maxpool2d(x, 2)
    return ops.conv2d(x, phi["enc.conv2.weight"], phi["enc.conv2.bias"])


def decoder_forward(ops, theta, z):
    _check_input(z, LATENT_CHANNELS, 1)
    x = ops.relu(ops.conv2d(z, theta["dec.conv0.weight"], theta["dec.conv0.bias"]))
    x = ops.upsample_nearest2d(x, 2)
    x = ops.relu(ops.conv2d(x, theta["dec.conv1.weight"], theta["dec.conv1.bias"]))
    x = ops.upsample_nearest2d(x, 2)
    return ops.conv2d(x, theta["dec.conv2.weight"], theta["dec.conv2.bias"])


def logits_cumulative(ops, theta, x, n_layers: int):
    """Monotone per-channel logits of the CDF; `x` is [C, 1, M]."""
    logits = x
    for i in range(n_layers):
        matrix = ops.softplus(theta[f"prior.matrix{i}"])
        logits = ops.add(ops.channel_matmul(matrix, logits), theta[f"prior.bias{i}"])
        if i < n_layers - 1:
            logits = ops.add(logits, ops.mul(ops.tanh(theta[f"prior.factor{i}"]), ops.tanh(logits)))
    return logits


def latent_likelihood(ops, theta, z, config: CodecConfig):
    """Probability of the unit bin around each latent value, floored at p_min.

    `z` is [N, C, h, w] (or [C, h, w]); the result has the same shape.
    """
    shape = tuple(z.shape)
    batched = z if len(shape) == 4 else ops.reshape(z, (1,) + shape)
    n, c, h, w = (1,) + shape if len(shape) == 3 else shape
    flat = ops.reshape(ops.transpose(batched, (1, 0, 2, 3)), (c, 1, n * h * w))
    n_layers = len(config.prior_filters) + 1
    lower = logits_cumulative(ops, theta, ops.sub(flat, 0.5), n_layers)
    upper = logits_cumulative(ops, theta, ops.add(flat, 0.5), n_layers)
    # Evaluate in the left tail of the sigmoid for precision.
    total = np.asarray(getattr(lower, "value", lower)) + np.asarray(getattr(upper, "value", upper))
    sign = -np.sign(total)
    sign[sign == 0] = 1.0
    p = ops.abs(ops.sub(ops.sigmoid(ops.mul(upper, sign)), ops.sigmoid(ops.mul(lower, sign))))
    p = ops.lower_bound(p, config.p_min)
    p = ops.transpose(ops.reshape(p, (c, n, h, w)), (1, 0, 2, 3))
    return ops.reshape(p, shape)


# ---------------------------------------------------------------------------
# Inference API
# ---------------------------------------------------------------------------

def encode_features(h: Tensor, phi: ParamSet) -> Tensor:
    return encoder_forward(NumpyOps, phi, np.asarray(h, dtype=np.float64))


def decode_features(z_hat: Tensor, theta: ParamSet) -> Tensor:
    return decoder_forward(NumpyOps, theta, np.asarray(z_hat, dtype=np.float64))


@dataclass
class FactorizedPrior:
    """Read-only view of the prior parameters inside theta."""

    theta: ParamSet
    config: CodecConfig = field(default_factory=CodecConfig)

    @property
    def n_layers(self) -> int:
        return len(self.config.prior_filters) + 1

    def cdf(self, x: Tensor) -> Tensor:
        """CDF per channel at points `x` ([M] -> [C, M])."""
        x = np.asarray(x, dtype=np.float64).ravel()
        grid = np.broadcast_to(x, (LATENT_CHANNELS, 1, x.size))
        return sigmoid(logits_cumulative(NumpyOps, self.theta, grid, self.n_layers))[:, 0, :]

    def likelihood(self, z: Tensor) -> Tensor:
        return latent_likelihood(NumpyOps, self.theta, np.asarray(z, dtype=np.float64), self.config)

    def pmf_table(self) -> Tensor:
        """[C, 2A+1] bin probabilities over the coder alphabet, floored then renormalized."""
        a = self.config.alphabet
        symbols = np.arange(-a, a + 1, dtype=np.float64)
        grid = np.broadcast_to(symbols, (LATENT_CHANNELS, 1, symbols.size))
        lower = logits_cumulative(NumpyOps, self.theta, grid - 0.5, self.n_layers)
        upper = logits_cumulative(NumpyOps, self.theta, grid + 0.5, self.n_layers)
        sign = -np.sign(lower + upper)
        sign[sign == 0] = 1.0
        pmf = np.abs(sigmoid(sign * upper) - sigmoid(sign * lower))[:, 0, :]
        pmf = np.maximum(pmf, self.config.p_min)
        return pmf / pmf.sum(axis=1, keepdims=True)

    def tail_outside_alphabet(self) -> Tensor:
        """Per-channel probability mass outside [-A-1/2, A+1/2]."""
        a = self.config.alphabet
        edges = self.cdf(np.array([-a - 0.5, a + 0.5]))
        return edges[:, 0] + (1.0 - edges[:, 1])

    def check_coverage(self) -> bool:
        tails = self.tail_outside_alphabet()
        ok = bool(np.all(tails <= self.config.tail_mass))
        if not ok:
            logger.warning(
                f"Latent prior puts {tails.max():.3g} mass outside the coder alphabet "
                f"(bound {self.config.tail_mass:g}); outliers are clamped"
            )
        return ok


def prior_bin_probability(z_bar: int, channel: int, prior: FactorizedPrior) -> float:
    a = prior.config.alphabet
    if not -a <= z_bar <= a:
        return 0.0
    return float(prior.pmf_table()[channel, int(z_bar) + a])


def prior_is_monotone(prior: FactorizedPrior, points: int = 2001) -> bool:
    x = np.linspace(-3 * prior.config.alphabet, 3 * prior.config.alphabet, points)
    return bool(np.all(np.diff(prior.cdf(x), axis=1) >= 0.0))


def check_finite_softplus(theta: ParamSet) -> bool:
    return all(np.all(np.isfinite(softplus(theta[n]))) for n in prior_names(theta))


@dataclass
class CodecModel:
    """Encoder, decoder and prior parameters plus the CSI shape they were trained on."""

    phi: ParamSet
    theta: ParamSet
    config: CodecConfig = field(default_factory=CodecConfig)
    csi_shape: Optional[Tuple[int, int]] = None

    @property
    def prior(self) -> FactorizedPrior:
        return FactorizedPrior(self.theta, self.config)

    def latent_shape(self) -> Tuple[int, int, int]:
        if self.csi_shape is None:
            raise DimensionError("model has no recorded CSI shape")
        return self.config.latent_shape(*self.csi_shape)

    def with_params(self, phi: Optional[ParamSet] = None, theta: Optional[ParamSet] = None) -> "CodecModel":
        return replace(
            self,
            phi=self.phi if phi is None else phi,
            theta=self.theta if theta is None else theta,
        )


def build_model(seed: int, csi_shape: Tuple[int, int], config: CodecConfig = CodecConfig()) -> CodecModel:
    phi, theta = init(seed, config)
    return CodecModel(phi, theta, config, tuple(csi_shape))
