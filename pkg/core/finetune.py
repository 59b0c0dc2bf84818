"""Training objectives, backbone training, the fine-tuning schemes and session encode/decode.

Rates are reported in bits per CSI element (N_t * N_c); the distortion term is the squared
Frobenius error per CSI element, so on unit-power data it is close to the NMSE.
"""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core.bitstream import SECTION_LATENT, SECTION_UPDATE, Bitstream
from core.channel import CsiDataset
from core.codec import (
    CodecConfig,
    CodecModel,
    FactorizedPrior,
    decode_features,
    decoder_forward,
    encode_features,
    encoder_forward,
)
from core.errors import ConfigError, ContractViolation, DataFormatError, DivergenceError, NumericalError
from core.latent import entropy_decode, entropy_encode, estimate_rate, quantize_unit, relaxed_rate_bits
from core.tensor import AdamState, GradTape, NumpyOps, ParamSet, Tensor, adam_step, grad, value_of
from core.update import (
    UpdatePrior,
    UpdatePriorConfig,
    UpdateQuantizer,
    count_nonzero,
    decode_update,
    encode_update,
    make_prior,
    quantize_update,
    surrogate_terms,
    update_rate,
)

# Set up logging
logger = logging.getLogger(__name__)
training_logger = logging.getLogger("training")

Mode = Literal["backbone", "encoder_only", "full_model", "genie_aided"]
MAX_LATENT_SECTIONS = 254


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    mode: Mode = "backbone"
    lam: float = Field(16.0, gt=0.0, alias="lambda", description="RD weight on the distortion term")
    lam_m: Optional[float] = Field(None, ge=0.0, description="Weight on the update rate; defaults to lambda")
    lr: Optional[float] = Field(None, gt=0.0, description="1e-3 for the backbone, 1e-4 for fine-tuning")
    batch: int = Field(32, ge=1)
    epochs: Optional[int] = Field(None, ge=0, description="200 for the backbone, 1000 for fine-tuning")
    seed: int = 0
    patience: int = Field(100, ge=1)
    holdout_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    rdm_regularize: bool = True
    amortize_over: Optional[int] = Field(None, ge=1, description="Samples the update bits are spread over")
    quantizer: UpdateQuantizer = Field(default_factory=UpdateQuantizer)
    prior: UpdatePriorConfig = Field(default_factory=UpdatePriorConfig)

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-3 if self.mode == "backbone" else 1e-4

    @property
    def num_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 200 if self.mode == "backbone" else 1000

    @property
    def update_weight(self) -> float:
        return self.lam if self.lam_m is None else self.lam_m

    def update_prior(self) -> UpdatePrior:
        return make_prior(self.prior, self.quantizer)


def make_train_config(**fields) -> TrainConfig:
    try:
        return TrainConfig(**fields)
    except ValidationError as e:
        raise ConfigError(f"invalid training config: {e}") from e


@dataclass(frozen=True)
class RdPoint:
    rate_latent: float
    rate_update: float
    nmse_db: float

    @property
    def rate_total(self) -> float:
        return self.rate_latent + self.rate_update

    def to_dict(self) -> Dict[str, float]:
        return {
            "rate_total": self.rate_total,
            "rate_latent": self.rate_latent,
            "rate_update": self.rate_update,
            "nmse_db": self.nmse_db,
        }


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_loss: float
    rate: float
    distortion: float
    nonzero: Optional[int] = None
    update_bits: Optional[float] = None


@dataclass
class FitResult:
    params: ParamSet
    last: ParamSet
    adam: AdamState
    history: List[EpochRecord]
    best_epoch: int
    best_val: float
    epochs_run: int


@dataclass
class FinetuneResult:
    mode: str
    phi: ParamSet
    theta: ParamSet
    delta_bar: Optional[Tensor] = None
    history: List[EpochRecord] = field(default_factory=list)

    @property
    def nonzero(self) -> int:
        return 0 if self.delta_bar is None else count_nonzero(self.delta_bar)


@dataclass
class SessionResult:
    mode: str
    phi: ParamSet
    theta: ParamSet
    bitstreams: List[Bitstream]
    points: List[RdPoint]
    reconstructions: Tensor
    delta_bar: Optional[Tensor] = None
    history: List[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def aggregate(self) -> RdPoint:
        return aggregate_points(self.points)

    @property
    def nonzero(self) -> int:
        return 0 if self.delta_bar is None else count_nonzero(self.delta_bar)

    @property
    def update_bits(self) -> int:
        return sum(b.section_bits(SECTION_UPDATE) for b in self.bitstreams)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def nmse_ratio(h: Tensor, h_hat: Tensor) -> Tensor:
    """Per-sample ||H - H_hat||^2 / ||H||^2 over [n, 2, N_t, N_c] (or one sample)."""
    h = np.asarray(h, dtype=np.float64)
    h_hat = np.asarray(h_hat, dtype=np.float64)
    if h.shape != h_hat.shape:
        raise ContractViolation(f"shape mismatch {h.shape} vs {h_hat.shape}")
    if h.ndim == 3:
        h, h_hat = h[None], h_hat[None]
    err = np.sum((h - h_hat) ** 2, axis=(1, 2, 3))
    power = np.sum(h ** 2, axis=(1, 2, 3))
    return err / power


def nmse_db(h: Tensor, h_hat: Tensor) -> float:
    """10 log10 E[||H - H_hat||^2 / ||H||^2]; -inf for an exact reconstruction."""
    mean = float(np.mean(nmse_ratio(h, h_hat)))
    return -math.inf if mean == 0.0 else 10.0 * math.log10(mean)


def aggregate_points(points: List[RdPoint]) -> RdPoint:
    if not points:
        return RdPoint(0.0, 0.0, math.nan)
    ratios = [10.0 ** (p.nmse_db / 10.0) for p in points]
    mean = float(np.mean(ratios))
    return RdPoint(
        float(np.mean([p.rate_latent for p in points])),
        float(np.mean([p.rate_update for p in points])),
        -math.inf if mean == 0.0 else 10.0 * math.log10(mean),
    )


# ---------------------------------------------------------------------------
# Objectives (GradTape or NumpyOps)
# ---------------------------------------------------------------------------

def rd_terms(ops, phi: Mapping, theta: Mapping, batch: Tensor, noise: Optional[Tensor], codec: CodecConfig):
    """(rate, distortion) per CSI element for one batch under the uniform-noise relaxation."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    n, elements = batch.shape[0], batch.shape[2] * batch.shape[3]
    z = encoder_forward(ops, phi, batch)
    z_tilde = z if noise is None else ops.add(z, noise)
    h_hat = decoder_forward(ops, theta, z_tilde)
    rate = ops.scale(relaxed_rate_bits(ops, theta, z_tilde, codec), 1.0 / (n * elements))
    distortion = ops.scale(ops.sum(ops.square(ops.sub(h_hat, batch))), 1.0 / (n * elements))
    return rate, distortion


def loss_rd(
    batch: Tensor,
    phi: Mapping,
    theta: Mapping,
    lam: float,
    noise: Optional[Tensor] = None,
    codec: CodecConfig = CodecConfig(),
    ops=NumpyOps,
):
    rate, distortion = rd_terms(ops, phi, theta, batch, noise, codec)
    return ops.add(rate, ops.scale(distortion, lam))


def quantized_theta(ops, theta: Mapping, theta0: ParamSet, q: Optional[UpdateQuantizer]) -> Dict:
    """theta_bar = theta0 + Q_t(theta - theta0), straight-through on the backward pass."""
    if q is None:
        return dict(theta)
    out = {}
    for name in theta0.names():
        delta = ops.sub(theta[name], theta0[name])
        out[name] = ops.add(theta0[name], ops.straight_through(delta, lambda v: quantize_update(v, q)))
    return out


def update_rate_term(ops, theta: Mapping, theta0: ParamSet, prior: UpdatePrior, q: UpdateQuantizer):
    """Continuous surrogate of the update bits, summed over every decoder parameter."""
    total = None
    for name in theta0.names():
        delta = ops.sub(theta[name], theta0[name])
        bits, local = surrogate_terms(value_of(delta), prior, q)
        term = ops.sum(ops.custom(delta, bits, local, "update_rate"))
        total = term if total is None else ops.add(total, term)
    return total


def loss_rdm(
    batch: Tensor,
    phi: Mapping,
    theta: Mapping,
    theta0: ParamSet,
    lam: float,
    prior: Optional[UpdatePrior],
    q: Optional[UpdateQuantizer],
    noise: Optional[Tensor] = None,
    lam_m: Optional[float] = None,
    amortize_over: int = 1,
    codec: CodecConfig = CodecConfig(),
    ops=NumpyOps,
):
    """L_RD at theta_bar plus lam_m * M / (amortize_over * N_t * N_c).

    `prior=None` drops the update-rate term; `q=None` replaces the quantizer by the identity.
    """
    theta_bar = quantized_theta(ops, theta, theta0, q)
    loss = loss_rd(batch, phi, theta_bar, lam, noise, codec, ops)
    if prior is None:
        return loss
    batch = np.asarray(batch)
    elements = batch.shape[-1] * batch.shape[-2]
    weight = (lam if lam_m is None else lam_m) / (amortize_over * elements)
    quantizer = q if q is not None else UpdateQuantizer()
    bits = update_rate_term(ops, theta, theta0, prior, quantizer)
    return ops.add(loss, ops.scale(bits, weight))


# ---------------------------------------------------------------------------
# Discrete evaluation
# ---------------------------------------------------------------------------

def evaluate_discrete(samples: Tensor, phi: ParamSet, theta: ParamSet, codec: CodecConfig) -> Tuple[float, float, float]:
    """(rate bits/element, distortion/element, nmse_db) with hard quantization."""
    samples = np.asarray(samples, dtype=np.float64)
    z_bar = quantize_unit(encode_features(samples, phi), codec.alphabet)
    elements = samples.shape[2] * samples.shape[3]
    rate = estimate_rate(z_bar, FactorizedPrior(theta, codec), relaxed=False).bits / (len(samples) * elements)
    h_hat = decode_features(z_bar, theta)
    distortion = float(np.sum((h_hat - samples) ** 2)) / (len(samples) * elements)
    return rate, distortion, nmse_db(samples, h_hat)


# ---------------------------------------------------------------------------
# Optimisation loop
# ---------------------------------------------------------------------------

Objective = Callable[[object, Mapping, Tensor, Tensor], object]
Validator = Callable[[ParamSet], Tuple[float, Dict]]


def _fit(
    label: str,
    params: ParamSet,
    trainable: List[str],
    objective: Objective,
    train: Tensor,
    validate: Validator,
    config: TrainConfig,
    latent_shape: Tuple[int, int, int],
    adam: Optional[AdamState] = None,
    start_epoch: int = 0,
    best_val: float = math.inf,
) -> FitResult:
    adam = adam.copy() if adam is not None else AdamState()
    lr = config.learning_rate
    n = len(train)
    history: List[EpochRecord] = []

    best_params = params.copy()
    best_epoch = start_epoch
    if start_epoch == 0:
        best_val, extras = validate(params)
        history.append(EpochRecord(0, math.nan, best_val, extras.get("rate", math.nan),
                                   extras.get("distortion", math.nan), extras.get("nonzero"),
                                   extras.get("update_bits")))
    since_best = 0
    last_finite = None

    training_logger.info(f"=== {label}: {n} samples, {config.num_epochs} epochs, lr={lr}, lambda={config.lam} ===")
    epoch = start_epoch
    for epoch in range(start_epoch + 1, config.num_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            batch = train[idx]
            noise = rng.uniform(-0.5, 0.5, size=(len(idx),) + tuple(latent_shape))
            frozen = {name: params[name] for name in params.names() if name not in trainable}

            def loss_fn(tape: GradTape, leaves):
                return objective(tape, {**frozen, **leaves}, batch, noise)

            try:
                value, grads = grad(loss_fn, params.subset(trainable))
            except NumericalError as e:
                logger.error(f"{label}: {e} at epoch {epoch}")
                raise DivergenceError(f"{label} diverged", epoch=epoch, last_finite_loss=last_finite) from e
            if not math.isfinite(value) or not grads.all_finite():
                logger.error(f"{label}: non-finite loss or gradient at epoch {epoch}")
                raise DivergenceError(f"{label} diverged", epoch=epoch, last_finite_loss=last_finite)
            last_finite = value
            batch_losses.append(value)
            params = adam_step(params, grads, adam, lr)
            logger.debug(f"{label} epoch {epoch} batch {start // config.batch}: loss {value:.6g}")

        if not params.all_finite():
            raise DivergenceError(f"{label} produced non-finite parameters", epoch=epoch, last_finite_loss=last_finite)

        val, extras = validate(params)
        record = EpochRecord(
            epoch,
            float(np.mean(batch_losses)) if batch_losses else math.nan,
            val,
            extras.get("rate", math.nan),
            extras.get("distortion", math.nan),
            extras.get("nonzero"),
            extras.get("update_bits"),
        )
        history.append(record)
        training_logger.info(
            f"{label} epoch {epoch}: loss={record.loss:.6g} val={val:.6g} rate={record.rate:.4f} "
            f"dist={record.distortion:.4g}"
            + (f" nonzero={record.nonzero}" if record.nonzero is not None else "")
        )

        if val < best_val:
            best_val, best_params, best_epoch, since_best = val, params.copy(), epoch, 0
        else:
            since_best += 1
            if since_best >= config.patience:
                logger.warning(f"{label}: early stop at epoch {epoch} (best epoch {best_epoch})")
                break

    return FitResult(best_params, params, adam, history, best_epoch, best_val, epoch)


def _split_holdout(samples: Tensor, config: TrainConfig) -> Tuple[Tensor, Tensor]:
    n = len(samples)
    n_hold = int(math.floor(config.holdout_fraction * n + 1e-9)) if n >= 2 else 0
    order = np.random.default_rng(config.seed).permutation(n)
    return samples[order[n_hold:]], samples[order[:n_hold]]


def _split_params(values: Mapping, phi_names: List[str], theta_names: List[str]):
    return {n: values[n] for n in phi_names}, {n: values[n] for n in theta_names}


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------

@dataclass
class BackboneResult:
    model: CodecModel
    last: CodecModel
    adam: AdamState
    history: List[EpochRecord]
    best_epoch: int
    best_val: float
    epochs_run: int


def train_backbone(
    train: CsiDataset,
    val: CsiDataset,
    config: TrainConfig,
    model: CodecModel,
    adam: Optional[AdamState] = None,
    start_epoch: int = 0,
    best_val: float = math.inf,
) -> BackboneResult:
    """Minimise L_RD over (phi, theta); returns the best-validation parameters."""
    if len(train) == 0:
        raise ConfigError("backbone training set is empty")
    codec = model.config
    csi_shape = tuple(train.shape)
    phi_names, theta_names = list(model.phi.names()), list(model.theta.names())
    params = model.phi.merged(model.theta)
    holdout = val.samples if len(val) else train.samples

    def objective(ops, values, batch, noise):
        phi, theta = _split_params(values, phi_names, theta_names)
        return loss_rd(batch, phi, theta, config.lam, noise, codec, ops)

    def validate(p: ParamSet):
        rate, dist, _ = evaluate_discrete(holdout, p.subset(phi_names), p.subset(theta_names), codec)
        return rate + config.lam * dist, {"rate": rate, "distortion": dist}

    logger.info(f"=== Training backbone (lambda={config.lam}, seed={config.seed}) ===")
    fit = _fit(
        "backbone", params, phi_names + theta_names, objective, train.samples, validate,
        config, codec.latent_shape(*csi_shape), adam, start_epoch, best_val,
    )
    best = CodecModel(fit.params.subset(phi_names), fit.params.subset(theta_names), codec, csi_shape)
    last = CodecModel(fit.last.subset(phi_names), fit.last.subset(theta_names), codec, csi_shape)
    logger.info(f"Backbone done: best epoch {fit.best_epoch}, validation loss {fit.best_val:.6g}")
    return BackboneResult(best, last, fit.adam, fit.history, fit.best_epoch, fit.best_val, fit.epochs_run)


# ---------------------------------------------------------------------------
# Fine-tuning schemes
# ---------------------------------------------------------------------------

def _check_mode(config: TrainConfig, expected: str):
    if config.mode != expected:
        raise ConfigError(f"training config has mode '{config.mode}', expected '{expected}'")


def finetune_encoder_only(model: CodecModel, h_t: CsiDataset, config: TrainConfig) -> FinetuneResult:
    """Update phi only; theta (decoder and prior) stays exactly theta0."""
    _check_mode(config, "encoder_only")
    codec = model.config
    phi_names, theta_names = list(model.phi.names()), list(model.theta.names())
    train, holdout = _split_holdout(h_t.samples, config)
    holdout = holdout if len(holdout) else train
    params = model.phi.merged(model.theta)

    def objective(ops, values, batch, noise):
        phi, theta = _split_params(values, phi_names, theta_names)
        return loss_rd(batch, phi, theta, config.lam, noise, codec, ops)

    def validate(p: ParamSet):
        rate, dist, _ = evaluate_discrete(holdout, p.subset(phi_names), model.theta, codec)
        return rate + config.lam * dist, {"rate": rate, "distortion": dist}

    logger.info(f"=== Encoder-only fine-tuning on {len(h_t)} samples ===")
    fit = _fit("encoder_only", params, phi_names, objective, train, validate, config,
               codec.latent_shape(*h_t.shape))
    return FinetuneResult("encoder_only", fit.params.subset(phi_names), model.theta.copy(), None, fit.history)


def finetune_full_model(model: CodecModel, h_t: CsiDataset, config: TrainConfig) -> FinetuneResult:
    """Optimise L_RDM over (phi, theta); the decoder side ends at theta_bar = theta0 + Q_t(delta)."""
    _check_mode(config, "full_model")
    return _finetune_decoder(model, h_t, config, genie=False)


def genie_aided(model: CodecModel, h_t: CsiDataset, config: TrainConfig) -> FinetuneResult:
    """Full-model optimisation with free, unquantized decoder updates."""
    _check_mode(config, "genie_aided")
    return _finetune_decoder(model, h_t, config, genie=True)


def _finetune_decoder(model: CodecModel, h_t: CsiDataset, config: TrainConfig, genie: bool) -> FinetuneResult:
    codec = model.config
    theta0 = model.theta
    phi_names, theta_names = list(model.phi.names()), list(theta0.names())
    train, holdout = _split_holdout(h_t.samples, config)
    holdout = holdout if len(holdout) else train
    q = None if genie else config.quantizer
    prior = None if genie or not config.rdm_regularize else config.update_prior()
    coding_prior = config.update_prior()
    amortize = config.amortize_over or len(h_t)
    elements = h_t.shape[0] * h_t.shape[1]
    params = model.phi.merged(theta0)
    label = "genie_aided" if genie else "full_model"

    def objective(ops, values, batch, noise):
        phi, theta = _split_params(values, phi_names, theta_names)
        return loss_rdm(batch, phi, theta, theta0, config.lam, prior, q, noise,
                        config.update_weight, amortize, codec, ops)

    def validate(p: ParamSet):
        theta = p.subset(theta_names)
        extras = {}
        if genie:
            theta_eval = theta
        else:
            delta_bar = quantize_update(theta.flatten() - theta0.flatten(), config.quantizer)
            theta_eval = theta0.unflatten(theta0.flatten() + delta_bar)
            bits = update_rate(delta_bar, coding_prior, config.quantizer)
            extras = {"nonzero": count_nonzero(delta_bar), "update_bits": bits}
        rate, dist, _ = evaluate_discrete(holdout, p.subset(phi_names), theta_eval, codec)
        loss = rate + config.lam * dist
        if prior is not None:
            loss += config.update_weight * extras["update_bits"] / (amortize * elements)
        extras.update(rate=rate, distortion=dist)
        return loss, extras

    logger.info(f"=== {label} fine-tuning on {len(h_t)} samples (|theta|={theta0.num_params()}) ===")
    fit = _fit(label, params, phi_names + theta_names, objective, train, validate, config,
               codec.latent_shape(*h_t.shape))
    phi = fit.params.subset(phi_names)
    theta = fit.params.subset(theta_names)
    if genie:
        return FinetuneResult(label, phi, theta, None, fit.history)
    delta_bar = quantize_update(theta.flatten() - theta0.flatten(), config.quantizer)
    theta_bar = theta0.unflatten(theta0.flatten() + delta_bar)
    logger.info(f"Full-model update: {count_nonzero(delta_bar)} of {delta_bar.size} parameters non-zero")
    return FinetuneResult(label, phi, theta_bar, delta_bar, fit.history)


def no_finetune(model: CodecModel) -> FinetuneResult:
    return FinetuneResult("no_ft", model.phi.copy(), model.theta.copy())


def evaluate_no_ft(model: CodecModel, stream: CsiDataset, config: Optional[TrainConfig] = None) -> SessionResult:
    """Code `stream` with the backbone unchanged; rate_update is 0."""
    return encode_session(model, no_finetune(model), stream, config or TrainConfig(mode="encoder_only"))


def run_finetune(model: CodecModel, h_t: CsiDataset, config: TrainConfig, mode: str) -> FinetuneResult:
    if mode == "no_ft":
        return no_finetune(model)
    scheme = config.model_copy(update={"mode": mode})
    if mode == "encoder_only":
        return finetune_encoder_only(model, h_t, scheme)
    if mode == "full_model":
        return finetune_full_model(model, h_t, scheme)
    if mode == "genie_aided":
        return genie_aided(model, h_t, scheme)
    raise ConfigError(f"unknown fine-tuning mode '{mode}'")


# ---------------------------------------------------------------------------
# Sessions (encode / decode)
# ---------------------------------------------------------------------------

def encode_session(
    model: CodecModel,
    result: FinetuneResult,
    eval_set: CsiDataset,
    config: TrainConfig,
) -> SessionResult:
    """Emit b_delta (full model only) once and b_z per evaluated sample; reconstruct locally."""
    started = time.perf_counter()
    codec = model.config
    prior = FactorizedPrior(result.theta, codec)
    prior.check_coverage()
    n = len(eval_set)
    elements = eval_set.shape[0] * eval_set.shape[1]

    update_section = None
    if result.mode == "full_model":
        update_section = encode_update(result.delta_bar, config.update_prior(), config.quantizer)
    update_bits = 0 if update_section is None else 8 * len(update_section)

    streams: List[Bitstream] = []
    points: List[RdPoint] = []
    recon = np.empty_like(eval_set.samples)
    for i in range(n):
        if i % MAX_LATENT_SECTIONS == 0:
            streams.append(Bitstream())
            if update_section is not None and i == 0:
                streams[0].add(SECTION_UPDATE, update_section)
        h = eval_set.samples[i]
        z_bar = quantize_unit(encode_features(h, result.phi), codec.alphabet)
        section = entropy_encode(z_bar, prior)
        streams[-1].add(SECTION_LATENT, section)
        recon[i] = decode_features(z_bar, result.theta)
        points.append(RdPoint(8 * len(section) / elements, update_bits / (n * elements), nmse_db(h, recon[i])))
    if update_section is not None and n == 0:
        streams.append(Bitstream().add(SECTION_UPDATE, update_section))

    session = SessionResult(
        result.mode, result.phi, result.theta, streams, points, recon,
        result.delta_bar, result.history, time.perf_counter() - started,
    )
    agg = session.aggregate
    logger.info(
        f"Session {result.mode}: {n} samples, rate_total={agg.rate_total:.4f} "
        f"(latent {agg.rate_latent:.4f}, update {agg.rate_update:.4f}) nmse={agg.nmse_db:.2f} dB"
    )
    return session


def decode_session(
    bitstreams: List[Bitstream],
    theta0: ParamSet,
    codec: CodecConfig,
    csi_shape: Tuple[int, int],
    quantizer: UpdateQuantizer,
    prior: UpdatePrior,
    theta: Optional[ParamSet] = None,
) -> Tensor:
    """Decoder side: rebuild theta_bar from theta0 + delta_bar when an update is present, then decode latents.

    `theta` overrides the decoder parameters (genie-aided sessions carry no update section).
    """
    if theta is None:
        theta = theta0
        updates = [p for b in bitstreams for p in b.all(SECTION_UPDATE)]
        if len(updates) > 1:
            raise DataFormatError(f"session carries {len(updates)} model-update sections, expected at most 1")
        if updates:
            delta_bar = decode_update(updates[0], prior, quantizer, theta0.num_params())
            theta = theta0.unflatten(theta0.flatten() + delta_bar)
    latent_prior = FactorizedPrior(theta, codec)
    latent_shape = codec.latent_shape(*csi_shape)
    sections = [p for b in bitstreams for p in b.all(SECTION_LATENT)]
    out = np.empty((len(sections), 2) + tuple(csi_shape))
    for i, section in enumerate(sections):
        z_bar = entropy_decode(section, latent_prior, latent_shape)
        out[i] = decode_features(z_bar, theta)
    return out


def run_session(
    model: CodecModel,
    ft_set: CsiDataset,
    eval_set: CsiDataset,
    config: TrainConfig,
    mode: str,
) -> SessionResult:
    result = run_finetune(model, ft_set, config, mode)
    return encode_session(model, result, eval_set, config)


# ---------------------------------------------------------------------------
# Scheduling
# ---------------------------------------------------------------------------

def schedule(
    stream: CsiDataset,
    interval: int,
    config: TrainConfig,
    model: CodecModel,
    ft_samples: Optional[int] = None,
    mode: str = "full_model",
) -> List[SessionResult]:
    """Fine-tune on each window's leading slice, evaluate on the rest of the window."""
    if interval < 2:
        raise ConfigError(f"interval must be at least 2 samples, got {interval}")
    ft = ft_samples if ft_samples is not None else min(100, interval // 2)
    if not 1 <= ft < interval:
        raise ConfigError(f"fine-tuning slice {ft} must be in [1, interval={interval})")
    sessions = []
    for start in range(0, len(stream), interval):
        stop = min(start + interval, len(stream))
        if stop - start <= ft:
            logger.warning(f"Dropping trailing window [{start}, {stop}): no samples left to evaluate")
            break
        ft_set = stream.subset(np.arange(start, start + ft), split="finetune")
        eval_set = stream.subset(np.arange(start + ft, stop), split="eval-stream")
        logger.info(f"Window [{start}, {stop}): fine-tune on {ft}, evaluate {stop - start - ft}")
        sessions.append(run_session(model, ft_set, eval_set, config, mode))
    return sessions


def schedule_aggregate(sessions: List[SessionResult]) -> RdPoint:
    return aggregate_points([p for s in sessions for p in s.points])


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def session_manifest(
    session: SessionResult,
    config: TrainConfig,
    checkpoint_sha256: Optional[str] = None,
    bitstream_files: Optional[List[str]] = None,
    extra: Optional[dict] = None,
) -> dict:
    agg = session.aggregate
    return {
        "mode": session.mode,
        "config": config.model_dump(mode="json", by_alias=True),
        "checkpoint_sha256": checkpoint_sha256,
        "bitstreams": bitstream_files or [],
        "nonzero_updates": session.nonzero,
        "update_bits": session.update_bits,
        "points": [p.to_dict() for p in session.points],
        "aggregate": agg.to_dict(),
        "history": [asdict(r) for r in session.history],
        "wall_time": session.wall_time,
        **(extra or {}),
    }


def write_manifest(manifest: dict, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, default=_json_default))
    logger.info(f"Wrote session manifest {path}")
    return path


def _json_default(value):
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    raise TypeError(f"cannot serialize {type(value)}")
