"""Synthetic geometric multipath CSI, CSIBIN ingestion and dataset splitting."""
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from core.errors import ConfigError, DataFormatError
from core.tensor import Tensor

# Set up logging
logger = logging.getLogger(__name__)

CSIBIN_MAGIC = b"CSIB"
CSIBIN_VERSION = 1
CSIBIN_HEADER = struct.Struct("<4sHHIII")
FLAG_NORMALIZED = 0x1

# UPA layout used for 256 antennas (N_y x N_z).
UPA_256 = (64, 4)


class ChannelConfig(BaseModel):
    """Clustered geometric channel. Angles in radians, delays in seconds."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_tx: int = Field(64, description="BS antenna count N_t")
    n_sub: int = Field(64, description="OFDM subcarrier count N_c")
    n_paths: int = Field(10, ge=1, description="Propagation paths per sample")
    angle_spread: float = Field(0.01, ge=0.0, description="Std of path angles around the mean AoD")
    delay_spread: float = Field(1e-7, ge=0.0, description="Mean excess path delay")
    carrier_offset: float = Field(
        0.0, gt=-1.0, description="Relative carrier offset; antenna spacing is 0.5*(1+offset) wavelengths"
    )
    mean_angle: float = Field(0.0, description="Mean angle of departure")
    bandwidth: float = Field(50e6, gt=0.0)
    seed: int = Field(0, ge=0, lt=2**64)

    @field_validator("n_tx", "n_sub")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value < 1 or value & (value - 1):
            raise ValueError(f"must be a power of two, got {value}")
        return value

    def fingerprint(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()[:16]


def make_config(**fields) -> ChannelConfig:
    try:
        return ChannelConfig(**fields)
    except ValidationError as e:
        raise ConfigError(f"invalid channel config: {e}") from e


@dataclass
class CsiDataset:
    """Samples stored as [count, 2, N_t, N_c] (real plane, imaginary plane)."""

    samples: Tensor
    config: Optional[ChannelConfig] = None
    split: str = "all"
    normalized: bool = False
    scene_index: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 4 or self.samples.shape[1] != 2:
            raise DataFormatError(f"samples must be [count,2,N_t,N_c], got {self.samples.shape}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.samples.shape[2], self.samples.shape[3]

    def subset(self, indices, split: Optional[str] = None) -> "CsiDataset":
        indices = np.asarray(indices, dtype=int)
        scenes = None if self.scene_index is None else self.scene_index[indices]
        return replace(
            self,
            samples=self.samples[indices].copy(),
            split=split or self.split,
            scene_index=scenes,
            meta=dict(self.meta),
        )

    def complex(self) -> np.ndarray:
        return self.samples[:, 0] + 1j * self.samples[:, 1]

    def fingerprint(self) -> str:
        return hashlib.sha256(self.samples.astype("<f4").tobytes()).hexdigest()

    def write(self, path: Union[str, Path]) -> Path:
        return write_csibin(self, path)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _array_response(config: ChannelConfig, azimuth: float, elevation: float) -> np.ndarray:
    spacing = 0.5 * (1.0 + config.carrier_offset)
    if config.n_tx == 256:
        n_y, n_z = UPA_256
        a_y = np.exp(-2j * np.pi * spacing * np.arange(n_y) * np.sin(azimuth) * np.cos(elevation))
        a_z = np.exp(-2j * np.pi * spacing * np.arange(n_z) * np.sin(elevation))
        return np.kron(a_y, a_z)
    return np.exp(-2j * np.pi * spacing * np.arange(config.n_tx) * np.sin(azimuth))


def _sample_channel(config: ChannelConfig, rng: np.random.Generator, mean_angle: float) -> np.ndarray:
    delta_f = config.bandwidth / config.n_sub
    subcarriers = np.arange(config.n_sub)
    gains = (rng.standard_normal(config.n_paths) + 1j * rng.standard_normal(config.n_paths)) / np.sqrt(
        2.0 * config.n_paths
    )
    azimuths = mean_angle + config.angle_spread * rng.standard_normal(config.n_paths)
    elevations = config.angle_spread * rng.standard_normal(config.n_paths)
    delays = config.delay_spread * rng.exponential(1.0, config.n_paths)

    h = np.zeros((config.n_tx, config.n_sub), dtype=np.complex128)
    for l in range(config.n_paths):
        a = _array_response(config, azimuths[l], elevations[l])
        b = np.exp(-2j * np.pi * subcarriers * delta_f * delays[l])
        h += gains[l] * np.outer(a, b)
    return h


def _pack(h: np.ndarray) -> np.ndarray:
    return np.stack([h.real, h.imag])


def generate(config: ChannelConfig, count: int, drift_per_scene: float = 0.0) -> CsiDataset:
    """Draw `count` samples; sample i uses its own seed spawned from config.seed."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    logger.info(
        f"Generating {count} CSI samples ({config.n_tx}x{config.n_sub}, "
        f"{config.n_paths} paths, fingerprint {config.fingerprint()})"
    )
    children = np.random.SeedSequence(config.seed).spawn(count)
    samples = np.empty((count, 2, config.n_tx, config.n_sub))
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        samples[i] = _pack(_sample_channel(config, rng, config.mean_angle + drift_per_scene * i))
    return CsiDataset(
        samples=samples,
        config=config,
        scene_index=np.arange(count),
        meta={"seed": config.seed, "drift_per_scene": drift_per_scene},
    )


def scene_stream(config: ChannelConfig, count: int, drift_per_scene: float) -> CsiDataset:
    """Evaluation stream whose mean angle drifts linearly with the scene index."""
    stream = generate(config, count, drift_per_scene=drift_per_scene)
    stream.split = "eval-stream"
    return stream


def shift(
    config: ChannelConfig,
    angle_shift: float = 0.0,
    spread_scale: float = 1.0,
    path_delta: int = 0,
) -> ChannelConfig:
    """Config for a new environment: rotated mean AoD, scaled spreads, changed path count."""
    if angle_shift == 0.0 and spread_scale == 1.0 and path_delta == 0:
        return config
    fields = config.model_dump()
    fields.update(
        mean_angle=config.mean_angle + angle_shift,
        angle_spread=config.angle_spread * spread_scale,
        delay_spread=config.delay_spread * spread_scale,
        n_paths=config.n_paths + path_delta,
    )
    return make_config(**fields)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def correlation_matrix(dataset: CsiDataset) -> np.ndarray:
    """Spatial correlation E[H H^H] / N_c over the dataset."""
    h = dataset.complex()
    return np.einsum("sij,skj->ik", h, h.conj()) / (len(dataset) * dataset.shape[1])


def dominant_eigen_fraction(dataset: CsiDataset) -> float:
    eig = np.linalg.eigvalsh(correlation_matrix(dataset))
    return float(eig[-1] / eig.sum())


def mean_power(dataset: CsiDataset) -> float:
    return float(np.mean(np.sum(dataset.samples ** 2, axis=(1, 2, 3))))


# ---------------------------------------------------------------------------
# Normalization and splitting
# ---------------------------------------------------------------------------

def normalize(dataset: CsiDataset) -> CsiDataset:
    """Scale by one global constant so the mean squared Frobenius norm is N_t * N_c."""
    if len(dataset) == 0:
        return dataset
    n_t, n_c = dataset.shape
    power = mean_power(dataset)
    if power == 0.0:
        logger.warning("Dataset has zero power; normalization skipped")
        return dataset
    scale = np.sqrt(n_t * n_c / power)
    logger.debug(f"Normalizing dataset by global scale {scale:.6g}")
    meta = dict(dataset.meta)
    meta["normalization_scale"] = meta.get("normalization_scale", 1.0) * scale
    return replace(dataset, samples=dataset.samples * scale, normalized=True, meta=meta)


def split(
    dataset: CsiDataset,
    fractions: Tuple[float, float, float] = (0.4, 0.4, 0.2),
    seed: int = 0,
) -> Tuple[CsiDataset, CsiDataset, CsiDataset]:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n = len(dataset)
    counts = [int(np.floor(f * n + 1e-9)) for f in fractions]
    counts[0] += n - sum(counts)
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum([0] + counts)
    tags = ("train", "val", "test")
    parts = tuple(
        dataset.subset(order[bounds[i]:bounds[i + 1]], split=tags[i]) for i in range(3)
    )
    logger.info(f"Split {n} samples into train/val/test = {counts}")
    return parts


# ---------------------------------------------------------------------------
# CSIBIN
# ---------------------------------------------------------------------------

def write_csibin(dataset: CsiDataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = len(dataset)
    n_t, n_c = dataset.shape
    flags = FLAG_NORMALIZED if dataset.normalized else 0
    payload = dataset.samples.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(CSIBIN_HEADER.pack(CSIBIN_MAGIC, CSIBIN_VERSION, flags, count, n_t, n_c))
        f.write(payload)

    manifest = {
        "config": dataset.config.model_dump() if dataset.config is not None else None,
        "seed": dataset.meta.get("seed"),
        "split": dataset.split,
        "normalized": dataset.normalized,
        "count": count,
        "shape": [n_t, n_c],
        "sha256": hashlib.sha256(payload).hexdigest(),
        "meta": {k: v for k, v in dataset.meta.items() if k != "seed"},
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
    logger.info(f"Wrote {count} samples to {path}")
    return path


def decode_csibin(data: bytes) -> Tuple[np.ndarray, bool]:
    if len(data) < CSIBIN_HEADER.size:
        raise DataFormatError(
            f"truncated header: {len(data)} of {CSIBIN_HEADER.size} bytes", offset=len(data)
        )
    magic, version, flags, count, n_t, n_c = CSIBIN_HEADER.unpack_from(data)
    if magic != CSIBIN_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}", offset=0)
    if version != CSIBIN_VERSION:
        raise DataFormatError(f"unsupported CSIBIN version {version}", offset=4)
    if flags & ~FLAG_NORMALIZED:
        raise DataFormatError(f"unknown flag bits {flags:#06x}", offset=6)
    if count and (n_t == 0 or n_c == 0):
        raise DataFormatError(f"invalid sample shape {n_t}x{n_c}", offset=12)
    expected = CSIBIN_HEADER.size + count * 2 * n_t * n_c * 4
    if len(data) < expected:
        raise DataFormatError(
            f"truncated payload: expected {expected} bytes, found {len(data)}", offset=len(data)
        )
    if len(data) > expected:
        raise DataFormatError(f"{len(data) - expected} trailing bytes after payload", offset=expected)
    samples = np.frombuffer(data, dtype="<f4", offset=CSIBIN_HEADER.size).astype(np.float64)
    return samples.reshape(count, 2, n_t, n_c), bool(flags & FLAG_NORMALIZED)


def ingest(path: Union[str, Path]) -> CsiDataset:
    """Read a CSIBIN file (and its JSON manifest when present)."""
    path = Path(path)
    logger.info(f"Ingesting CSI dump {path}")
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    samples, normalized = decode_csibin(data)
    if not np.all(np.isfinite(samples)):
        raise DataFormatError("non-finite sample values", offset=CSIBIN_HEADER.size)

    config, split_tag, meta = None, "all", {}
    manifest_path = path.with_suffix(".json")
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text())
            if not isinstance(manifest, dict):
                raise ValueError("manifest is not a JSON object")
            if manifest.get("config"):
                config = ChannelConfig(**manifest["config"])
            split_tag = manifest.get("split", split_tag)
            meta = dict(manifest.get("meta") or {})
            meta["seed"] = manifest.get("seed")
        except (OSError, ValueError, TypeError, ValidationError) as e:
            raise DataFormatError(f"bad manifest {manifest_path}: {e}") from e
    return CsiDataset(
        samples=samples,
        config=config,
        split=split_tag,
        normalized=normalized,
        scene_index=np.arange(samples.shape[0]),
        meta=meta,
    )
