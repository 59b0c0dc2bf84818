"""CKPT1 checkpoint files: magic, version, JSON header, raw little-endian f64 tensors."""
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from core.codec import CodecConfig, CodecModel
from core.errors import ConfigError, DataFormatError
from core.tensor import AdamState, ParamSet

# Set up logging
logger = logging.getLogger(__name__)

CKPT_MAGIC = b"NCKP"
CKPT_VERSION = 1
CKPT_PREAMBLE = struct.Struct("<4sHI")


@dataclass
class Checkpoint:
    phi: ParamSet
    theta: ParamSet
    config: CodecConfig = field(default_factory=CodecConfig)
    meta: dict = field(default_factory=dict)
    adam: Optional[AdamState] = None

    def digest(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()

    def model(self) -> CodecModel:
        shape = self.meta.get("csi_shape")
        return CodecModel(self.phi, self.theta, self.config, tuple(shape) if shape else None)

    @classmethod
    def from_model(cls, model: CodecModel, meta: Optional[dict] = None, adam: Optional[AdamState] = None) -> "Checkpoint":
        meta = dict(meta or {})
        if model.csi_shape is not None:
            meta["csi_shape"] = list(model.csi_shape)
        return cls(model.phi, model.theta, model.config, meta, adam)


def _sections(ckpt: Checkpoint):
    yield "phi", ckpt.phi
    yield "theta", ckpt.theta
    if ckpt.adam is not None:
        names = [n for n in list(ckpt.phi.names()) + list(ckpt.theta.names()) if n in ckpt.adam.m]
        yield "adam.m", ParamSet((n, ckpt.adam.m[n]) for n in names)
        yield "adam.v", ParamSet((n, ckpt.adam.v[n]) for n in names)


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "topology": ckpt.config.model_dump(mode="json"),
        "meta": ckpt.meta,
        "adam_step": ckpt.adam.step if ckpt.adam is not None else None,
        "tensors": [],
    }
    payload = bytearray()
    for section, params in _sections(ckpt):
        for name, value in params.items():
            header["tensors"].append(
                {"section": section, "name": name, "shape": list(value.shape)}
            )
            payload += np.ascontiguousarray(value, dtype="<f8").tobytes()
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return CKPT_PREAMBLE.pack(CKPT_MAGIC, CKPT_VERSION, len(header_bytes)) + header_bytes + bytes(payload)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < CKPT_PREAMBLE.size:
        raise DataFormatError("truncated checkpoint preamble", offset=len(data))
    magic, version, header_len = CKPT_PREAMBLE.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise DataFormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != CKPT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", offset=4)
    start = CKPT_PREAMBLE.size
    if len(data) < start + header_len:
        raise DataFormatError("truncated checkpoint header", offset=len(data))
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
        config = CodecConfig(**header["topology"])
    except (ValueError, KeyError, TypeError) as e:
        raise DataFormatError(f"unreadable checkpoint header: {e}", offset=start) from e

    sections = {"phi": ParamSet(), "theta": ParamSet(), "adam.m": ParamSet(), "adam.v": ParamSet()}
    offset = start + header_len
    for entry in header["tensors"]:
        if entry.get("section") not in sections:
            raise DataFormatError(f"unknown checkpoint section {entry.get('section')!r}", offset=start)
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise DataFormatError(f"truncated tensor '{entry['name']}'", offset=len(data))
        value = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset)
        sections[entry["section"]][entry["name"]] = value.astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise DataFormatError(f"{len(data) - offset} trailing bytes in checkpoint", offset=offset)

    adam = None
    if header.get("adam_step") is not None:
        adam = AdamState(
            m=dict(sections["adam.m"].items()),
            v=dict(sections["adam.v"].items()),
            step=int(header["adam_step"]),
        )
    return Checkpoint(sections["phi"], sections["theta"], config, header.get("meta", {}), adam)


def save(ckpt: Checkpoint, path: Union[str, Path]) -> str:
    """Write `ckpt` and return its SHA-256 digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_bytes(ckpt)
    path.write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    logger.info(f"Saved checkpoint {path} ({len(data)} bytes, sha256 {digest[:12]})")
    return digest


def load(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e}") from e
    ckpt = from_bytes(data)
    ckpt.meta.setdefault("sha256", hashlib.sha256(data).hexdigest())
    logger.info(f"Loaded checkpoint {path}")
    return ckpt
