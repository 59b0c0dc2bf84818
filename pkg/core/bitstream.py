"""BITS1 container: magic "NBIT", u16 version, u8 section count, (u8 id, u32 length) per section, payloads."""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

from core.errors import ConfigError, ContractViolation, DataFormatError

# Set up logging
logger = logging.getLogger(__name__)
bitstream_logger = logging.getLogger("bitstream")

BITS_MAGIC = b"NBIT"
BITS_VERSION = 1
BITS_PREAMBLE = struct.Struct("<4sHB")
SECTION_ENTRY = struct.Struct("<BI")

SECTION_UPDATE = 1
SECTION_LATENT = 2
SECTION_NAMES = {SECTION_UPDATE: "model-update", SECTION_LATENT: "latent"}


@dataclass
class Bitstream:
    sections: List[Tuple[int, bytes]] = field(default_factory=list)
    version: int = BITS_VERSION

    def add(self, section_id: int, payload: bytes) -> "Bitstream":
        if section_id not in SECTION_NAMES:
            raise ContractViolation(f"unknown section id {section_id}")
        if len(self.sections) >= 255:
            raise ContractViolation("a bitstream holds at most 255 sections")
        self.sections.append((section_id, bytes(payload)))
        return self

    def get(self, section_id: int, index: int = 0) -> bytes:
        matches = [p for sid, p in self.sections if sid == section_id]
        if index >= len(matches):
            raise DataFormatError(f"bitstream has no {SECTION_NAMES.get(section_id, section_id)} section #{index}")
        return matches[index]

    def all(self, section_id: int) -> List[bytes]:
        return [p for sid, p in self.sections if sid == section_id]

    def has(self, section_id: int) -> bool:
        return any(sid == section_id for sid, _ in self.sections)

    def table(self) -> List[Dict[str, int]]:
        """Section table as (id, offset, length) rows; offsets are absolute in the serialized form."""
        offset = BITS_PREAMBLE.size + SECTION_ENTRY.size * len(self.sections)
        rows = []
        for sid, payload in self.sections:
            rows.append({"id": sid, "offset": offset, "length": len(payload)})
            offset += len(payload)
        return rows

    def section_bits(self, section_id: int) -> int:
        return 8 * sum(len(p) for p in self.all(section_id))

    def to_bytes(self) -> bytes:
        out = bytearray(BITS_PREAMBLE.pack(BITS_MAGIC, self.version, len(self.sections)))
        for sid, payload in self.sections:
            out += SECTION_ENTRY.pack(sid, len(payload))
        for _, payload in self.sections:
            out += payload
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < BITS_PREAMBLE.size:
            raise DataFormatError("truncated bitstream preamble", offset=len(data))
        magic, version, count = BITS_PREAMBLE.unpack_from(data)
        if magic != BITS_MAGIC:
            raise DataFormatError(f"bad bitstream magic {magic!r}", offset=0)
        if version != BITS_VERSION:
            raise DataFormatError(f"unsupported bitstream version {version}", offset=4)
        entries = []
        pos = BITS_PREAMBLE.size
        for _ in range(count):
            if pos + SECTION_ENTRY.size > len(data):
                raise DataFormatError("truncated section table", offset=len(data))
            sid, length = SECTION_ENTRY.unpack_from(data, pos)
            if sid not in SECTION_NAMES:
                raise DataFormatError(f"unknown section id {sid}", offset=pos)
            entries.append((sid, length))
            pos += SECTION_ENTRY.size
        sections = []
        for sid, length in entries:
            if pos + length > len(data):
                raise DataFormatError(
                    f"{SECTION_NAMES[sid]} section needs {length} bytes, {len(data) - pos} left",
                    offset=len(data),
                )
            sections.append((sid, data[pos:pos + length]))
            pos += length
        if pos != len(data):
            raise DataFormatError(f"{len(data) - pos} trailing bytes after last section", offset=pos)
        return cls(sections, version)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = self.to_bytes()
        path.write_bytes(data)
        for row in self.table():
            bitstream_logger.info(
                f"{path.name}: section {SECTION_NAMES[row['id']]} offset={row['offset']} length={row['length']}"
            )
        return path


def read(path: Union[str, Path]) -> Bitstream:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read bitstream {path}: {e}") from e
    return Bitstream.from_bytes(data)
