"""Carryless range coder (Subbotin scheme) on a 64-bit register with static frequency tables."""
import bisect
import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from core.errors import ContractViolation, DecodeError

# Set up logging
logger = logging.getLogger(__name__)

TOP = 1 << 56
BOT = 1 << 48
MASK = (1 << 64) - 1
STATE_BYTES = 8
PRECISION = 24


@dataclass(frozen=True)
class FrequencyTable:
    """Integer frequencies summing to 2**precision; every symbol has frequency >= 1."""

    freqs: tuple
    cumulative: tuple
    precision: int = PRECISION

    @classmethod
    def from_pmf(cls, pmf: Sequence[float], precision: int = PRECISION) -> "FrequencyTable":
        pmf = np.asarray(pmf, dtype=np.float64)
        total = 1 << precision
        if pmf.ndim != 1 or pmf.size == 0 or pmf.size > total:
            raise ContractViolation(f"cannot build a {precision}-bit table for {pmf.size} symbols")
        if not np.all(np.isfinite(pmf)) or np.any(pmf < 0) or pmf.sum() <= 0:
            raise ContractViolation("pmf must be finite, non-negative and not all zero")
        pmf = pmf / pmf.sum()
        freqs = np.maximum(1, np.floor(pmf * total).astype(np.int64))
        # Hand the rounding residue to the most probable symbols, never dropping one below 1.
        residue = int(total - freqs.sum())
        order = np.argsort(-freqs, kind="stable")
        i = 0
        while residue != 0:
            j = order[i % order.size]
            step = 1 if residue > 0 else -1
            if freqs[j] + step >= 1:
                freqs[j] += step
                residue -= step
            i += 1
        cumulative = np.concatenate(([0], np.cumsum(freqs)))
        return cls(tuple(int(f) for f in freqs), tuple(int(c) for c in cumulative), precision)

    @property
    def size(self) -> int:
        return len(self.freqs)

    def probabilities(self) -> np.ndarray:
        return np.asarray(self.freqs, dtype=np.float64) / (1 << self.precision)

    def code_length(self, symbols: Sequence[int]) -> float:
        """Ideal code length in bits of `symbols` under this table."""
        symbols = np.asarray(symbols, dtype=np.int64)
        if symbols.size == 0:
            return 0.0
        return float(-np.log2(self.probabilities()[symbols]).sum())


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK
        self.out = bytearray()

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOT:
                self.range = -self.low & (BOT - 1)
            else:
                break
            self.out.append(self.low >> 56)
            self.range = (self.range << 8) & MASK
            self.low = (self.low << 8) & MASK

    def encode(self, symbol: int, table: FrequencyTable):
        if not 0 <= symbol < table.size:
            raise ContractViolation(f"symbol index {symbol} outside table of size {table.size}")
        r = self.range >> table.precision
        self.low += table.cumulative[symbol] * r
        self.range = table.freqs[symbol] * r
        self._normalize()

    def finish(self) -> bytes:
        for _ in range(STATE_BYTES):
            self.out.append(self.low >> 56)
            self.low = (self.low << 8) & MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(STATE_BYTES):
            self.code = (self.code << 8) | self._read_byte()

    def _read_byte(self) -> int:
        if self.pos >= len(self.data):
            raise DecodeError("range-coded stream ended early", offset=self.pos)
        byte = self.data[self.pos]
        self.pos += 1
        return byte

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOT:
                self.range = -self.low & (BOT - 1)
            else:
                break
            self.code = ((self.code << 8) & MASK) | self._read_byte()
            self.range = (self.range << 8) & MASK
            self.low = (self.low << 8) & MASK

    def decode(self, table: FrequencyTable) -> int:
        r = self.range >> table.precision
        value = ((self.code - self.low) & MASK) // r
        if value >= table.cumulative[-1]:
            raise DecodeError("corrupt range-coded stream", offset=self.pos)
        symbol = bisect.bisect_right(table.cumulative, value) - 1
        self.low += table.cumulative[symbol] * r
        self.range = table.freqs[symbol] * r
        self._normalize()
        return symbol


def encode_symbols(symbols: Sequence[int], tables: List[FrequencyTable], table_ids: Sequence[int]) -> bytes:
    """Encode symbol indices, each under tables[table_ids[i]]."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    table_ids = np.asarray(table_ids, dtype=np.int64).ravel()
    if symbols.size != table_ids.size:
        raise ContractViolation(f"{symbols.size} symbols but {table_ids.size} table ids")
    encoder = RangeEncoder()
    for symbol, tid in zip(symbols.tolist(), table_ids.tolist()):
        encoder.encode(symbol, tables[tid])
    data = encoder.finish()
    logger.debug(f"Range-coded {symbols.size} symbols into {len(data)} bytes")
    return data


def decode_symbols(data: bytes, tables: List[FrequencyTable], table_ids: Sequence[int]) -> np.ndarray:
    table_ids = np.asarray(table_ids, dtype=np.int64).ravel()
    decoder = RangeDecoder(data)
    out = np.empty(table_ids.size, dtype=np.int64)
    for i, tid in enumerate(table_ids.tolist()):
        out[i] = decoder.decode(tables[tid])
    if decoder.pos != len(data):
        raise DecodeError(f"{len(data) - decoder.pos} unread bytes after last symbol", offset=decoder.pos)
    return out
