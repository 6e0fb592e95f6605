"""Canonical Huffman coding over small unsigned symbol alphabets.

Code tables are canonical: fully determined by per-symbol code lengths,
so only the lengths ever need to be stored.  Bits are packed
most-significant-bit first within each byte and the bit count is carried
alongside, so trailing padding is always zero bits.
"""

import heapq
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import CodingError, CorruptionError

MAX_SYMBOL = 1 << 16
MAX_CODE_LEN = 64


def build_histogram(symbols) -> dict[int, int]:
    """Exact occurrence counts keyed by symbol."""
    symbols = np.asarray(symbols)
    if symbols.size == 0:
        raise ValueError("cannot build a histogram from no symbols")
    if symbols.min() < 0 or symbols.max() >= MAX_SYMBOL:
        raise ValueError("symbols must be unsigned and < 2^16")
    return dict(Counter(symbols.tolist()))


@dataclass
class CanonicalCode:
    """Prefix code defined by per-symbol lengths, codewords assigned canonically."""

    lengths: dict[int, int]
    codewords: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.lengths:
            raise ValueError("code needs at least one symbol")
        for sym, ln in self.lengths.items():
            if not 1 <= ln <= MAX_CODE_LEN:
                raise ValueError(f"code length {ln} for symbol {sym} out of range")
        ordered = sorted(self.lengths.items(), key=lambda kv: (kv[1], kv[0]))
        self.codewords = {}
        code = 0
        prev_len = ordered[0][1]
        for sym, ln in ordered:
            code <<= ln - prev_len
            self.codewords[sym] = code
            code += 1
            prev_len = ln
        if len(self.lengths) >= 2 and code != (1 << prev_len):
            raise ValueError("lengths do not satisfy Kraft equality")

    def kraft_sum(self) -> float:
        return float(sum(2.0 ** -ln for ln in self.lengths.values()))

    def bits(self, sym: int) -> str:
        return format(self.codewords[sym], f"0{self.lengths[sym]}b")


def build_code(histogram: dict[int, int]) -> CanonicalCode:
    """Huffman-optimal canonical code for the histogram.

    Merges tie-break on (count, lowest contained symbol) so the tree, and
    therefore the lengths, are deterministic.  A single-symbol alphabet
    gets a 1-bit code since a decoder cannot consume zero bits per symbol.
    """
    if not histogram:
        raise ValueError("histogram is empty")
    if any(c <= 0 for c in histogram.values()):
        raise ValueError("histogram counts must be positive")
    if len(histogram) == 1:
        (sym,) = histogram
        return CanonicalCode({sym: 1})

    lengths = {sym: 0 for sym in histogram}
    heap = [(count, sym, [sym]) for sym, count in histogram.items()]
    heapq.heapify(heap)
    while len(heap) > 1:
        c1, m1, syms1 = heapq.heappop(heap)
        c2, m2, syms2 = heapq.heappop(heap)
        for s in syms1:
            lengths[s] += 1
        for s in syms2:
            lengths[s] += 1
        heapq.heappush(heap, (c1 + c2, min(m1, m2), syms1 + syms2))
    return CanonicalCode(lengths)


@dataclass
class BitStream:
    data: bytes
    bit_count: int

    def __post_init__(self):
        if self.bit_count > 8 * len(self.data):
            raise ValueError("bit_count exceeds the packed bytes")
        if len(self.data) != (self.bit_count + 7) // 8:
            raise ValueError("packed bytes not minimal for bit_count")
        pad = 8 * len(self.data) - self.bit_count
        if pad and self.data and (self.data[-1] & ((1 << pad) - 1)):
            raise ValueError("trailing pad bits must be zero")


def encode(symbols, code: CanonicalCode) -> BitStream:
    """Concatenate the symbols' codewords into a packed MSB-first stream."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.size == 0:
        return BitStream(b"", 0)
    max_sym = int(symbols.max())
    len_lut = np.zeros(max_sym + 1, dtype=np.int64)
    code_lut = np.zeros(max_sym + 1, dtype=np.uint64)
    for sym, ln in code.lengths.items():
        if sym <= max_sym:
            len_lut[sym] = ln
            code_lut[sym] = code.codewords[sym]
    lens = len_lut[symbols]
    if np.any(lens == 0):
        missing = int(symbols[lens == 0][0])
        raise CodingError(f"symbol {missing} not present in the code table")
    total = int(lens.sum())
    starts = np.cumsum(lens) - lens
    offset = np.arange(total) - np.repeat(starts, lens)
    shift = (np.repeat(lens, lens) - 1 - offset).astype(np.uint64)
    bits = (np.repeat(code_lut[symbols], lens) >> shift) & np.uint64(1)
    return BitStream(np.packbits(bits.astype(np.uint8)).tobytes(), total)


def decode(stream: BitStream, code: CanonicalCode, count: int) -> np.ndarray:
    """Read exactly ``count`` symbols; the stream must be consumed exactly."""
    ordered = sorted(code.lengths.items(), key=lambda kv: (kv[1], kv[0]))
    max_len = ordered[-1][1]
    first_code = [0] * (max_len + 2)
    first_idx = [0] * (max_len + 2)
    num_at = [0] * (max_len + 2)
    for i, (sym, ln) in enumerate(ordered):
        if num_at[ln] == 0:
            first_code[ln] = code.codewords[sym]
            first_idx[ln] = i
        num_at[ln] += 1
    syms_in_order = [sym for sym, _ in ordered]

    bits = np.unpackbits(np.frombuffer(stream.data, dtype=np.uint8))[: stream.bit_count]
    out = np.empty(count, dtype=np.int64)
    pos = 0
    acc = 0
    acc_len = 0
    produced = 0
    n_bits = stream.bit_count
    while produced < count:
        if pos >= n_bits:
            raise CorruptionError(
                f"stream exhausted after {produced} of {count} symbols"
            )
        acc = (acc << 1) | int(bits[pos])
        pos += 1
        acc_len += 1
        if acc_len > max_len:
            raise CorruptionError("bit pattern matches no codeword")
        if num_at[acc_len]:
            rel = acc - first_code[acc_len]
            if 0 <= rel < num_at[acc_len]:
                out[produced] = syms_in_order[first_idx[acc_len] + rel]
                produced += 1
                acc = 0
                acc_len = 0
    if pos != n_bits:
        raise CorruptionError(f"{n_bits - pos} surplus bits after {count} symbols")
    return out


def encoded_bit_length(histogram: dict[int, int], code: CanonicalCode) -> int:
    """Total bits the histogram's stream takes under the code, without encoding."""
    try:
        return sum(count * code.lengths[sym] for sym, count in histogram.items())
    except KeyError as e:
        raise CodingError(f"symbol {e.args[0]} not present in the code table") from e


def measure_savings(raw_bits_per_symbol: int, stream: BitStream, symbol_count: int) -> float:
    """Fraction of a fixed-width encoding saved by the coded stream."""
    if raw_bits_per_symbol < 1:
        raise ValueError("raw_bits_per_symbol must be >= 1")
    if symbol_count == 0:
        return 0.0
    return 1.0 - stream.bit_count / (symbol_count * raw_bits_per_symbol)
