import itertools
import math

import numpy as np
import pytest

from weightpress import huffman
from weightpress.errors import CodingError, CorruptionError
from weightpress.huffman import (
    BitStream,
    CanonicalCode,
    build_code,
    build_histogram,
    decode,
    encode,
    encoded_bit_length,
    measure_savings,
)


def brute_force_best_length(counts: dict) -> int:
    """Minimum total bits over every valid prefix-code length assignment."""
    syms = sorted(counts)
    n = len(syms)
    if n == 1:
        return counts[syms[0]]  # 1 bit per symbol
    best = math.inf
    for lens in itertools.product(range(1, n), repeat=n):
        if sum(2.0 ** -l for l in lens) <= 1.0 + 1e-12:
            best = min(best, sum(counts[s] * l for s, l in zip(syms, lens)))
    return best


# -------------------------------------------------------------- histogram


def test_histogram_basic():
    assert build_histogram([0, 0, 1]) == {0: 2, 1: 1}


def test_histogram_single():
    assert build_histogram([5, 5, 5]) == {5: 3}


def test_histogram_empty_rejected():
    with pytest.raises(ValueError):
        build_histogram([])


def test_histogram_symbol_range():
    with pytest.raises(ValueError):
        build_histogram([1 << 16])


# ------------------------------------------------------------------ codes


def test_code_lengths_example():
    code = build_code({0: 5, 1: 2, 2: 1, 3: 1})
    assert code.lengths == {0: 1, 1: 2, 2: 3, 3: 3}
    total = encoded_bit_length({0: 5, 1: 2, 2: 1, 3: 1}, code)
    assert total == 15
    assert total == brute_force_best_length({0: 5, 1: 2, 2: 1, 3: 1})


def test_code_equal_counts():
    code = build_code({0: 3, 1: 3, 2: 3, 3: 3})
    assert all(l == 2 for l in code.lengths.values())


def test_code_single_symbol():
    code = build_code({9: 4})
    assert code.lengths == {9: 1}
    stream = encode([9] * 7, code)
    assert stream.bit_count == 7
    assert decode(stream, code, 7).tolist() == [9] * 7


def test_code_optimal_small_alphabets():
    rng = np.random.default_rng(0)
    for n_sym in range(2, 7):
        for _ in range(8):
            counts = {s: int(rng.integers(1, 40)) for s in range(n_sym)}
            code = build_code(counts)
            assert encoded_bit_length(counts, code) == brute_force_best_length(counts)


def test_code_prefix_free():
    rng = np.random.default_rng(1)
    counts = {s: int(rng.integers(1, 1000)) for s in range(17)}
    code = build_code(counts)
    words = [code.bits(s) for s in counts]
    for a, b in itertools.permutations(words, 2):
        assert not b.startswith(a)


def test_code_kraft_equality():
    code = build_code({0: 9, 1: 5, 2: 2, 3: 2, 4: 1})
    assert code.kraft_sum() == pytest.approx(1.0)


def test_code_deterministic_ties():
    counts = {3: 2, 1: 2, 2: 2, 0: 2, 4: 4, 5: 4}
    a = build_code(counts)
    b = build_code(dict(reversed(list(counts.items()))))
    assert a.lengths == b.lengths
    assert a.codewords == b.codewords


# ----------------------------------------------------------- encode/decode


def test_round_trip_ten_thousand_skewed():
    rng = np.random.default_rng(2)
    symbols = rng.geometric(0.3, size=10000) - 1
    symbols = np.minimum(symbols, 30)
    code = build_code(build_histogram(symbols))
    stream = encode(symbols, code)
    assert stream.bit_count == encoded_bit_length(build_histogram(symbols), code)
    assert np.array_equal(decode(stream, code, len(symbols)), symbols)


def test_round_trip_empty():
    code = build_code({0: 1})
    stream = encode([], code)
    assert stream.bit_count == 0
    assert decode(stream, code, 0).size == 0


def test_encode_unknown_symbol():
    code = build_code({0: 1, 1: 1})
    with pytest.raises(CodingError):
        encode([2], code)


def test_decode_wrong_count():
    code = build_code({0: 3, 1: 2, 2: 1})
    stream = encode([0, 1, 2, 0, 1, 2, 0, 0, 1, 2], code)
    with pytest.raises(CorruptionError):
        decode(stream, code, 20)  # too many: runs out of bits
    with pytest.raises(CorruptionError):
        decode(stream, code, 3)  # too few: surplus bits remain


def test_decode_truncated_stream():
    code = build_code({0: 3, 1: 2, 2: 1})
    stream = encode([0, 1, 2] * 10, code)
    cut = BitStream(stream.data[:2], 16)
    with pytest.raises(CorruptionError):
        decode(cut, code, 30)


def test_fixed_width_upper_bound():
    rng = np.random.default_rng(3)
    for _ in range(10):
        n_sym = int(rng.integers(2, 20))
        symbols = rng.integers(0, n_sym, size=500)
        hist = build_histogram(symbols)
        code = build_code(hist)
        assert encoded_bit_length(hist, code) <= 500 * math.ceil(math.log2(len(hist)))


def test_entropy_lower_bound():
    rng = np.random.default_rng(4)
    symbols = rng.integers(0, 8, size=2000)
    hist = build_histogram(symbols)
    code = build_code(hist)
    total = sum(hist.values())
    entropy = -sum(c / total * math.log2(c / total) for c in hist.values())
    assert encoded_bit_length(hist, code) >= entropy * total - 1e-6


def test_bitstream_validation():
    with pytest.raises(ValueError):
        BitStream(b"\xff", 4)  # nonzero pad bits
    with pytest.raises(ValueError):
        BitStream(b"\x00\x00", 3)  # not minimal
    BitStream(b"\xf0", 4)


# ---------------------------------------------------------------- savings


def test_savings_uniform_incompressible():
    symbols = np.tile(np.arange(16), 100)
    code = build_code(build_histogram(symbols))
    stream = encode(symbols, code)
    assert measure_savings(4, stream, len(symbols)) == pytest.approx(0.0)


def test_savings_single_symbol():
    code = build_code({3: 10})
    stream = encode([3] * 10, code)
    assert measure_savings(5, stream, 10) == pytest.approx(0.8)
