"""Compressed-model container: one file format spanning every stage.

Layout (little-endian): magic ``WPCM``, version u16, layer count u16, then
per layer a header (name, shape, stage, nnz, index/weight bit widths)
followed by length-prefixed stage payloads and a CRC32 of the whole layer
record; after the layers, a bias block (biases stay dense) with its own
CRC32.  Payloads by stage:

  dense      raw float32 weights
  pruned     sparse stream (entry count, packed diffs, filler bitmap), values
  quantized  sparse stream, codebook, packed codebook indices
  huffman    codebook, huffman block (filler bitmap + two code tables and
             bitstreams: one for diffs, one for codebook indices)

Code tables are stored as a u16 symbol count plus one length byte per
symbol, from which the canonical codewords are rebuilt.  The filler bitmap
marks which stream entries are gap padding; it is what lets a maximal diff
that happens to be a genuine entry survive the round trip.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import huffman
from .errors import CorruptionError, FormatError
from .nets import RELU, SOFTMAX, LayerSpec, Network
from .pruning import RelativeIndexStream, SparseLayer, decode_relative, encode_relative

MAGIC = b"WPCM"
VERSION = 1

STAGE_DENSE = "dense"
STAGE_PRUNED = "pruned"
STAGE_QUANTIZED = "quantized"
STAGE_HUFFMAN = "huffman"
_STAGE_CODES = {STAGE_DENSE: 0, STAGE_PRUNED: 1, STAGE_QUANTIZED: 2, STAGE_HUFFMAN: 3}
_STAGE_NAMES = {v: k for k, v in _STAGE_CODES.items()}


def pack_bits(values: np.ndarray, width: int) -> bytes:
    """Pack unsigned ints into width-bit fields, MSB-first."""
    values = np.asarray(values, dtype=np.uint64)
    if values.size == 0:
        return b""
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    bits = ((values[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel()).tobytes()


def unpack_bits(data: bytes, width: int, count: int) -> np.ndarray:
    need = (count * width + 7) // 8
    if len(data) < need:
        raise FormatError(f"bit-packed field needs {need} bytes, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=count * width)
    weights = (1 << np.arange(width - 1, -1, -1, dtype=np.int64))
    return bits.reshape(count, width).astype(np.int64) @ weights


def _pack_bitmap(flags: np.ndarray) -> bytes:
    return np.packbits(flags.astype(np.uint8)).tobytes()


def _unpack_bitmap(data: bytes, count: int) -> np.ndarray:
    need = (count + 7) // 8
    if len(data) < need:
        raise FormatError(f"bitmap needs {need} bytes, got {len(data)}")
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=count).astype(bool)


def index_bit_width(k: int) -> int:
    """Fixed-width bits per codebook index; a 1-entry codebook still costs a bit."""
    return max(1, int(np.ceil(np.log2(k))))


@dataclass
class LayerRecord:
    name: str
    shape: tuple[int, int]
    stage: str
    index_bits: int  # diff bit width (0 when dense)
    weight_bits: int  # codebook index bit width (0 before quantization)
    nnz: int
    dense_weights: np.ndarray | None = None
    stream: RelativeIndexStream | None = None
    codebook: np.ndarray | None = None
    indices: np.ndarray | None = None  # (nnz,) int32, one per genuine entry

    def __post_init__(self):
        if self.stage not in _STAGE_CODES:
            raise ValueError(f"unknown stage {self.stage!r}")
        by_stage = {
            STAGE_DENSE: (True, False, False, False),
            STAGE_PRUNED: (False, True, False, False),
            STAGE_QUANTIZED: (False, True, True, True),
            STAGE_HUFFMAN: (False, True, True, True),
        }
        want_dense, want_stream, want_cb, want_idx = by_stage[self.stage]
        have = (
            self.dense_weights is not None,
            self.stream is not None,
            self.codebook is not None,
            self.indices is not None,
        )
        if have != (want_dense, want_stream, want_cb, want_idx):
            raise ValueError(f"payloads do not match stage {self.stage}")
        if self.stream is not None:
            if self.stream.logical_length != self.shape[0] * self.shape[1]:
                raise ValueError("stream does not cover the layer shape")
            if self.nnz != self.stream.entry_count - self.stream.filler_count:
                raise ValueError("nnz disagrees with the stream")
        if self.indices is not None:
            if len(self.indices) != self.nnz:
                raise ValueError("need one codebook index per genuine entry")
            if self.nnz and self.indices.max() >= len(self.codebook):
                raise ValueError("codebook index out of range")

    def __eq__(self, other):
        if not isinstance(other, LayerRecord):
            return NotImplemented

        def arr_eq(a, b):
            if a is None or b is None:
                return a is b
            return a.dtype == b.dtype and np.array_equal(a, b)

        stream_eq = self.stream is other.stream or (
            self.stream is not None
            and other.stream is not None
            and self.stream.bits_per_index == other.stream.bits_per_index
            and self.stream.logical_length == other.stream.logical_length
            and np.array_equal(self.stream.diffs, other.stream.diffs)
            and np.array_equal(self.stream.values, other.stream.values)
            and np.array_equal(self.stream.fillers, other.stream.fillers)
        )
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.stage == other.stage
            and self.index_bits == other.index_bits
            and self.weight_bits == other.weight_bits
            and self.nnz == other.nnz
            and arr_eq(self.dense_weights, other.dense_weights)
            and stream_eq
            and arr_eq(self.codebook, other.codebook)
            and arr_eq(self.indices, other.indices)
        )


@dataclass
class CompressedModel:
    layers: list[LayerRecord]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.layers) != len(self.biases):
            raise ValueError("need one bias array per layer")

    def __eq__(self, other):
        if not isinstance(other, CompressedModel):
            return NotImplemented
        return self.layers == other.layers and all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in zip(self.biases, other.biases)
        )


# ---------------------------------------------------------------- builders


def build_dense_model(net: Network, names: list[str] | None = None) -> CompressedModel:
    names = names or [f"fc{i + 1}" for i in range(len(net.layers))]
    records = [
        LayerRecord(
            name=name,
            shape=layer.weights.shape,
            stage=STAGE_DENSE,
            index_bits=0,
            weight_bits=0,
            nnz=layer.weights.size,
            dense_weights=layer.weights.astype(np.float32).copy(),
        )
        for name, layer in zip(names, net.layers)
    ]
    biases = [layer.bias.astype(np.float32).copy() for layer in net.layers]
    return CompressedModel(records, biases)


def build_pruned_model(
    net: Network, masks: list[np.ndarray], index_bits: int, names: list[str] | None = None
) -> CompressedModel:
    names = names or [f"fc{i + 1}" for i in range(len(net.layers))]
    records = []
    for name, layer, mask in zip(names, net.layers, masks):
        sparse = encode_relative(layer.weights, mask, index_bits)
        records.append(
            LayerRecord(
                name=name,
                shape=layer.weights.shape,
                stage=STAGE_PRUNED,
                index_bits=index_bits,
                weight_bits=0,
                nnz=sparse.nnz,
                stream=sparse.stream,
            )
        )
    biases = [layer.bias.astype(np.float32).copy() for layer in net.layers]
    return CompressedModel(records, biases)


def quantize_record(
    record: LayerRecord, codebook: np.ndarray, assignment: np.ndarray
) -> LayerRecord:
    """Pruned record plus a codebook: values become codebook lookups."""
    if record.stage != STAGE_PRUNED:
        raise ValueError("can only quantize a pruned record")
    codebook = codebook.astype(np.float32)
    assignment = assignment.astype(np.int32)
    values = np.zeros(record.stream.entry_count, dtype=np.float32)
    values[~record.stream.fillers] = codebook[assignment]
    stream = RelativeIndexStream(
        record.stream.bits_per_index,
        record.stream.diffs,
        values,
        record.stream.fillers,
        record.stream.logical_length,
    )
    return LayerRecord(
        name=record.name,
        shape=record.shape,
        stage=STAGE_QUANTIZED,
        index_bits=record.index_bits,
        weight_bits=index_bit_width(len(codebook)),
        nnz=record.nnz,
        stream=stream,
        codebook=codebook,
        indices=assignment,
    )


def build_quantized_model(
    pruned: CompressedModel, codebooks: list[np.ndarray], assignments: list[np.ndarray]
) -> CompressedModel:
    records = [
        quantize_record(rec, cb, asg)
        for rec, cb, asg in zip(pruned.layers, codebooks, assignments)
    ]
    return CompressedModel(records, [b.copy() for b in pruned.biases])


def promote_to_huffman(model: CompressedModel) -> CompressedModel:
    """Same payloads, entropy-coded on disk.  Lossless by construction."""
    records = []
    for rec in model.layers:
        if rec.stage != STAGE_QUANTIZED:
            raise ValueError("can only huffman-code a quantized record")
        records.append(
            LayerRecord(
                name=rec.name,
                shape=rec.shape,
                stage=STAGE_HUFFMAN,
                index_bits=rec.index_bits,
                weight_bits=rec.weight_bits,
                nnz=rec.nnz,
                stream=rec.stream,
                codebook=rec.codebook,
                indices=rec.indices,
            )
        )
    return CompressedModel(records, [b.copy() for b in model.biases])


def reconstruct_dense(record: LayerRecord) -> np.ndarray:
    """Dense float32 weights for a record at any stage."""
    if record.stage == STAGE_DENSE:
        return record.dense_weights.copy()
    if record.stage == STAGE_PRUNED:
        return decode_relative(SparseLayer(record.shape, record.stream, record.nnz))
    values = np.zeros(record.stream.entry_count, dtype=np.float32)
    if record.nnz and record.indices.max() >= len(record.codebook):
        raise CorruptionError(f"layer {record.name}: codebook index out of range")
    values[~record.stream.fillers] = record.codebook[record.indices]
    stream = RelativeIndexStream(
        record.stream.bits_per_index,
        record.stream.diffs,
        values,
        record.stream.fillers,
        record.stream.logical_length,
    )
    return decode_relative(SparseLayer(record.shape, stream, record.nnz))


def model_to_network(model: CompressedModel) -> Network:
    """Reconstructed dense network; the last layer is the softmax output."""
    layers = []
    for i, (rec, bias) in enumerate(zip(model.layers, model.biases)):
        act = SOFTMAX if i == len(model.layers) - 1 else RELU
        layers.append(LayerSpec(reconstruct_dense(rec), bias.copy(), act))
    return Network(layers)


# ------------------------------------------------------------- payload packers


def _sparse_payload(stream: RelativeIndexStream) -> bytes:
    parts = [struct.pack("<I", stream.entry_count)]
    parts.append(pack_bits(stream.diffs, stream.bits_per_index))
    parts.append(_pack_bitmap(stream.fillers))
    return b"".join(parts)


def _values_payload(stream: RelativeIndexStream) -> bytes:
    return np.ascontiguousarray(stream.values[~stream.fillers], dtype="<f4").tobytes()


def _codebook_payload(codebook: np.ndarray) -> bytes:
    return struct.pack("<H", len(codebook)) + np.ascontiguousarray(
        codebook, dtype="<f4"
    ).tobytes()


def _index_payload(indices: np.ndarray, weight_bits: int) -> bytes:
    return pack_bits(indices, weight_bits)


def _code_table_bytes(code: huffman.CanonicalCode) -> bytes:
    n = max(code.lengths) + 1
    lens = bytearray(n)
    for sym, ln in code.lengths.items():
        lens[sym] = ln
    return struct.pack("<H", n) + bytes(lens)


def _code_table_parse(data: bytes, offset: int) -> tuple[huffman.CanonicalCode, int]:
    if offset + 2 > len(data):
        raise FormatError("truncated code table")
    (n,) = struct.unpack_from("<H", data, offset)
    offset += 2
    if offset + n > len(data):
        raise FormatError("truncated code table lengths")
    lengths = {sym: data[offset + sym] for sym in range(n) if data[offset + sym]}
    if not lengths:
        raise FormatError("code table has no symbols")
    return huffman.CanonicalCode(lengths), offset + n


def layer_codes(record: LayerRecord) -> tuple[huffman.CanonicalCode, huffman.CanonicalCode]:
    """Canonical codes for the diff stream and the codebook-index stream."""
    diff_code = huffman.build_code(huffman.build_histogram(record.stream.diffs))
    index_code = huffman.build_code(huffman.build_histogram(record.indices))
    return diff_code, index_code


def _huffman_payload(record: LayerRecord) -> bytes:
    stream = record.stream
    diff_code, index_code = layer_codes(record)
    diff_bits = huffman.encode(stream.diffs, diff_code)
    index_bits = huffman.encode(record.indices, index_code)
    parts = [struct.pack("<I", stream.entry_count)]
    parts.append(_pack_bitmap(stream.fillers))
    parts.append(_code_table_bytes(diff_code))
    parts.append(struct.pack("<I", diff_bits.bit_count) + diff_bits.data)
    parts.append(_code_table_bytes(index_code))
    parts.append(struct.pack("<I", index_bits.bit_count) + index_bits.data)
    return b"".join(parts)


def _layer_payloads(record: LayerRecord) -> list[bytes]:
    if record.stage == STAGE_DENSE:
        return [np.ascontiguousarray(record.dense_weights, dtype="<f4").tobytes()]
    if record.stage == STAGE_PRUNED:
        return [_sparse_payload(record.stream), _values_payload(record.stream)]
    if record.stage == STAGE_QUANTIZED:
        return [
            _sparse_payload(record.stream),
            _codebook_payload(record.codebook),
            _index_payload(record.indices, record.weight_bits),
        ]
    return [_codebook_payload(record.codebook), _huffman_payload(record)]


def serialize(model: CompressedModel) -> bytes:
    out = [MAGIC, struct.pack("<HH", VERSION, len(model.layers))]
    for rec in model.layers:
        name = rec.name.encode()
        if len(name) > 255:
            raise ValueError(f"layer name too long: {rec.name!r}")
        blob = [
            struct.pack("<B", len(name)),
            name,
            struct.pack(
                "<IIBIBB",
                rec.shape[0],
                rec.shape[1],
                _STAGE_CODES[rec.stage],
                rec.nnz,
                rec.index_bits,
                rec.weight_bits,
            ),
        ]
        for payload in _layer_payloads(rec):
            blob.append(struct.pack("<I", len(payload)))
            blob.append(payload)
        blob = b"".join(blob)
        out.append(blob)
        out.append(struct.pack("<I", zlib.crc32(blob)))
    bias_blob = b"".join(
        struct.pack("<I", len(b)) + np.ascontiguousarray(b, dtype="<f4").tobytes()
        for b in model.biases
    )
    out.append(bias_blob)
    out.append(struct.pack("<I", zlib.crc32(bias_blob)))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _parse_sparse_payload(
    payload: bytes, index_bits: int, logical_length: int, where: str
) -> tuple[np.ndarray, np.ndarray, int]:
    if len(payload) < 4:
        raise FormatError(f"{where}: truncated sparse stream")
    (entry_count,) = struct.unpack_from("<I", payload, 0)
    diff_bytes = (entry_count * index_bits + 7) // 8
    bitmap_bytes = (entry_count + 7) // 8
    if len(payload) != 4 + diff_bytes + bitmap_bytes:
        raise FormatError(f"{where}: sparse stream length mismatch")
    diffs = unpack_bits(payload[4 : 4 + diff_bytes], index_bits, entry_count)
    fillers = _unpack_bitmap(payload[4 + diff_bytes :], entry_count)
    return diffs.astype(np.uint16), fillers, entry_count


def _validate_stream(stream: RelativeIndexStream, where: str) -> None:
    if stream.entry_count == 0:
        return
    pos = stream.positions()
    if pos[-1] >= stream.logical_length:
        raise CorruptionError(f"{where}: decoded position outside the layer")


def deserialize(data: bytes) -> CompressedModel:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"bad magic, expected {MAGIC!r}")
    version = r.u16("version")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    n_layers = r.u16("layer count")

    records = []
    for li in range(n_layers):
        blob_start = r.pos
        name_len = r.u8("layer name length")
        name = r.take(name_len, "layer name").decode()
        where = f"layer {name or li}"
        rows = r.u32(f"{where} rows")
        cols = r.u32(f"{where} cols")
        stage_code = r.u8(f"{where} stage")
        if stage_code not in _STAGE_NAMES:
            raise FormatError(f"{where}: unknown stage code {stage_code}")
        stage = _STAGE_NAMES[stage_code]
        nnz = r.u32(f"{where} nnz")
        index_bits = r.u8(f"{where} index bits")
        weight_bits = r.u8(f"{where} weight bits")

        n_payloads = {STAGE_DENSE: 1, STAGE_PRUNED: 2, STAGE_QUANTIZED: 3, STAGE_HUFFMAN: 2}
        payloads = []
        for _ in range(n_payloads[stage]):
            plen = r.u32(f"{where} payload length")
            payloads.append(r.take(plen, f"{where} payload"))
        blob = data[blob_start : r.pos]
        crc = r.u32(f"{where} checksum")
        if crc != zlib.crc32(blob):
            raise CorruptionError(f"{where}: checksum mismatch")

        try:
            records.append(
                _parse_record(name, (rows, cols), stage, nnz, index_bits, weight_bits, payloads, where)
            )
        except (ValueError, IndexError) as e:
            if isinstance(e, (FormatError, CorruptionError)):
                raise
            raise CorruptionError(f"{where}: {e}") from e

    bias_start = r.pos
    biases = []
    for li in range(n_layers):
        n = r.u32(f"bias {li} length")
        biases.append(
            np.frombuffer(r.take(4 * n, f"bias {li} data"), dtype="<f4").copy()
        )
    bias_blob = data[bias_start : r.pos]
    crc = r.u32("bias checksum")
    if crc != zlib.crc32(bias_blob):
        raise CorruptionError("bias block: checksum mismatch")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after bias block")
    return CompressedModel(records, biases)


def _parse_record(name, shape, stage, nnz, index_bits, weight_bits, payloads, where):
    rows, cols = shape
    logical = rows * cols
    if stage == STAGE_DENSE:
        if len(payloads[0]) != 4 * logical:
            raise FormatError(f"{where}: dense payload length mismatch")
        w = np.frombuffer(payloads[0], dtype="<f4").reshape(rows, cols).copy()
        return LayerRecord(name, shape, stage, 0, 0, nnz, dense_weights=w)

    if stage == STAGE_PRUNED:
        diffs, fillers, entries = _parse_sparse_payload(payloads[0], index_bits, logical, where)
        if len(payloads[1]) != 4 * nnz:
            raise FormatError(f"{where}: value payload length mismatch")
        genuine = np.frombuffer(payloads[1], dtype="<f4")
        if entries - int(fillers.sum()) != nnz:
            raise CorruptionError(f"{where}: nnz disagrees with filler bitmap")
        values = np.zeros(entries, dtype=np.float32)
        values[~fillers] = genuine
        stream = RelativeIndexStream(index_bits, diffs, values, fillers, logical)
        _validate_stream(stream, where)
        return LayerRecord(name, shape, stage, index_bits, 0, nnz, stream=stream)

    if stage == STAGE_QUANTIZED:
        diffs, fillers, entries = _parse_sparse_payload(payloads[0], index_bits, logical, where)
        codebook, indices = _parse_codebook_indices(payloads[1], payloads[2], nnz, weight_bits, where)
    else:  # huffman
        codebook = _parse_codebook(payloads[0], where)
        diffs, fillers, entries, indices = _parse_huffman_payload(
            payloads[1], index_bits, nnz, where
        )

    if entries - int(fillers.sum()) != nnz:
        raise CorruptionError(f"{where}: nnz disagrees with filler bitmap")
    if nnz and indices.max() >= len(codebook):
        raise CorruptionError(f"{where}: codebook index out of range")
    values = np.zeros(entries, dtype=np.float32)
    values[~fillers] = codebook[indices]
    stream = RelativeIndexStream(index_bits, diffs, values, fillers, logical)
    _validate_stream(stream, where)
    return LayerRecord(
        name, shape, stage, index_bits, weight_bits, nnz,
        stream=stream, codebook=codebook, indices=indices,
    )


def _parse_codebook(payload: bytes, where: str) -> np.ndarray:
    if len(payload) < 2:
        raise FormatError(f"{where}: truncated codebook")
    (k,) = struct.unpack_from("<H", payload, 0)
    if len(payload) != 2 + 4 * k:
        raise FormatError(f"{where}: codebook length mismatch")
    return np.frombuffer(payload, dtype="<f4", offset=2).copy()


def _parse_codebook_indices(cb_payload, idx_payload, nnz, weight_bits, where):
    codebook = _parse_codebook(cb_payload, where)
    if len(idx_payload) != (nnz * weight_bits + 7) // 8:
        raise FormatError(f"{where}: index payload length mismatch")
    indices = unpack_bits(idx_payload, weight_bits, nnz).astype(np.int32)
    return codebook, indices


def _parse_huffman_payload(payload, index_bits, nnz, where):
    if len(payload) < 4:
        raise FormatError(f"{where}: truncated huffman block")
    (entries,) = struct.unpack_from("<I", payload, 0)
    off = 4
    bitmap_bytes = (entries + 7) // 8
    fillers = _unpack_bitmap(payload[off : off + bitmap_bytes], entries)
    off += bitmap_bytes
    diff_code, off = _code_table_parse(payload, off)
    if off + 4 > len(payload):
        raise FormatError(f"{where}: truncated diff bitstream")
    (nbits,) = struct.unpack_from("<I", payload, off)
    off += 4
    nbytes = (nbits + 7) // 8
    diff_stream = huffman.BitStream(payload[off : off + nbytes], nbits)
    off += nbytes
    index_code, off = _code_table_parse(payload, off)
    if off + 4 > len(payload):
        raise FormatError(f"{where}: truncated index bitstream")
    (nbits,) = struct.unpack_from("<I", payload, off)
    off += 4
    nbytes = (nbits + 7) // 8
    index_stream = huffman.BitStream(payload[off : off + nbytes], nbits)
    off += nbytes
    if off != len(payload):
        raise FormatError(f"{where}: huffman block length mismatch")
    diffs = huffman.decode(diff_stream, diff_code, entries).astype(np.uint16)
    indices = huffman.decode(index_stream, index_code, nnz).astype(np.int32)
    return diffs, fillers, entries, indices
