"""Per-layer storage accounting for compressed models.

Sizes are taken from the same packers that write the container, so the
report is conserved against the file by construction.  Two representation
points are reported per layer: fixed-width streams after pruning plus
quantization (P+Q), and entropy-coded streams (P+Q+H) including their code
tables.  Stages a model has not reached are left blank.
"""

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from . import container as ct
from . import huffman


@dataclass
class LayerStats:
    name: str
    n_weights: int
    nnz: int
    entry_count: int | None = None
    filler_count: int | None = None
    density_pct: float | None = None
    weight_bits_pq: float | None = None
    weight_bits_pqh: float | None = None
    index_bits_pq: float | None = None
    index_bits_pqh: float | None = None
    pq_bits: int | None = None
    pqh_bits: int | None = None
    original_bits: int = 0

    @property
    def rate_pq_pct(self) -> float | None:
        return None if self.pq_bits is None else 100.0 * self.pq_bits / self.original_bits

    @property
    def rate_pqh_pct(self) -> float | None:
        return None if self.pqh_bits is None else 100.0 * self.pqh_bits / self.original_bits


@dataclass
class StatsReport:
    rows: list[LayerStats]
    totals: LayerStats
    breakdown: dict = field(default_factory=dict)  # bits by component, final stage
    file_bytes: int = 0

    @property
    def pq_ratio(self) -> float | None:
        if self.totals.pq_bits in (None, 0):
            return None
        return self.totals.original_bits / self.totals.pq_bits

    @property
    def pqh_ratio(self) -> float | None:
        if self.totals.pqh_bits in (None, 0):
            return None
        return self.totals.original_bits / self.totals.pqh_bits


def _huffman_component_bits(rec: ct.LayerRecord) -> dict:
    """Bit sizes of the entropy-coded block, split by component."""
    diff_code, index_code = ct.layer_codes(rec)
    diff_hist = huffman.build_histogram(rec.stream.diffs)
    index_hist = huffman.build_histogram(rec.indices)
    diff_enc = huffman.encoded_bit_length(diff_hist, diff_code)
    index_enc = huffman.encoded_bit_length(index_hist, index_code)
    comp = {
        "entry_count_field": 32,
        "filler_bitmap": 8 * ((rec.stream.entry_count + 7) // 8),
        "diff_table": 8 * len(ct._code_table_bytes(diff_code)),
        "diff_stream": 32 + 8 * ((diff_enc + 7) // 8),
        "index_table": 8 * len(ct._code_table_bytes(index_code)),
        "index_stream": 32 + 8 * ((index_enc + 7) // 8),
        "diff_stream_raw": diff_enc,
        "index_stream_raw": index_enc,
    }
    stored = (
        comp["entry_count_field"]
        + comp["filler_bitmap"]
        + comp["diff_table"]
        + comp["diff_stream"]
        + comp["index_table"]
        + comp["index_stream"]
    )
    assert stored == 8 * len(ct._huffman_payload(rec)), "huffman accounting drifted"
    comp["total"] = stored
    return comp


def layer_stats(rec: ct.LayerRecord, original_bits_per_weight: int = 32) -> LayerStats:
    n = rec.shape[0] * rec.shape[1]
    row = LayerStats(
        name=rec.name,
        n_weights=n,
        nnz=rec.nnz,
        original_bits=n * original_bits_per_weight,
    )
    if rec.stage == ct.STAGE_DENSE:
        return row

    row.entry_count = rec.stream.entry_count
    row.filler_count = rec.stream.filler_count
    row.density_pct = 100.0 * rec.nnz / n
    row.index_bits_pq = float(rec.index_bits)
    if rec.stage == ct.STAGE_PRUNED:
        return row

    sparse_bits = 8 * len(ct._sparse_payload(rec.stream))
    codebook_bits = 8 * len(ct._codebook_payload(rec.codebook))
    index_stream_bits = 8 * len(ct._index_payload(rec.indices, rec.weight_bits))
    row.weight_bits_pq = float(rec.weight_bits)
    row.pq_bits = sparse_bits + codebook_bits + index_stream_bits

    if rec.stage == ct.STAGE_HUFFMAN:
        comp = _huffman_component_bits(rec)
        row.pqh_bits = codebook_bits + comp["total"]
        row.weight_bits_pqh = comp["index_stream_raw"] / rec.nnz if rec.nnz else 0.0
        row.index_bits_pqh = (
            comp["diff_stream_raw"] / rec.stream.entry_count if rec.stream.entry_count else 0.0
        )
    return row


def compute_stats(model: ct.CompressedModel, original_bits_per_weight: int = 32) -> StatsReport:
    rows = [layer_stats(rec, original_bits_per_weight) for rec in model.layers]

    def total_of(attr):
        vals = [getattr(r, attr) for r in rows]
        return None if any(v is None for v in vals) else sum(vals)

    totals = LayerStats(
        name="total",
        n_weights=sum(r.n_weights for r in rows),
        nnz=sum(r.nnz for r in rows),
        entry_count=total_of("entry_count"),
        filler_count=total_of("filler_count"),
        original_bits=sum(r.original_bits for r in rows),
        pq_bits=total_of("pq_bits"),
        pqh_bits=total_of("pqh_bits"),
    )
    if all(r.density_pct is not None for r in rows):
        totals.density_pct = 100.0 * totals.nnz / totals.n_weights
    if all(r.weight_bits_pq is not None for r in rows):
        totals.weight_bits_pq = sum(r.weight_bits_pq * r.nnz for r in rows) / totals.nnz
        totals.index_bits_pq = (
            sum(r.index_bits_pq * r.entry_count for r in rows) / totals.entry_count
        )
    if all(r.weight_bits_pqh is not None for r in rows):
        totals.weight_bits_pqh = sum(r.weight_bits_pqh * r.nnz for r in rows) / totals.nnz
        totals.index_bits_pqh = (
            sum(r.index_bits_pqh * r.entry_count for r in rows) / totals.entry_count
        )

    return StatsReport(
        rows=rows,
        totals=totals,
        breakdown=storage_breakdown(model),
        file_bytes=len(ct.serialize(model)),
    )


def storage_breakdown(model: ct.CompressedModel) -> dict:
    """Bits spent on weights vs sparse indexing vs codebooks, final stage."""
    weight = index = codebook = 0
    for rec in model.layers:
        if rec.stage == ct.STAGE_DENSE:
            weight += 8 * 4 * rec.shape[0] * rec.shape[1]
        elif rec.stage == ct.STAGE_PRUNED:
            index += 8 * len(ct._sparse_payload(rec.stream))
            weight += 8 * len(ct._values_payload(rec.stream))
        elif rec.stage == ct.STAGE_QUANTIZED:
            index += 8 * len(ct._sparse_payload(rec.stream))
            weight += 8 * len(ct._index_payload(rec.indices, rec.weight_bits))
            codebook += 8 * len(ct._codebook_payload(rec.codebook))
        else:
            comp = _huffman_component_bits(rec)
            index += (
                comp["entry_count_field"]
                + comp["filler_bitmap"]
                + comp["diff_table"]
                + comp["diff_stream"]
            )
            weight += comp["index_table"] + comp["index_stream"]
            codebook += 8 * len(ct._codebook_payload(rec.codebook))
    total = weight + index + codebook
    shares = {}
    if total:
        shares = {
            "weight_share": weight / total,
            "index_share": index / total,
            "codebook_share": codebook / total,
        }
    return {"weight_bits": weight, "index_bits": index, "codebook_bits": codebook, **shares}


def huffman_savings(model: ct.CompressedModel) -> float:
    """Fraction of fixed-width stream bits saved by entropy coding, all layers."""
    fixed = coded = 0
    for rec in model.layers:
        if rec.stage not in (ct.STAGE_QUANTIZED, ct.STAGE_HUFFMAN):
            raise ValueError("huffman savings need quantized streams")
        comp = _huffman_component_bits(rec)
        fixed += rec.stream.entry_count * rec.index_bits + rec.nnz * rec.weight_bits
        coded += comp["diff_stream_raw"] + comp["index_stream_raw"]
    return 1.0 - coded / fixed


def file_compression_ratio(dense: ct.CompressedModel, staged: ct.CompressedModel) -> float:
    """Whole-container size ratio, headers, biases and tables included."""
    return len(ct.serialize(dense)) / len(ct.serialize(staged))


_CSV_COLUMNS = [
    "layer",
    "weights",
    "weights_pct_pruned",
    "weight_bits_pq",
    "weight_bits_pqh",
    "index_bits_pq",
    "index_bits_pqh",
    "compress_rate_pq_pct",
    "compress_rate_pqh_pct",
]


def _csv_row(r: LayerStats) -> list:
    def fmt(v, nd=2):
        return "" if v is None else f"{v:.{nd}f}"

    return [
        r.name,
        r.n_weights,
        fmt(r.density_pct),
        fmt(r.weight_bits_pq, 0),
        fmt(r.weight_bits_pqh),
        fmt(r.index_bits_pq, 0),
        fmt(r.index_bits_pqh),
        fmt(r.rate_pq_pct),
        fmt(r.rate_pqh_pct),
    ]


def write_stats_csv(report: StatsReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_CSV_COLUMNS)
        for r in report.rows:
            w.writerow(_csv_row(r))
        w.writerow(_csv_row(report.totals))


def format_stats(report: StatsReport) -> str:
    lines = [" | ".join(_CSV_COLUMNS)]
    for r in report.rows + [report.totals]:
        lines.append(" | ".join(str(c) for c in _csv_row(r)))
    if report.pq_ratio:
        lines.append(f"P+Q ratio vs 32-bit dense: {report.pq_ratio:.1f}x")
    if report.pqh_ratio:
        lines.append(f"P+Q+H ratio vs 32-bit dense: {report.pqh_ratio:.1f}x")
    bd = report.breakdown
    if bd.get("weight_share") is not None:
        lines.append(
            "storage shares: weight {weight_share:.1%}, index {index_share:.1%}, "
            "codebook {codebook_share:.1%}".format(**bd)
        )
    return "\n".join(lines)
