import numpy as np
import pytest

from weightpress import container as ct
from weightpress import nets, stats
from weightpress.errors import CorruptionError, FormatError
from weightpress.pruning import compute_threshold, encode_relative, prune
from weightpress.quantize import QuantConfig, quantize_layer


def small_net(seed=0, dims=(12, 9, 4)):
    return nets.init_network(list(dims), seed=seed)


def staged_models(seed=0, dims=(12, 9, 4), density=0.4, bits=4, index_bits=3):
    net = small_net(seed, dims)
    masks = [prune(l.weights, compute_threshold(l.weights, density)) for l in net.layers]
    dense = ct.build_dense_model(net)
    pruned = ct.build_pruned_model(net, masks, index_bits)
    codebooks, assignments = [], []
    for layer, mask in zip(net.layers, masks):
        sl = encode_relative(layer.weights, mask, index_bits)
        cb, asg = quantize_layer(sl, QuantConfig(bits=bits, init_method="linear"))
        codebooks.append(cb)
        assignments.append(asg)
    quantized = ct.build_quantized_model(pruned, codebooks, assignments)
    huff = ct.promote_to_huffman(quantized)
    return net, masks, dense, pruned, quantized, huff


# ------------------------------------------------------------- round trips


@pytest.mark.parametrize("stage_idx", [2, 3, 4, 5])
def test_round_trip_each_stage(stage_idx):
    model = staged_models()[stage_idx]
    data = ct.serialize(model)
    back = ct.deserialize(data)
    assert back == model
    assert ct.serialize(back) == data  # byte-identical re-serialization


def test_round_trip_empty_model():
    model = ct.CompressedModel([], [])
    data = ct.serialize(model)
    assert ct.deserialize(data) == model


def test_corrupt_any_payload_byte_is_located():
    model = staged_models()[4]
    data = bytearray(ct.serialize(model))
    # flip a byte inside the first layer's payload area
    data[60] ^= 0xFF
    with pytest.raises((CorruptionError, FormatError)) as exc:
        ct.deserialize(bytes(data))
    assert "layer" in str(exc.value) or "truncated" in str(exc.value)


def test_corrupt_bias_block():
    model = staged_models()[2]
    data = bytearray(ct.serialize(model))
    data[-6] ^= 0x01  # inside bias payload, before its crc
    with pytest.raises(CorruptionError, match="bias"):
        ct.deserialize(bytes(data))


def test_bad_magic():
    with pytest.raises(FormatError, match="magic"):
        ct.deserialize(b"NOPE" + b"\x00" * 10)


def test_unknown_version():
    model = staged_models()[2]
    data = bytearray(ct.serialize(model))
    data[4] = 99
    with pytest.raises(FormatError, match="version"):
        ct.deserialize(bytes(data))


def test_truncation():
    model = staged_models()[2]
    data = ct.serialize(model)
    with pytest.raises(FormatError, match="truncated"):
        ct.deserialize(data[: len(data) // 2])


# ------------------------------------------------------------ reconstruct


def test_reconstruct_dense_identity():
    net = small_net()
    model = ct.build_dense_model(net)
    for rec, layer in zip(model.layers, net.layers):
        assert np.array_equal(ct.reconstruct_dense(rec), layer.weights)


def test_reconstruct_pruned_equals_masked():
    net, masks, _, pruned, _, _ = staged_models()
    for rec, layer, mask in zip(pruned.layers, net.layers, masks):
        assert np.array_equal(ct.reconstruct_dense(rec), layer.weights * mask)


def test_reconstruct_quantized_composes_stage_oracles():
    # prune then quantize: every kept value becomes its centroid, exactly
    net, masks, _, _, quantized, _ = staged_models()
    for rec, layer, mask in zip(quantized.layers, net.layers, masks):
        recon = ct.reconstruct_dense(rec)
        expected = np.zeros_like(layer.weights)
        expected[mask != 0] = rec.codebook[rec.indices]
        assert np.array_equal(recon, expected)
        assert np.all(recon[mask == 0] == 0.0)


def test_huffman_reconstructs_identically_to_quantized():
    _, _, _, _, quantized, huff = staged_models()
    for q, h in zip(quantized.layers, huff.layers):
        assert np.array_equal(ct.reconstruct_dense(q), ct.reconstruct_dense(h))


def test_huffman_file_round_trip_preserves_reconstruction():
    _, _, _, _, quantized, huff = staged_models()
    back = ct.deserialize(ct.serialize(huff))
    for q, h in zip(quantized.layers, back.layers):
        assert np.array_equal(ct.reconstruct_dense(q), ct.reconstruct_dense(h))


def test_model_to_network_runs():
    net, _, dense, _, _, _ = staged_models()
    rebuilt = ct.model_to_network(dense)
    x = np.random.default_rng(0).random((3, net.layers[0].in_dim), dtype=np.float32)
    assert np.array_equal(nets.forward(rebuilt, x)[-1], nets.forward(net, x)[-1])


def test_out_of_range_codebook_index_detected():
    _, _, _, _, quantized, _ = staged_models()
    rec = quantized.layers[0]
    bad = ct.LayerRecord(
        name=rec.name, shape=rec.shape, stage=rec.stage, index_bits=rec.index_bits,
        weight_bits=rec.weight_bits, nnz=rec.nnz, stream=rec.stream,
        codebook=rec.codebook, indices=rec.indices.copy(),
    )
    bad.indices[0] = len(rec.codebook) + 3
    with pytest.raises((CorruptionError, ValueError)):
        ct.reconstruct_dense(bad)


# ------------------------------------------------------------------ stats


def test_stats_quantized_payload_components():
    # 4x4 dense layer, k=4: index stream is 16 x 2 bits, codebook 4 floats
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 4)).astype(np.float32)
    net = nets.Network([nets.LayerSpec(w, np.zeros(4, dtype=np.float32), nets.SOFTMAX)])
    mask = [np.ones_like(w)]
    pruned = ct.build_pruned_model(net, mask, 5)
    sl = encode_relative(w, mask[0], 5)
    cb, asg = quantize_layer(sl, QuantConfig(bits=2, init_method="linear"))
    model = ct.build_quantized_model(pruned, [cb], [asg])
    rec = model.layers[0]
    assert 8 * len(ct._index_payload(rec.indices, rec.weight_bits)) == 16 * 2
    assert 8 * len(ct._codebook_payload(rec.codebook)) == 16 + 4 * 32  # u16 count + floats
    row = stats.layer_stats(rec)
    assert row.weight_bits_pq == 2
    assert row.pq_bits == 8 * sum(len(p) for p in ct._layer_payloads(rec))


def test_stats_blank_columns_by_stage():
    _, _, dense, pruned, quantized, huff = staged_models()
    for model, has_pq, has_pqh in (
        (dense, False, False), (pruned, False, False),
        (quantized, True, False), (huff, True, True),
    ):
        report = stats.compute_stats(model)
        assert (report.totals.pq_bits is not None) == has_pq
        assert (report.totals.pqh_bits is not None) == has_pqh


def test_stats_accounting_matches_serialized_payloads():
    _, _, _, _, quantized, huff = staged_models()
    for model in (quantized, huff):
        report = stats.compute_stats(model)
        for rec, row in zip(model.layers, report.rows):
            actual = 8 * sum(len(p) for p in ct._layer_payloads(rec))
            expected = row.pq_bits if rec.stage == ct.STAGE_QUANTIZED else row.pqh_bits
            assert expected == actual


def test_stats_csv_columns(tmp_path):
    _, _, _, _, _, huff = staged_models()
    report = stats.compute_stats(huff)
    path = tmp_path / "stats.csv"
    stats.write_stats_csv(report, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",") == [
        "layer", "weights", "weights_pct_pruned", "weight_bits_pq", "weight_bits_pqh",
        "index_bits_pq", "index_bits_pqh", "compress_rate_pq_pct", "compress_rate_pqh_pct",
    ]
    assert len(lines) == 1 + len(huff.layers) + 1  # header + layers + totals
    assert lines[-1].startswith("total,")


def test_breakdown_shares_sum_to_one():
    _, _, _, _, _, huff = staged_models()
    bd = stats.storage_breakdown(huff)
    assert bd["weight_share"] + bd["index_share"] + bd["codebook_share"] == pytest.approx(1.0)


def test_huffman_savings_in_meaningful_range():
    # skewed values cluster unevenly, so the index stream must compress
    rng = np.random.default_rng(1)
    w = (rng.normal(size=(40, 50)) ** 3).astype(np.float32)
    net = nets.Network([nets.LayerSpec(w, np.zeros(40, dtype=np.float32), nets.SOFTMAX)])
    mask = [prune(w, compute_threshold(w, 0.2))]
    pruned = ct.build_pruned_model(net, mask, 5)
    sl = encode_relative(w, mask[0], 5)
    cb, asg = quantize_layer(sl, QuantConfig(bits=5, init_method="linear"))
    model = ct.promote_to_huffman(ct.build_quantized_model(pruned, [cb], [asg]))
    s = stats.huffman_savings(model)
    assert 0.0 < s < 0.9


def test_file_compression_ratio_orders_stages():
    _, _, dense, pruned, quantized, huff = staged_models(dims=(40, 30, 8), density=0.15)
    r_pruned = stats.file_compression_ratio(dense, pruned)
    r_quant = stats.file_compression_ratio(dense, quantized)
    r_huff = stats.file_compression_ratio(dense, huff)
    assert r_pruned > 1
    assert r_quant > r_pruned  # 4-bit indices beat 32-bit floats
    assert r_huff == pytest.approx(r_quant, rel=0.5)  # tables cost, streams save
