import csv
import io

import numpy as np
import pytest

from condensenet.executor import (
    LOG_COLUMNS,
    BufferOverflow,
    VirtualBuffer,
    compare_runs,
    run_reference,
    run_streaming,
)
from condensenet.layers import ShapeError
from condensenet.netdef import (
    LayerWeights,
    WeightStore,
    build_condensation,
    init_random_weights,
    parse_network,
)
from condensenet.tensor import ACC_BYTES, BlockPlan, Tensor


def random_input(net, seed):
    rng = np.random.default_rng(seed)
    if net.bits == 32:
        return Tensor.from_array(rng.normal(size=(net.channels, net.height, net.width)).astype(np.float32), 32)
    return Tensor.from_array(rng.integers(0, 256, (net.channels, net.height, net.width)), 8)


def test_identity_conv_net():
    net = parse_network("input 6 5 2 32\nconv out=2 k=1 act=identity")
    w = WeightStore([LayerWeights("full32", values=np.eye(2).reshape(2, 2, 1, 1))])
    x = random_input(net, 0)
    ref, _, _ = run_reference(net, w, x)
    out, _ = run_streaming(net, w, x, BlockPlan(4, 4))
    assert ref == x and out == x


def test_reference_materializes_every_set():
    net = build_condensation(2, 32)
    _, sets, log = run_reference(net, init_random_weights(net, 0), random_input(net, 0))
    assert list(sets) == [s.name for s in net.feature_sets()]
    assert sum(".virtual" in name for name in sets) == 4
    assert sets["conv1.virtual"].shape == (32, 32, 32)
    for rec in log.records:
        assert rec.materialized
        assert rec.bytes_written == sets[rec.name].nbytes


def test_alpha_one_streaming_equals_reference_without_condensing():
    net = build_condensation(1, 32)
    w, x = init_random_weights(net, 2), random_input(net, 2)
    ref, _, _ = run_reference(net, w, x)
    out, log = run_streaming(net, w, x, BlockPlan(8, 8))
    assert out == ref
    assert all(r.condensations == 0 for r in log.records)
    assert not any(r.virtual for r in log.records)


@pytest.mark.parametrize("seed", range(100))
def test_condensation_64_bit_identical(seed):
    scheme = ("w1a2", "full32")[seed % 2]
    net = build_condensation(2, 64, scheme)
    w, x = init_random_weights(net, seed), random_input(net, seed)
    ref, _, _ = run_reference(net, w, x)
    out, _ = run_streaming(net, w, x, BlockPlan(32, 32))
    assert out == ref


def test_peak_buffer_for_alpha_two_32_blocks():
    net = build_condensation(2, 64)
    _, log = run_streaming(net, init_random_weights(net, 0), random_input(net, 0), BlockPlan(32, 32))
    assert log["conv1"].peak_buffer_bytes == (2 + 1) * 32 * 32 * 4 == 12_288
    assert log["conv5"].peak_buffer_bytes == 2 * 4 * 4 * ACC_BYTES  # alpha 1, plane 4x4 smaller than the block


def test_peak_buffer_independent_of_image_size():
    text = "input {s} {s} 3 8\nquant w1a2\nconv out=16 alpha=4 act=hwgq\nconv out=8 alpha=2 pool=avg act=hwgq"
    peaks = []
    for size in (40, 72):
        net = parse_network(text.format(s=size))
        _, log = run_streaming(net, init_random_weights(net, 0), random_input(net, 0), BlockPlan(16, 16))
        peaks.append(log.peak_by_layer())
    assert peaks[0] == peaks[1] == {0: 0, 1: 5 * 16 * 16 * 4, 2: 3 * 16 * 16 * 4}


def test_no_write_for_virtual_sets():
    net = build_condensation(4, 32)
    _, log = run_streaming(net, init_random_weights(net, 0), random_input(net, 0))
    virtual = [r for r in log.records if r.virtual]
    assert len(virtual) == 4
    assert all(r.bytes_written == 0 and not r.materialized for r in virtual)


@pytest.mark.parametrize("scheme", ["w1a2", "full32"])
def test_traversal_order_and_workers_do_not_change_output(scheme):
    net = build_condensation(2, 40, scheme)
    w, x = init_random_weights(net, 4), random_input(net, 4)
    row, log_row = run_streaming(net, w, x, BlockPlan(16, 8, "row"))
    col, log_col = run_streaming(net, w, x, BlockPlan(16, 8, "col"))
    par, log_par = run_streaming(net, w, x, BlockPlan(16, 8, "row"), workers=4)
    assert row == col == par
    assert log_row.to_csv() == log_col.to_csv() == log_par.to_csv()


def test_compare_matched_run_has_empty_diff():
    net = build_condensation(2, 32)
    rep = compare_runs(net, init_random_weights(net, 0), random_input(net, 0), BlockPlan(8, 8))
    assert rep.equal and rep.diff == []
    assert "bit-identical" in rep.to_text()


@pytest.mark.parametrize("scheme", ["w1a2", "full32"])
@pytest.mark.parametrize("layer", [0, 2, 5])
def test_corrupted_streaming_weight_is_located(scheme, layer):
    net = build_condensation(2, 32, scheme)
    good = init_random_weights(net, 1)
    bad_layers = list(good.layers)
    lw = bad_layers[layer]
    if scheme == "w1a2":
        bad_layers[layer] = LayerWeights("binary1", codes=~lw.codes, scales=lw.scales, bias=lw.bias)
    else:
        bad_layers[layer] = LayerWeights("full32", values=-lw.values, bias=lw.bias)
    rep = compare_runs(net, good, random_input(net, 1), BlockPlan(16, 16), streaming_weights=WeightStore(bad_layers))
    assert not rep.equal
    assert rep.mismatch.set_name == f"conv{layer + 1}"
    assert f"conv{layer + 1}" in str(rep.mismatch)


def test_saved_bytes_equal_virtual_set_sizes():
    net = build_condensation(2, 64)
    rep = compare_runs(net, init_random_weights(net, 0), random_input(net, 0))
    virtual_bytes = sum(s.nbytes() for s in net.feature_sets() if s.virtual)
    assert rep.saved_bytes() == virtual_bytes
    assert sum(row[5] for row in rep.rows()) == virtual_bytes


def test_virtual_buffer_capacity():
    buf = VirtualBuffer(2)
    for key in ("a", "b", "out"):
        buf.hold(key, np.zeros((4, 4)))
    assert buf.peak_bytes == 3 * 16 * ACC_BYTES
    with pytest.raises(BufferOverflow):
        buf.hold("extra", np.zeros((4, 4)))


def test_input_and_weight_mismatches():
    net = build_condensation(2, 32)
    w = init_random_weights(net, 0)
    with pytest.raises(ShapeError):
        run_streaming(net, w, Tensor.zeros(16, 16, 3, 8))
    with pytest.raises(ShapeError):
        run_reference(net, WeightStore(w.layers[:-1]), random_input(net, 0))
    with pytest.raises(ShapeError):
        run_reference(net, init_random_weights(build_condensation(2, 32, "full32"), 0), random_input(net, 0))


def test_log_csv_schema():
    net = build_condensation(2, 16)
    _, log = run_streaming(net, init_random_weights(net, 0), random_input(net, 0))
    rows = list(csv.reader(io.StringIO(log.to_csv())))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert len(rows) == 1 + len(net.feature_sets())
