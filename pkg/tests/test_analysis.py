import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from condensenet import analysis as A
from condensenet.executor import run_streaming
from condensenet.harness import CaseSpec, gen_network
from condensenet.netdef import build_condensation, build_tiny_yolov2, init_random_weights, parse_network
from condensenet.tensor import BlockPlan, Tensor

NETS = {"tiny-yolov2": build_tiny_yolov2(), "condensation:2": build_condensation(2), "condensation:4": build_condensation(4)}


@pytest.mark.parametrize("name,kb", [("tiny-yolov2", 1924), ("condensation:2", 1935), ("condensation:4", 1959)])
def test_weight_memory_kb(name, kb):
    rep = A.weight_memory(NETS[name], 1)
    assert rep.weight_kb == kb == A.PUBLISHED_WEIGHT_KB[name]
    assert rep.feature_map_kb == 4096
    assert rep.total_kb == kb + 4096


def test_tiny_yolov2_bit_count():
    assert A.weight_memory(NETS["tiny-yolov2"], 1).weight_bits == 15_758_256


def test_weight_memory_additive_and_linear():
    for net in NETS.values():
        one, full = A.weight_memory(net, 1), A.weight_memory(net, 32)
        assert full.weight_bits == 32 * one.weight_bits
        assert one.weight_bits == sum(r.weight_bits for r in one.layers)
    with pytest.raises(ValueError):
        A.weight_memory(NETS["tiny-yolov2"], 2)


def test_scale_bias_reported_separately():
    rep = A.weight_memory(NETS["tiny-yolov2"], 1)
    assert rep.overhead_bytes == 8 * sum(p.out_channels for p in NETS["tiny-yolov2"].conv_params())
    assert "scale_bias_bytes" in rep.to_csv().splitlines()[0]


def test_kb_rounding():
    assert [A.to_kb(b) for b in (511, 512, 1023, 1536)] == [0, 1, 1, 2]


def test_capacity_invariant_across_networks():
    caps = {name: A.feature_memory_capacity(net, 8) for name, net in NETS.items()}
    assert set(caps.values()) == {512 * 512 * 16}
    assert A.feature_memory_capacity(NETS["condensation:2"], 2) == 512 * 512 * 16 // 4


def test_capacity_of_toy_net_by_enumeration():
    net = parse_network("input 8 8 3 8\nconv out=12 alpha=2 act=relu\nspool stride=2\nconv out=20 alpha=4 act=relu")
    sizes = {"input": 8 * 8 * 3, "conv1": 8 * 8 * 6, "pool1": 4 * 4 * 6, "conv2": 4 * 4 * 5}
    assert A.feature_memory_capacity(net, 8) == max(sizes.values())
    with pytest.raises(ValueError):
        A.feature_memory_capacity(net, 32)


def test_excluded_sets_for_condensation_two():
    rep = A.traffic_totals(NETS["condensation:2"], act_bits=2)
    virtual = [r.nbytes // 1024 for r in rep.rows if r.virtual]
    assert virtual == [2048, 1024, 512, 256]
    assert rep.excluded_bytes == 3840 * 1024


def test_savings_zero_at_alpha_one_and_increasing():
    fr = [A.traffic_totals(build_condensation(a), act_bits=2).savings_fraction for a in (1, 2, 4)]
    assert fr[0] == 0 and fr[0] < fr[1] < fr[2]


@given(st.integers(0, 10**6), st.sampled_from([2, 8]))
def test_with_virtual_never_exceeds_without(seed, bits):
    net, _, _ = gen_network(CaseSpec(), seed)
    rep = A.traffic_totals(net, act_bits=bits)
    assert rep.total_with_virtual <= rep.total_without_virtual
    assert (rep.total_with_virtual == rep.total_without_virtual) == all(c.alpha == 1 for c in net.convs)


def test_savings_definition_on_published_pair():
    p = A.PUBLISHED_TRAFFIC_KB
    assert round(A.savings_fraction(p["without_virtual"], p["with_virtual"]), 3) == 0.265


def test_traffic_text_shows_published_figures_and_rule():
    text = A.traffic_totals(NETS["condensation:2"]).to_text(show_published=True)
    assert "9,788 KB" in text and "7,740 KB" in text and A.SAVINGS_RULE in text


def test_plot_data_series():
    lines = A.traffic_totals(NETS["condensation:2"]).plot_data().splitlines()
    assert lines[0] == "layer,bytes_with_virtual,bytes_without_virtual"
    first = lines[2].split(",")
    assert first[0] == "1" and int(first[2]) - int(first[1]) == 2048 * 1024


@pytest.mark.parametrize("plan", [BlockPlan(8, 8), BlockPlan(32, 32), BlockPlan(16, 8, "col"), BlockPlan.full()])
@pytest.mark.parametrize("scheme", ["w1a2", "full32"])
def test_formula_and_executor_log_agree(plan, scheme):
    net = build_condensation(2, 40, scheme)
    x = Tensor.from_array(np.random.default_rng(0).integers(0, 256, (3, 40, 40)), 8)
    _, log = run_streaming(net, init_random_weights(net, 0), x, plan)
    act_bits = 2 if scheme == "w1a2" else None
    if act_bits:
        assert log.total_written == A.traffic_totals(net, plan, act_bits).total_with_virtual
    reads = A.stream_reads(net, plan, act_bits)
    for name, nbytes in reads.items():
        assert log[name].bytes_read == nbytes


def test_mac_model():
    rep = A.mac_model(NETS["tiny-yolov2"], NETS["condensation:2"], names=("tiny-yolov2", "condensation:2"))
    assert rep.layer_macs[0][0] == ("conv1", 113_246_208)
    assert rep.totals == (5_254_938_624, 6_274_154_496)
    assert abs(rep.mac_ratio - 1.194) <= 0.001
    assert rep.ideal_seconds[0] == pytest.approx(5_254_938_624 / (320 * 400e6))
    assert rep.published_time_ratio == pytest.approx(124 / 95)
    text = rep.to_text()
    assert "95 ms" in text and "124 ms" in text and "not reproduced" in text
    with pytest.raises(ValueError):
        A.mac_model(NETS["tiny-yolov2"], NETS["tiny-yolov2"], 0)


def test_csv_headers_are_stable():
    heads = [
        A.weight_memory(NETS["tiny-yolov2"]).to_csv().splitlines()[0],
        A.traffic_totals(NETS["condensation:2"]).to_csv().splitlines()[0],
        A.mac_model(NETS["tiny-yolov2"], NETS["condensation:2"]).to_csv().splitlines()[0],
    ]
    assert heads == [",".join(A.MemoryReport.CSV_COLUMNS), ",".join(A.TrafficReport.CSV_COLUMNS),
                     ",".join(A.PerfReport.CSV_COLUMNS)]


def test_reports_are_reproducible():
    for a, b in itertools.combinations([A.traffic_totals(NETS["condensation:4"]).to_csv() for _ in range(2)], 2):
        assert a == b
