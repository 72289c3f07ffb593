import csv
import io

import numpy as np
import pytest

from condensenet.cli import RunConfig, CliError, main, read_pnm, synthetic_input, thread_count
from condensenet.executor import compare_runs
from condensenet.netdef import builtin_network, init_random_weights, save_weights
from condensenet.tensor import BlockPlan, Tensor, load_snapshot


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_memory_command(capsys):
    code, out, _ = run(capsys, "memory", "--net", "tiny-yolov2", "--wbits", "1")
    assert code == 0
    assert "1,924 KB" in out and "total: 6,020 KB" in out


def test_traffic_command(capsys):
    code, out, _ = run(capsys, "traffic", "--net", "condensation:2")
    assert code == 0
    frac = float(out.split("savings_fraction: ")[1].split()[0])
    assert frac > 0
    assert "9,788 KB" in out


def test_traffic_plot_data(capsys):
    code, out, _ = run(capsys, "traffic", "--plot-data")
    assert code == 0 and out.startswith("layer,bytes_with_virtual,bytes_without_virtual")


def test_perf_command(capsys):
    code, out, _ = run(capsys, "perf")
    assert code == 0 and "41.05 ms" in out and "95 ms" in out and "1.1940" in out


def test_run_is_deterministic_and_matches_compare(capsys, tmp_path):
    args = ["run", "--net", "condensation:2", "--seed", "7", "--input", "checker:48", "--out", str(tmp_path / "o.cnfm"),
            "--log", str(tmp_path / "log.csv")]
    code, out1, _ = run(capsys, *args)
    assert code == 0 and "seed=7" in out1
    _, out2, _ = run(capsys, *args)
    digest = [l for l in out1.splitlines() if l.startswith("sha256")]
    assert digest == [l for l in out2.splitlines() if l.startswith("sha256")]
    saved = load_snapshot(tmp_path / "o.cnfm")
    net = builtin_network("condensation:2", 48)
    x = Tensor.from_array(synthetic_input("checker:48", 3), 8)
    rep = compare_runs(net, init_random_weights(net, 7), x, BlockPlan(32, 32))
    assert rep.output.to_bytes() == saved.to_bytes()
    rows = list(csv.reader(io.StringIO((tmp_path / "log.csv").read_text())))
    assert rows[0] == ["layer", "set", "virtual", "bytes_read", "bytes_written", "peak_buffer_bytes"]


def test_tiny_yolov2_output_has_30_channels(capsys, tmp_path):
    code, out, _ = run(capsys, "run", "--net", "tiny-yolov2", "--seed", "1", "--input", "noise:32:5",
                       "--out", str(tmp_path / "o.cnfm"))
    assert code == 0
    assert load_snapshot(tmp_path / "o.cnfm").channels == 30


def test_compare_command(capsys):
    code, out, _ = run(capsys, "compare", "--net", "condensation:4", "--scheme", "full32", "--seed", "2",
                       "--input", "ramp:24", "--block", "8", "--traversal", "col")
    assert code == 0 and "bit-identical" in out


def test_weights_file_and_net_file(capsys, tmp_path):
    (tmp_path / "toy.net").write_text("input 12 12 3 8\nquant w1a2\nconv out=8 alpha=2 act=hwgq\nspool stride=2\n")
    from condensenet.netdef import parse_network
    net = parse_network((tmp_path / "toy.net").read_text())
    save_weights(tmp_path / "w.cndw", init_random_weights(net, 3))
    code, out, _ = run(capsys, "run", "--net", str(tmp_path / "toy.net"), "--weights", str(tmp_path / "w.cndw"),
                       "--input", "noise:12:1")
    assert code == 0 and "4 x 6 x 6" in out
    code, _, err = run(capsys, "run", "--net", str(tmp_path / "toy.net"), "--weights", str(tmp_path / "w.cndw"),
                       "--input", "noise:16:1")
    assert code == 2 and "expects 12x12" in err


def test_pnm_input(capsys, tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    (tmp_path / "a.ppm").write_bytes(b"P6\n# test\n16 16\n255\n" + img.tobytes())
    assert np.array_equal(read_pnm(tmp_path / "a.ppm"), img.transpose(2, 0, 1))
    code, out, _ = run(capsys, "run", "--net", "condensation:2", "--seed", "0", "--input", str(tmp_path / "a.ppm"))
    assert code == 0
    (tmp_path / "g.pgm").write_bytes(b"P5 16 16 255\n" + img[..., 0].tobytes())
    code, _, err = run(capsys, "run", "--net", "condensation:2", "--seed", "0", "--input", str(tmp_path / "g.pgm"))
    assert code == 2 and "channels" in err


def test_validation_errors_exit_2(capsys, tmp_path):
    assert run(capsys, "run", "--net", "condensation:3", "--seed", "0")[0] == 2
    assert run(capsys, "run", "--net", "condensation:2", "--seed", "0", "--input", "swirl:8")[0] == 2
    assert run(capsys, "run", "--net", "condensation:2", "--seed", "0", "--weights", "x.cndw")[0] == 2
    (tmp_path / "bad.cndw").write_bytes(b"CNDW\x01\x00")
    code, _, err = run(capsys, "run", "--net", "condensation:2", "--weights", str(tmp_path / "bad.cndw"))
    assert code == 2 and err.startswith("error: run:")
    assert run(capsys, "memory", "--wbits", "4")[0] == 2


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", "3")
    assert code == 0
    assert out.count(" ok") == 20


def test_gradcheck_failure_exit_3(capsys, monkeypatch):
    import condensenet.cli as cli
    monkeypatch.setattr(cli, "gradcheck", lambda seed, cases: [
        {"case": 0, "alpha": 2, "op": "max", "x_shape": (1, 3, 3), "w1_shape": (2, 1, 1, 1),
         "errors": {"x": 1e-3}, "max_error": 1e-3}])
    assert run(capsys, "gradcheck")[0] == 3


def test_csv_format(capsys):
    code, out, _ = run(capsys, "--format", "csv", "memory", "--net", "condensation:2")
    assert code == 0 and "layer,out,in,k,weight_bits,weight_bytes,scale_bias_bytes" in out
    code, out, _ = run(capsys, "--format", "csv", "perf")
    assert out.splitlines()[0] == "network,layer,macs"


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("CONDENSE_THREADS", raising=False)
    assert thread_count(None) == 1 and thread_count(6) == 6
    monkeypatch.setenv("CONDENSE_THREADS", "2")
    assert thread_count(None) == 2 and thread_count(8) == 2
    monkeypatch.setenv("CONDENSE_THREADS", "x")
    with pytest.raises(CliError):
        thread_count(None)


def test_run_config_needs_one_weight_source():
    with pytest.raises(CliError):
        RunConfig("tiny-yolov2", "checker:8", BlockPlan(), seed=1, weights="w.cndw")
    with pytest.raises(CliError):
        RunConfig("tiny-yolov2", "checker:8", BlockPlan())


def test_synthetic_inputs():
    assert synthetic_input("checker:16", 3).shape == (3, 16, 16)
    assert synthetic_input("ramp:4x6", 1).shape == (1, 4, 6)
    assert np.array_equal(synthetic_input("noise:8:3", 2), synthetic_input("noise:8:3", 2))
    assert not np.array_equal(synthetic_input("noise:8:3", 2), synthetic_input("noise:8:4", 2))
