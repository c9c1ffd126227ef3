import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from kvprefetch.attention import generate_trace
from kvprefetch.cli import main, si_int, si_number
from kvprefetch.errors import TraceFormatError
from kvprefetch.selection import AttentionLayout
from kvprefetch.traceio import load_trace, read_tensor, save_trace, trace_paths, write_tensor


def header_len(path):
    raw = path.read_bytes()
    return raw.index(b"\n") + 1


# -- trace files ---------------------------------------------------------

def test_round_trip_is_bit_exact(tmp_path):
    tr = generate_trace(AttentionLayout(4, 2, 8), 12, 0.9, 0.1, seed=3, batch=2, context=5)
    save_trace(tr, tmp_path / "t")
    back = load_trace(tmp_path / "t")
    assert back == tr
    assert back.meta["seed"] == 3 and back.meta["alpha"] == 0.9


def test_multi_layer_round_trip(tmp_path):
    tr = generate_trace(AttentionLayout(2, 1, 4), 6, 0.5, 0.5, seed=1, context=3, n_layers=3)
    paths = save_trace(tr, tmp_path / "m")
    assert len(paths) == 9
    assert trace_paths(tmp_path / "m", 3)[2]["key"].name == "m.l2.key.bin"
    assert load_trace(tmp_path / "m") == tr


def test_body_is_little_endian_f32_in_bhtd_order(tmp_path):
    data = np.arange(2 * 3 * 4 * 5, dtype=np.float32).reshape(2, 3, 4, 5)
    p = write_tensor(tmp_path / "x.bin", data, "query")
    raw = p.read_bytes()
    body = raw[header_len(p):]
    assert len(body) == 4 * data.size
    assert np.frombuffer(body, "<f4")[((1 * 3 + 2) * 4 + 3) * 5 + 4] == data[1, 2, 3, 4]
    header = json.loads(raw[:header_len(p) - 1])
    assert header == {"version": 1, "dtype": "f32", "layout": "BHTD", "dims": [2, 3, 4, 5], "field": "query"}


@pytest.mark.parametrize("mangle,offset", [
    (lambda raw: b'{"version": 1, "dims": [1,' + raw[raw.index(b"\n"):], 26),
    (lambda raw: raw[:-4], None),
])
def test_malformed_files_report_offsets(tmp_path, mangle, offset):
    p = write_tensor(tmp_path / "x.bin", np.zeros((1, 1, 2, 4)), "key")
    raw = p.read_bytes()
    body_start = header_len(p)
    p.write_bytes(mangle(raw))
    with pytest.raises(TraceFormatError) as info:
        read_tensor(p)
    expect = offset if offset is not None else body_start + 4 * 8 - 4
    assert info.value.offset == expect
    assert f"byte offset {expect}" in str(info.value)


def test_header_field_checks(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b'{"version": 2, "dtype": "f32", "layout": "BHTD", "dims": [1,1,1,1], "field": "key"}\n' + b"\0" * 4)
    with pytest.raises(TraceFormatError, match="version"):
        read_tensor(p)
    p.write_bytes(b"no newline at all")
    with pytest.raises(TraceFormatError):
        read_tensor(p)


# -- numbers -------------------------------------------------------------

def test_si_suffixes():
    assert si_number("1.5k") == 1500.0
    assert si_number("2M") == 2e6
    assert si_number("250G") == 250e9
    assert si_int("32k") == 32000
    assert si_number("7e-3") == 7e-3
    with pytest.raises(Exception):
        si_int("1.5")
    with pytest.raises(Exception):
        si_number("12Q")


# -- commands ------------------------------------------------------------

def test_gen_trace_sizes_and_determinism(tmp_path, capsys):
    args = ["gen-trace", "--steps", "8", "--dims", "1,2,1,16", "--context", "0", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for field, heads in (("query", 2), ("key", 1), ("value", 1)):
        a, b = tmp_path / f"a.{field}.bin", tmp_path / f"b.{field}.bin"
        assert a.stat().st_size == header_len(a) + 4 * 1 * heads * 8 * 16
        assert a.read_bytes() == b.read_bytes()
    manifest = json.loads((tmp_path / "a.manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["config"]["steps"] == 8


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("ASYNCSPADE_SEED", "11")
    assert main(["gen-trace", "--steps", "4", "--dims", "1,1,1,4", "--context", "0", "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e.manifest.json").read_text())["seed"] == 11
    assert load_trace(tmp_path / "e").meta["seed"] == 11


def read_report(path):
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema: overlap-report/1"
    return list(csv.DictReader(lines[1:]))


def test_predict_eval_oracle_and_random(tmp_path):
    out = tmp_path / "r.csv"
    rc = main(["predict-eval", "--dims", "1,2,1,16", "--steps", "300", "--context", "256", "-C", "32",
               "--window", "8", "--selectors", "oracle,random:1", "--distances", "0,1", "--out", str(out)])
    assert rc == 0
    rows = read_report(out)
    means = {(r["selector"], r["distance"]): float(r["overlap"]) for r in rows if r["step"] == "mean"}
    assert means[("oracle", "0")] == 1.0
    assert abs(means[("random:1", "1")] - 32 / 256) <= 0.02
    assert (tmp_path / "r.csv.manifest.json").exists()


def test_predict_eval_from_trace_file_matches_synthetic(tmp_path):
    flags = ["--dims", "1,2,1,16", "--steps", "60", "--context", "128", "--seed", "2"]
    assert main(["gen-trace", *flags, "--out", str(tmp_path / "t")]) == 0
    common = ["-C", "16", "--window", "8", "--selectors", "last,assembled", "--distances", "1"]
    assert main(["predict-eval", "--trace", str(tmp_path / "t"), *common, "--out", str(tmp_path / "f.csv")]) == 0
    assert main(["predict-eval", *flags, *common, "--out", str(tmp_path / "s.csv")]) == 0
    assert (tmp_path / "f.csv").read_text() == (tmp_path / "s.csv").read_text()


def test_predict_eval_includes_shift_comparison(tmp_path):
    out = tmp_path / "r.csv"
    main(["predict-eval", "--dims", "1,1,1,16", "--steps", "40", "--context", "64", "-C", "8", "--window", "8",
          "--selectors", "single,reconstructed", "--out", str(out)])
    sels = {(r["selector"], r["distance"]) for r in read_report(out) if r["step"] == "mean"}
    assert sels == {("single", "1"), ("reconstructed", "0")}


@pytest.mark.xfail(strict=True, reason=(
    "AR(1) drift is Markov: selecting with the last query is already optimal, "
    "and the regression average trails it by more than 0.02"))
def test_predict_eval_assembled_close_to_last(tmp_path):
    out = tmp_path / "r.csv"
    main(["predict-eval", "--dims", "1,4,2,64", "--steps", "200", "--context", "2048", "-C", "256",
          "--selectors", "last,assembled", "--out", str(out)])
    means = {r["selector"]: float(r["overlap"]) for r in read_report(out) if r["step"] == "mean"}
    assert means["assembled"] >= means["last"] - 0.02


def test_predict_eval_bad_trace_header(tmp_path, capsys):
    for field in ("query", "key", "value"):
        (tmp_path / f"bad.{field}.bin").write_bytes(b"{not json\n")
    assert main(["predict-eval", "--trace", str(tmp_path / "bad")]) == 2
    assert "byte offset" in capsys.readouterr().err


def test_predict_eval_missing_trace_is_io_error(tmp_path):
    assert main(["predict-eval", "--trace", str(tmp_path / "missing")]) == 4


def test_simulate_table_preset(tmp_path, capsys):
    out = tmp_path / "tl.json"
    assert main(["simulate", "--preset", "qwen3-8b-b8-32k-a100-p6", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "TPOT             42.780000 ms" in text
    assert "stall total      0.000000 ms" in text
    doc = json.loads(out.read_text())
    assert doc["version"] == 1 and doc["metrics"]["stall_total"] == 0


def test_simulate_explicit_flags_compute_bound(capsys):
    assert main(["simulate", "--inference-latency", "7.13e-3", "--bandwidth", "1e18", "--cache-latency", "0",
                 "--launch", "0"]) == 0
    assert "TPOT             42.780000 ms" in capsys.readouterr().out


def test_simulate_doubled_cache_latency_stalls(capsys):
    assert main(["simulate", "--preset", "qwen3-8b-b8-32k-a100-p6", "--cache-latency", "2x"]) == 0
    text = capsys.readouterr().out
    assert "stall total      0.000000" not in text
    assert "binding constraint: cache-compute" in text


def test_simulate_infeasible_and_invalid():
    assert main(["bandwidth", "--inference-latency", "1e-3", "--launch", "1e-3"]) == 3
    assert main(["simulate", "--inference-latency", "1e-3", "--threshold", "4"]) == 2


def test_flops_command(tmp_path, capsys):
    assert main(["flops", "--model", "qwen3-8b", "--strategy", "asyncspade", "-T", "32768", "-C", "2048"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["attn"] == 1_207_959_552
    assert main(["flops", "--strategy", "full", "-T", "0"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["attn"] == 0 and doc["total"] == doc["param"]
    out = tmp_path / "f.json"
    assert main(["flops", "--all-strategies", "--out", str(out)]) == 0
    rows = json.loads(out.read_text())["rows"]
    assert [r["strategy"] for r in rows] == ["asyncspade", "quest", "tova", "full"]


def test_flops_unknown_model_lists_presets(capsys):
    assert main(["flops", "--model", "gpt-9"]) == 2
    assert "qwen3-32b" in capsys.readouterr().err


def test_bandwidth_report_against_reference(capsys):
    assert main(["bandwidth", "--preset", "qwen3-8b-b8-32k-a100-p6"]) == 0
    text = capsys.readouterr().out
    assert "107.71 GB/s" in text and "relative difference" in text


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "kvprefetch.cli", "flops", "-T", "1k", "-C", "128"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["T"] == 1000
