import csv
import json

import numpy as np
import pytest

from qsparse.cli import EXIT_CONFIG, EXIT_FORMAT, main
from qsparse.sparsity import SparsityTrace, parse_trace, write_trace

SMALL = ["--config", "edm1-generic-small"]


def run(tmp_path, *argv, sub="out"):
    out = tmp_path / sub
    code = main([*argv, "--out", str(out)])
    return code, out


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# manifest=")
    return lines[0], list(csv.DictReader(lines[1:]))


def test_simulate_is_deterministic(tmp_path):
    code, a = run(tmp_path, "simulate", "--seed", "3", "--timesteps", "8", sub="a")
    assert code == 0
    _, b = run(tmp_path, "simulate", "--seed", "3", "--timesteps", "8", sub="b")
    for name in ("simulate.csv", "simulate_timesteps.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    header, rows = read_csv(a / "simulate.csv")
    assert "seed=3" in header
    r = rows[0]
    assert float(r["speedup_total"]) == pytest.approx(float(r["speedup_quant"]) * float(r["speedup_sparsity"]))
    _, ts = read_csv(a / "simulate_timesteps.csv")
    assert len(ts) == 8


def test_simulate_json(tmp_path):
    code, out = run(tmp_path, "simulate", "--format", "json", "--timesteps", "4")
    assert code == 0
    doc = json.loads((out / "simulate.json").read_text())
    for key in ("speedup_sparsity", "speedup_quant", "speedup_total", "energy_saving", "manifest_hash"):
        assert key in doc
    assert doc["seed"] == 0 and len(doc["per_timestep"]) == 4


def test_manifest_hash_tracks_inputs(tmp_path):
    run(tmp_path, "simulate", "--timesteps", "2", sub="a")
    run(tmp_path, "simulate", "--timesteps", "2", "--threshold", "0.4", sub="b")
    ha, _ = read_csv(tmp_path / "a" / "simulate.csv")
    hb, _ = read_csv(tmp_path / "b" / "simulate.csv")
    assert ha != hb


def test_dense_trace_file(tmp_path):
    path = tmp_path / "dense.sqdm"
    write_trace(path, SparsityTrace(np.zeros((3, 64), np.float32)))
    code, out = run(tmp_path, "--trace", str(path), "simulate")
    assert code == 0
    _, rows = read_csv(out / "simulate.csv")
    assert float(rows[0]["speedup_sparsity"]) == 1.0


def test_quantize_report_small(tmp_path):
    code, out = run(tmp_path, *SMALL, "quantize-report")
    assert code == 0
    _, rows = read_csv(out / "quantize_report.csv")
    by = {r["format"]: r for r in rows}
    assert list(by) == ["fp16", "int8", "mxint8", "int4", "int4-vsq", "int4-fp8s", "mixed"]
    assert by["fp16"]["sqnr_db"] == "inf" and float(by["fp16"]["comp_saving"]) == 0.0
    assert float(by["int4"]["comp_saving"]) == 0.75 and float(by["int4"]["mem_saving"]) == 0.75
    assert float(by["int8"]["sqnr_db"]) > float(by["int4"]["sqnr_db"]) > 0
    assert int(by["int4"]["codes_used"]) <= 15


def test_quantize_report_desk_mixed_row(tmp_path):
    code, out = run(tmp_path, "quantize-report", "--format", "json")
    assert code == 0
    rows = json.loads((out / "quantize_report.json").read_text())["rows"]
    mixed = rows[-1]
    assert mixed["format"] == "mixed"
    assert abs(mixed["comp_saving"] - 0.73) <= 0.02 and abs(mixed["mem_saving"] - 0.72) <= 0.02
    assert rows[0]["sqnr_db"] == "inf"


def test_sensitivity_small(tmp_path):
    code, out = run(tmp_path, *SMALL, "sensitivity")
    assert code == 0
    _, rows = read_csv(out / "sensitivity.csv")
    assert len(rows) == 8
    assert sorted(int(r["rank"]) for r in rows) == list(range(1, 9))


def test_tracegen(tmp_path):
    args = ["tracegen", "--channels", "8", "--timesteps", "3", "--height", "4", "--width", "4", "--tensors"]
    code, a = run(tmp_path, *args, sub="a")
    assert code == 0
    _, b = run(tmp_path, *args, sub="b")
    assert (a / "trace.sqdm").read_bytes() == (b / "trace.sqdm").read_bytes()
    assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
    tr = parse_trace((a / "trace.sqdm").read_bytes())
    assert tr.tensors is not None and tr.sparsity.shape == (3, 8)
    _, rows = read_csv(a / "trace.csv")
    assert len(rows) == 24


def test_sweep_threshold(tmp_path):
    code, out = run(tmp_path, "sweep", "--axis", "threshold", "--values", "0.1,0.3,0.5",
                    "--timesteps", "16")
    assert code == 0
    _, rows = read_csv(out / "sweep_threshold.csv")
    row = next(r for r in rows if float(r["value"]) == 0.3)
    assert abs(float(row["sparse_portion_sparsity"]) - 0.70) <= 0.05
    assert all(0 <= float(r["load_balance"]) <= 1 for r in rows)


def test_sweep_single_value_matches_simulate(tmp_path):
    run(tmp_path, "simulate", "--timesteps", "8", "--period", "2", sub="sim")
    run(tmp_path, "sweep", "--axis", "period", "--values", "2", "--timesteps", "8", sub="sw")
    _, sim = read_csv(tmp_path / "sim" / "simulate.csv")
    _, sw = read_csv(tmp_path / "sw" / "sweep_period.csv")
    for key in ("speedup_sparsity", "speedup_total", "energy_saving", "load_balance"):
        assert float(sw[0][key]) == float(sim[0][key])


def test_sweep_period_non_increasing(tmp_path):
    code, out = run(tmp_path, "sweep", "--axis", "period", "--values", "1,2,4,8,16,32,64",
                    "--replicates", "8")
    assert code == 0
    _, rows = read_csv(out / "sweep_period.csv")
    s = [float(r["speedup_sparsity"]) for r in rows]
    assert all(a >= b for a, b in zip(s, s[1:]))


def test_exit_codes(tmp_path):
    assert run(tmp_path, "--config", str(tmp_path / "nope.yaml"), "simulate")[0] == EXIT_CONFIG
    assert run(tmp_path, "simulate", "--policy", "int3")[0] == EXIT_CONFIG
    assert run(tmp_path, "simulate", "--arch", str(tmp_path / "nope.yaml"))[0] == EXIT_CONFIG
    assert run(tmp_path, "simulate", "--persistence", "2")[0] == EXIT_CONFIG
    assert run(tmp_path, "simulate", "--channels", "8")[0] == EXIT_CONFIG
    assert run(tmp_path, "sweep", "--axis", "period", "--values", "")[0] == EXIT_CONFIG
    assert run(tmp_path, "sweep", "--axis", "period", "--values", "1.5")[0] == EXIT_CONFIG
    bad = tmp_path / "bad.sqdm"
    bad.write_bytes(b"NOTATRACE" + bytes(40))
    assert run(tmp_path, "--trace", str(bad), "simulate")[0] == EXIT_FORMAT
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--format", "xml"])
    assert info.value.code == 2
