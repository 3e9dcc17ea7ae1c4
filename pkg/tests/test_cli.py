import csv
import json
import subprocess
import sys

import pytest

from iotshaper import io
from iotshaper.cli import main
from iotshaper.core import ChannelMatrix, PacketAlphabet


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_zipf_and_merge(tmp_path, capsys):
    assert main(["zipf", "--sizes", "0,32,64", "--s", "5", "--out", str(tmp_path / "z.json")]) == 0
    assert io.read_pmf(tmp_path / "z.json").probs[0] == pytest.approx(0.96584, abs=1e-5)
    assert main(["merge-pmf", "device:sleep", "device:camera"]) == 0
    merged = json.loads(capsys.readouterr().out)
    assert merged["sizes"] == [0, 93, 142, 270, 1117]


def test_estimate_pmf_from_trace(tmp_path):
    (tmp_path / "t.csv").write_text("timestamp_s,size_bytes\n0.2,93\n0.5,7\n5.7,1117\n")
    rc = main(["estimate-pmf", "--trace", str(tmp_path / "t.csv"), "--whitelist", "93,1117",
               "--out", str(tmp_path / "p.json"), "--stream-out", str(tmp_path / "s.csv")])
    assert rc == 0
    pmf = io.read_pmf(tmp_path / "p.json")
    assert pmf.sizes.tolist() == [0, 93, 1117]
    assert pmf.probs.tolist() == pytest.approx([4 / 6, 1 / 6, 1 / 6])
    assert io.read_stream(tmp_path / "s.csv").slots.tolist() == [93, 0, 0, 0, 0, 1117]


def test_optimize_pst_delta_and_infeasible(tmp_path):
    io.write_json(tmp_path / "camera.json", {"sizes": [0, 142, 270], "probs": [0.85, 0.14, 0.01]})
    rho = 22.58 / 142
    rc = main(["optimize", "--variant", "pst", "--pmf", str(tmp_path / "camera.json"), "--rho", f"{rho!r},0.001",
               "--out", str(tmp_path / "o")])
    assert rc == 2
    rows = read_csv(tmp_path / "o" / "results.csv")
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("infeasible")
    mech = io.read_mechanism(tmp_path / "o" / rows[0]["channel_file"].replace(".json", ".mechanism.json"))
    assert mech.output_pmf.probs.tolist() == pytest.approx([0, 1, 0], abs=1e-9)
    assert (tmp_path / "o" / "config.json").exists()


def test_optimize_dps_grid(tmp_path):
    rc = main(["optimize", "--pmf", "device:camera", "--rho", "0.62", "--eps-size", "1,5", "--eps-timing", "5",
               "--out", str(tmp_path / "o")])
    assert rc == 0
    rows = read_csv(tmp_path / "o" / "results.csv")
    assert [(float(r["eps_size"]), float(r["eps_timing"])) for r in rows] == [(1, 5), (5, 5)]
    assert list(rows[0].keys())[:4] == ["variant", "rho_target", "eps_size", "eps_timing"]


def test_simulate_and_audit(tmp_path):
    out = tmp_path / "sim"
    rc = main(["simulate", "--pmf", "zipf:1:0,32,64", "--variant", "dps", "--rho", "0.6", "--eps", "1",
               "--horizon", "2000", "--seed", "3", "--out", str(out)])
    assert rc == 0
    report = io.read_json(out / "report.json")
    assert report["slots_simulated"] == 2000
    assert len(io.read_stream(out / "shaped.csv")) == 2000
    assert main(["audit", "--channel", str(out / "mechanism.json"), "--eps", "1", "--horizon", "2",
                 "--out", str(tmp_path / "a.json")]) == 0
    audit = io.read_json(tmp_path / "a.json")
    assert audit["pass"] and len(audit["stream_audits"]) == 2


def test_simulate_empty_stream(tmp_path):
    io.write_channel(tmp_path / "c.json", ChannelMatrix.identity(PacketAlphabet([0, 32])))
    (tmp_path / "s.csv").write_text("slot,bytes\n")
    assert main(["simulate", "--mechanism", str(tmp_path / "c.json"), "--stream", str(tmp_path / "s.csv"),
                 "--out", str(tmp_path / "o")]) == 0
    assert io.read_json(tmp_path / "o" / "report.json")["slots_simulated"] == 0


def test_audit_identity_fails_with_witness(tmp_path):
    io.write_channel(tmp_path / "c.json", ChannelMatrix.identity(PacketAlphabet([0, 32, 64])))
    assert main(["audit", "--channel", str(tmp_path / "c.json"), "--eps", "5", "--out", str(tmp_path / "a.json")]) == 2
    audit = io.read_json(tmp_path / "a.json")
    assert not audit["pass"] and audit["worst_size_pair"] is not None


def test_sweep_outputs(tmp_path):
    rc = main(["sweep", "--pmf", "zipf:1:0,32,64", "--variant", "dps", "--variant", "pst", "--rho", "0.5,0.8",
               "--eps", "1", "--horizon", "1000", "--seed", "0,1", "--out", str(tmp_path / "s")])
    assert rc == 0
    rows = read_csv(tmp_path / "s" / "tradeoff.csv")
    assert len(rows) == 4
    assert all(r["empirical_Q_bytes"] != "" for r in rows)
    assert len(read_csv(tmp_path / "s" / "results.csv")) == 4


def test_compare_bursty(tmp_path):
    rc = main(["compare-bursty", "--pmf", "zipf:1:0,32,64", "--rho", "0.6", "--eps", "1", "--horizon", "5000",
               "--out", str(tmp_path / "b.json")])
    assert rc == 0
    data = io.read_json(tmp_path / "b.json")
    assert data["bursty"]["avg_queue_bytes"] > data["iid"]["avg_queue_bytes"]


@pytest.mark.parametrize("argv", [
    ["optimize", "--pmf", "nope.json", "--rho", "0.5", "--out", "x"],
    ["optimize", "--pmf", "device:toaster", "--rho", "0.5", "--out", "x"],
    ["sweep", "--pmf", "zipf:1:0,32,64", "--rho", "0.5", "--seed", "1,1", "--out", "x"],
    ["zipf", "--sizes", "5,6", "--s", "1"],
    ["simulate", "--out", "x"],
    ["bogus"],
])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    try:
        rc = main(argv)
    except SystemExit as exc:  # argparse-level errors
        rc = exc.code
    assert rc == 1


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "iotshaper.cli", "zipf", "--sizes", "0,32,64", "--s", "1"],
                          capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout)["sizes"] == [0, 32, 64]
