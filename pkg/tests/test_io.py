import numpy as np
import pytest

from iotshaper import io
from iotshaper.core import ChannelMatrix, PacketAlphabet, PacketStream, Pmf
from iotshaper.shaping import Mechanism, MechanismKind, shape_stream
from iotshaper.traces import RawTrace

A3 = PacketAlphabet([0, 32, 64])


def test_pmf_and_channel_roundtrip(tmp_path):
    pmf = Pmf(A3, [0.5, 0.25, 0.25])
    io.write_pmf(tmp_path / "p.json", pmf)
    assert np.array_equal(io.read_pmf(tmp_path / "p.json").probs, pmf.probs)
    ch = ChannelMatrix(A3, A3, np.full((3, 3), 1 / 3))
    io.write_channel(tmp_path / "c.json", ch)
    assert np.array_equal(io.read_channel(tmp_path / "c.json").rows, ch.rows)
    # a bare channel reads as a DPS mechanism
    assert io.read_mechanism(tmp_path / "c.json").kind is MechanismKind.DPS


def test_mechanism_roundtrip(tmp_path):
    mech = Mechanism.pps_star(A3, 70, rng_seed=4)
    io.write_mechanism(tmp_path / "m.json", mech)
    back = io.read_mechanism(tmp_path / "m.json")
    assert back.kind is MechanismKind.PPS_STAR and back.constant_size == 70 and back.rng_seed == 4


def test_stream_csv(tmp_path):
    s = PacketStream([0, 32, 64, 0])
    io.write_stream(tmp_path / "s.csv", s)
    assert (tmp_path / "s.csv").read_text().splitlines()[:2] == ["slot,bytes", "0,0"]
    assert io.read_stream(tmp_path / "s.csv").slots.tolist() == [0, 32, 64, 0]
    (tmp_path / "bad.csv").write_text("slot,bytes\n0,1\n2,1\n")
    with pytest.raises(ValueError):
        io.read_stream(tmp_path / "bad.csv")
    (tmp_path / "hdr.csv").write_text("t,b\n0,1\n")
    with pytest.raises(ValueError, match="header"):
        io.read_stream(tmp_path / "hdr.csv")


def test_raw_trace_csv(tmp_path):
    tr = RawTrace.from_records([(0.1, 40), (0.30000000000000004, 1500)])
    io.write_raw_trace(tmp_path / "t.csv", tr)
    back = io.read_raw_trace(tmp_path / "t.csv")
    assert np.array_equal(back.timestamps, tr.timestamps) and np.array_equal(back.sizes, tr.sizes)


def test_report_json_handles_inf(tmp_path):
    _, rep = shape_stream(PacketStream([32, 0]), Mechanism.pps(A3, Pmf(A3, [1.0, 0, 0])))
    io.write_report(tmp_path / "r.json", rep)
    data = io.read_json(tmp_path / "r.json")
    assert data["empirical_rho"] == "inf"


def test_write_rows_fixed_columns(tmp_path):
    io.write_rows(tmp_path / "x.csv", ["a", "b"], [{"b": float("inf"), "a": 0.1, "c": 3}, {"a": 1}])
    assert (tmp_path / "x.csv").read_text().splitlines() == ["a,b", "0.1,inf", "1,"]
