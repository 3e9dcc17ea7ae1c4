"""JSON and CSV readers and writers for the package's file formats.

* PMF JSON: ``{"sizes": [...], "probs": [...]}``
* Channel JSON: ``{"input_sizes": [...], "output_sizes": [...], "rows": [[...], ...]}``
* Stream CSV: header ``slot,bytes``, one row per slot
* Raw trace CSV: header ``timestamp_s,size_bytes``
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Union

import numpy as np

from .core import ChannelMatrix, PacketAlphabet, PacketStream, Pmf
from .shaping import Mechanism, ShapingReport
from .traces import RawTrace

PathLike = Union[str, Path]


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _sanitize(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    return obj


def write_json(path: PathLike, data) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_sanitize(data), fh, indent=2, default=_json_default)
        fh.write("\n")


def read_json(path: PathLike):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def read_pmf(path: PathLike) -> Pmf:
    return Pmf.from_dict(read_json(path))


def write_pmf(path: PathLike, pmf: Pmf) -> None:
    write_json(path, pmf.to_dict())


def read_channel(path: PathLike) -> ChannelMatrix:
    return ChannelMatrix.from_dict(read_json(path))


def write_channel(path: PathLike, channel: ChannelMatrix) -> None:
    write_json(path, channel.to_dict())


def read_mechanism(path: PathLike) -> Mechanism:
    """Mechanism JSON, or a bare channel JSON (read as DPS)."""
    data = read_json(path)
    if "kind" in data:
        return Mechanism.from_dict(data)
    return Mechanism.dps(ChannelMatrix.from_dict(data))


def write_mechanism(path: PathLike, mechanism: Mechanism) -> None:
    write_json(path, mechanism.to_dict())


def write_report(path: PathLike, report: ShapingReport) -> None:
    write_json(path, report.to_dict())


def _check_header(header, expected, path):
    if header is None or [h.strip() for h in header] != list(expected):
        raise ValueError(f"{path}: expected CSV header {','.join(expected)}, got {header}")


def read_stream(path: PathLike, slot_duration: float = 1.0, alphabet: PacketAlphabet = None) -> PacketStream:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), ("slot", "bytes"), path)
        rows = [(int(r[0]), int(r[1])) for r in reader if r]
    if rows and [r[0] for r in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: slot column must run 0, 1, 2, ...")
    return PacketStream(np.array([r[1] for r in rows], dtype=np.int64), slot_duration, alphabet)


def write_stream(path: PathLike, stream: PacketStream) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "bytes"])
        writer.writerows(enumerate(stream.slots.tolist()))


def read_raw_trace(path: PathLike) -> RawTrace:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), ("timestamp_s", "size_bytes"), path)
        records = [(float(r[0]), int(r[1])) for r in reader if r]
    return RawTrace.from_records(records)


def write_raw_trace(path: PathLike, trace: RawTrace) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp_s", "size_bytes"])
        writer.writerows(zip((repr(float(t)) for t in trace.timestamps), trace.sizes.tolist()))


def write_rows(path: PathLike, columns, rows) -> None:
    """CSV with a fixed column order; missing keys are left blank."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k, "")) for k in columns})


def _cell(value):
    if isinstance(value, float):
        return "inf" if math.isinf(value) and value > 0 else repr(value)
    return value
