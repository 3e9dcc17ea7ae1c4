"""Trace ingestion, PMF estimation, Zipf synthesis and multi-device merging."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import AlphabetError, PacketAlphabet, PacketStream, Pmf, ShaperError, arrival_rate


class SaturationError(ShaperError):
    """Merged arrival rates reach one packet per slot."""


class CollisionError(ShaperError):
    """Two devices share an event packet size."""


class AlphabetExtensionWarning(UserWarning):
    """Aggregated slot sizes fell outside the declared alphabet."""


@dataclass(frozen=True, eq=False)
class RawTrace:
    """Timestamped packets: ``timestamps`` in seconds, ``sizes`` in bytes."""

    timestamps: np.ndarray
    sizes: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).ravel()
        sz = np.asarray(self.sizes).ravel()
        if ts.shape != sz.shape:
            raise ValueError("timestamps and sizes must have equal length")
        if sz.size and (sz.dtype.kind == "f" and np.any(sz != np.round(sz))):
            raise ValueError("packet sizes must be whole bytes")
        sz = sz.astype(np.int64)
        if np.any(~np.isfinite(ts)):
            raise ValueError("timestamps must be finite")
        if np.any(np.diff(ts) < 0):
            raise ValueError("timestamps must be nondecreasing")
        if np.any(sz <= 0):
            raise ValueError("packet sizes must be positive")
        ts.setflags(write=False)
        sz.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "sizes", sz)

    @classmethod
    def from_records(cls, records: Iterable[tuple]) -> "RawTrace":
        records = list(records)
        if not records:
            return cls(np.zeros(0), np.zeros(0, dtype=np.int64))
        ts, sz = zip(*records)
        return cls(np.array(ts, dtype=float), np.array(sz))

    def __len__(self) -> int:
        return int(self.sizes.size)


def discretize(trace: RawTrace, slot_seconds: float = 1.0, *, whitelist: Optional[Iterable[int]] = None,
               alphabet: Optional[PacketAlphabet] = None) -> PacketStream:
    """Bin a trace into slots starting at its first timestamp.

    Packets sharing a slot are summed.  ``whitelist`` keeps only the listed
    packet sizes (event packets).  When ``alphabet`` is given, aggregate sizes
    outside it extend the alphabet with an :class:`AlphabetExtensionWarning`.
    """
    if not slot_seconds > 0:
        raise ValueError("slot_seconds must be positive")
    ts, sz = trace.timestamps, trace.sizes
    if whitelist is not None:
        keep = np.isin(sz, np.fromiter(whitelist, dtype=np.int64))
        ts, sz = ts[keep], sz[keep]
    if sz.size == 0:
        return PacketStream(np.zeros(0, dtype=np.int64), slot_seconds, alphabet)
    # small epsilon keeps timestamps that sit on a boundary from slipping down a slot
    slot = np.floor((ts - ts[0]) / slot_seconds + 1e-9).astype(np.int64)
    slots = np.bincount(slot, weights=sz, minlength=int(slot[-1]) + 1).astype(np.int64)
    if alphabet is not None:
        outside = np.setdiff1d(np.unique(slots), alphabet.sizes)
        if outside.size:
            warnings.warn(f"aggregate sizes {outside.tolist()} added to the alphabet", AlphabetExtensionWarning,
                          stacklevel=2)
            alphabet = alphabet.union(outside)
    return PacketStream(slots, slot_seconds, alphabet)


def estimate_pmf(stream: PacketStream, alphabet: Optional[PacketAlphabet] = None) -> Pmf:
    """Empirical slot-size frequencies, zero slots included."""
    if len(stream) == 0:
        raise ValueError("cannot estimate a PMF from an empty stream")
    if alphabet is None:
        alphabet = stream.alphabet
    if alphabet is None:
        values = np.union1d([0], stream.slots)
        if values.size < 2:
            raise AlphabetError("stream holds only null slots; an alphabet needs at least one event size")
        alphabet = PacketAlphabet(values)
    counts = np.bincount(alphabet.indices(stream.slots), minlength=len(alphabet))
    return Pmf(alphabet, counts / counts.sum())


def zipf_pmf(alphabet: PacketAlphabet, s: float) -> Pmf:
    """Zipf law where size ``a_i`` has rank ``i + 1`` (so the null size is most likely)."""
    if not s > 0:
        raise ValueError("Zipf exponent must be positive")
    ranks = np.arange(1, len(alphabet) + 1, dtype=float)
    if math.isinf(s):
        weights = (ranks == 1).astype(float)
    else:
        # work in logs so large exponents underflow cleanly instead of dividing 0 by 0
        logw = -s * np.log(ranks)
        weights = np.exp(logw - logw.max())
    return Pmf(alphabet, weights / weights.sum())


def synthesize_stream(pmf: Pmf, horizon: int, seed: int = 0, slot_duration: float = 1.0) -> PacketStream:
    """``horizon`` i.i.d. draws from ``pmf``."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    slots = rng.choice(pmf.sizes, size=horizon, p=pmf.probs)
    return PacketStream(slots, slot_duration, pmf.alphabet)


def synthesize_bursty_stream(pmf: Pmf, horizon: int, seed: int = 0, stickiness: float = 0.9,
                             slot_duration: float = 1.0) -> PacketStream:
    """Correlated stream with marginal ``pmf``.

    Each slot repeats the previous size with probability ``stickiness`` and
    otherwise draws afresh from ``pmf``; the stationary law of this chain is
    ``pmf`` itself, so only the burst structure differs from the i.i.d. case.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not 0 <= stickiness < 1:
        raise ValueError("stickiness must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    fresh = rng.choice(pmf.sizes, size=horizon, p=pmf.probs)
    redraw = rng.random(horizon) >= stickiness
    redraw[0] = True
    # each slot copies the latest slot at or before it that redrew
    source = np.maximum.accumulate(np.where(redraw, np.arange(horizon), 0))
    return PacketStream(fresh[source], slot_duration, pmf.alphabet)


def merge_pmfs(entries: Sequence[Pmf]) -> Pmf:
    """PMF of the aggregate of independent devices that never collide in a slot.

    Event probabilities are carried over unchanged and the null probability
    absorbs the rest, so the merged arrival rate is the sum of the inputs'.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("nothing to merge")
    if len(entries) == 1:
        return entries[0]
    events = {}
    for pmf in entries:
        for size, prob in zip(pmf.sizes[1:].tolist(), pmf.probs[1:].tolist()):
            if size in events:
                raise CollisionError(f"event size {size} B appears in more than one device")
            events[size] = prob
    total_rate = math.fsum(arrival_rate(p) for p in entries)
    if total_rate >= 1.0:
        raise SaturationError(f"summed arrival rate {total_rate:.6g} >= 1 packet per slot")
    sizes = sorted(events)
    probs = [1.0 - total_rate] + [events[s] for s in sizes]
    return Pmf(PacketAlphabet([0] + sizes), probs)


class DevicePmfSet(Mapping):
    """Named device PMFs; every entry must include the null size."""

    def __init__(self, pmfs: Mapping[str, Pmf]):
        for name, pmf in pmfs.items():
            if not isinstance(pmf, Pmf):
                raise TypeError(f"{name}: expected a Pmf")
        self._pmfs = dict(pmfs)

    def __getitem__(self, key: str) -> Pmf:
        return self._pmfs[key]

    def __iter__(self):
        return iter(self._pmfs)

    def __len__(self) -> int:
        return len(self._pmfs)

    def merged(self, names: Sequence[str]) -> Pmf:
        return merge_pmfs([self._pmfs[n] for n in names])


# Smart-home reference devices (sleep sensor, camera, smart plug).
DEVICE_PMFS = DevicePmfSet({
    "sleep": Pmf.from_sizes([0, 93, 1117], [0.91, 0.08, 0.01]),
    "camera": Pmf.from_sizes([0, 142, 270], [0.85, 0.14, 0.01]),
    "switch": Pmf.from_sizes([0, 40, 1500], [0.69, 0.21, 0.10]),
})
