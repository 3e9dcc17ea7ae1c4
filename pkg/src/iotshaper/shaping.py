"""Shaping mechanisms and the FCFS queue that turns arrivals into departures.

Every mechanism is memoryless: the departure size in slot ``t`` depends only on
the arrival size in slot ``t``.  Real bytes leave the queue first; when the
sampled departure size exceeds the backlog the remainder is dummy padding.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .core import (
    AlphabetError,
    ChannelMatrix,
    PacketAlphabet,
    PacketStream,
    Pmf,
    PrivacyBudget,
    check_stability,
    input_byte_rate,
    pps_channel,
    pst_channel,
)


_MECHANISM_SALT = 0x5348_4150


class MechanismKind(str, Enum):
    DPS = "dps"
    PST = "pst"
    PPS = "pps"
    PST_STAR = "pst-star"
    PPS_STAR = "pps-star"
    PST0 = "pst0"
    PPS0 = "pps0"

    @classmethod
    def parse(cls, value) -> "MechanismKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"pst*": "pst-star", "pps*": "pps-star", "dps0": "pst0"}
        return cls(aliases.get(key, key))

    @property
    def preserves_silence(self) -> bool:
        """True for kinds that send nothing in a slot without an arrival."""
        return self in (MechanismKind.PPS, MechanismKind.PPS_STAR, MechanismKind.PPS0)


def _point_mass(alphabet: PacketAlphabet, size: int) -> Pmf:
    probs = np.zeros(len(alphabet))
    probs[alphabet.index(size)] = 1.0
    return Pmf(alphabet, probs)


@dataclass(frozen=True, eq=False)
class Mechanism:
    """A memoryless shaper.

    Exactly one of ``channel`` (DPS), ``output_pmf`` (PST/PPS and the pad-only
    kinds) or ``constant_size`` (starred kinds) carries the policy.  The seed
    is stored rather than a live generator, so every run of the same
    mechanism is reproducible and instances can be shared between threads.
    """

    kind: MechanismKind
    input_alphabet: PacketAlphabet
    channel: Optional[ChannelMatrix] = None
    output_pmf: Optional[Pmf] = None
    constant_size: Optional[int] = None
    rng_seed: int = 0
    _effective: ChannelMatrix = field(init=False, repr=False)

    def __post_init__(self):
        kind = MechanismKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        if not isinstance(self.input_alphabet, PacketAlphabet):
            object.__setattr__(self, "input_alphabet", PacketAlphabet(self.input_alphabet))
        A = self.input_alphabet
        if kind is MechanismKind.DPS:
            if self.channel is None:
                raise ValueError("DPS needs a channel")
            if self.channel.input_alphabet != A:
                raise AlphabetError("channel input alphabet differs from the mechanism input alphabet")
            eff = self.channel
        elif kind in (MechanismKind.PST_STAR, MechanismKind.PPS_STAR):
            if self.constant_size is None or int(self.constant_size) <= 0:
                raise ValueError("starred mechanisms need a positive constant_size")
            size = int(self.constant_size)
            object.__setattr__(self, "constant_size", size)
            out = _point_mass(A.union([size]), size)
            eff = pst_channel(A, out) if kind is MechanismKind.PST_STAR else pps_channel(A, out)
        else:
            pmf = self.output_pmf
            if kind in (MechanismKind.PST0, MechanismKind.PPS0) and pmf is None:
                pmf = _point_mass(A, A.largest)
                object.__setattr__(self, "output_pmf", pmf)
            if pmf is None:
                raise ValueError(f"{kind.value} needs an output_pmf")
            silent = kind in (MechanismKind.PPS, MechanismKind.PPS0)
            eff = pps_channel(A, pmf) if silent else pst_channel(A, pmf)
        object.__setattr__(self, "rng_seed", int(self.rng_seed))
        object.__setattr__(self, "_effective", eff)

    # constructors -----------------------------------------------------------

    @classmethod
    def dps(cls, channel: ChannelMatrix, rng_seed: int = 0) -> "Mechanism":
        return cls(MechanismKind.DPS, channel.input_alphabet, channel=channel, rng_seed=rng_seed)

    @classmethod
    def pst(cls, input_alphabet: PacketAlphabet, output_pmf: Pmf, rng_seed: int = 0) -> "Mechanism":
        return cls(MechanismKind.PST, input_alphabet, output_pmf=output_pmf, rng_seed=rng_seed)

    @classmethod
    def pps(cls, input_alphabet: PacketAlphabet, output_pmf: Pmf, rng_seed: int = 0) -> "Mechanism":
        return cls(MechanismKind.PPS, input_alphabet, output_pmf=output_pmf, rng_seed=rng_seed)

    @classmethod
    def pst_star(cls, input_alphabet: PacketAlphabet, size: int, rng_seed: int = 0) -> "Mechanism":
        return cls(MechanismKind.PST_STAR, input_alphabet, constant_size=size, rng_seed=rng_seed)

    @classmethod
    def pps_star(cls, input_alphabet: PacketAlphabet, size: int, rng_seed: int = 0) -> "Mechanism":
        return cls(MechanismKind.PPS_STAR, input_alphabet, constant_size=size, rng_seed=rng_seed)

    @classmethod
    def pst0(cls, input_alphabet: PacketAlphabet, rng_seed: int = 0) -> "Mechanism":
        return cls(MechanismKind.PST0, input_alphabet, rng_seed=rng_seed)

    @classmethod
    def pps0(cls, input_alphabet: PacketAlphabet, rng_seed: int = 0) -> "Mechanism":
        return cls(MechanismKind.PPS0, input_alphabet, rng_seed=rng_seed)

    def with_seed(self, rng_seed: int) -> "Mechanism":
        return Mechanism(self.kind, self.input_alphabet, self.channel, self.output_pmf, self.constant_size, rng_seed)

    # views --------------------------------------------------------------------

    def effective_channel(self) -> ChannelMatrix:
        """The channel ``P(D_t | A_t)`` this mechanism realises."""
        return self._effective

    @property
    def output_alphabet(self) -> PacketAlphabet:
        return self._effective.output_alphabet

    def output_byte_rate(self, lam: Pmf) -> float:
        return float(lam.probs @ self._effective.rows @ self.output_alphabet.sizes)

    def new_rng(self) -> np.random.Generator:
        # salted so a mechanism and a synthetic stream built from the same seed draw independent uniforms
        return np.random.default_rng([self.rng_seed & (2 ** 64 - 1), _MECHANISM_SALT])

    def to_dict(self) -> dict:
        data = {"kind": self.kind.value, "input_sizes": self.input_alphabet.sizes.tolist(), "rng_seed": self.rng_seed}
        if self.channel is not None:
            data["channel"] = self.channel.to_dict()
        if self.output_pmf is not None:
            data["output_pmf"] = self.output_pmf.to_dict()
        if self.constant_size is not None:
            data["constant_size"] = self.constant_size
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "Mechanism":
        kind = MechanismKind.parse(data["kind"])
        channel = ChannelMatrix.from_dict(data["channel"]) if "channel" in data else None
        if "input_sizes" in data:
            alphabet = PacketAlphabet(data["input_sizes"])
        elif channel is not None:
            alphabet = channel.input_alphabet
        else:
            raise ValueError("mechanism JSON needs input_sizes")
        pmf = Pmf.from_dict(data["output_pmf"]) if "output_pmf" in data else None
        return cls(kind, alphabet, channel=channel, output_pmf=pmf,
                   constant_size=data.get("constant_size"), rng_seed=int(data.get("rng_seed", 0)))


def _row_cdfs(rows: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(rows, axis=1)
    # pin the tail to exactly 1 so that u in [0, 1) can never fall off the end
    for r in range(rows.shape[0]):
        last = np.flatnonzero(rows[r] > 0)[-1]
        cdf[r, last:] = 1.0
    return cdf


def sample_departure_size(mechanism: Mechanism, arrival_size: int, rng: np.random.Generator) -> int:
    """Draw ``D_t`` given ``A_t = arrival_size`` by inverse-CDF sampling on the channel row."""
    if arrival_size not in mechanism.input_alphabet:
        raise AlphabetError(f"arrival size {arrival_size} not in {mechanism.input_alphabet}")
    row = mechanism.input_alphabet.index(int(arrival_size))
    channel = mechanism.effective_channel()
    cdf = _row_cdfs(channel.rows[row:row + 1])[0]
    j = int(np.searchsorted(cdf, rng.random(), side="right"))
    return int(channel.output_alphabet.sizes[j])


def sample_departures(mechanism: Mechanism, arrivals: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`sample_departure_size`, one uniform draw per slot."""
    rows = mechanism.input_alphabet.indices(arrivals)
    channel = mechanism.effective_channel()
    cdf = _row_cdfs(channel.rows)
    u = rng.random(rows.size)
    pos = np.zeros(rows.size, dtype=np.int64)
    for r in range(cdf.shape[0]):
        mask = rows == r
        if mask.any():
            pos[mask] = np.searchsorted(cdf[r], u[mask], side="right")
    return channel.output_alphabet.sizes[pos]


def lindley_step(q_prev: int, arrival: int, departure: int) -> int:
    return max(q_prev + arrival - departure, 0)


def make_pad_only_channel(alphabet: PacketAlphabet, budget: PrivacyBudget) -> ChannelMatrix:
    """Pad-only channel (``D_t >= A_t``) at a given budget.

    A finite timing budget forces every row onto the largest size; a finite
    size budget alone leaves the null row free (the PPS0 shape); no budget
    admits the identity.
    """
    n = len(alphabet)
    if math.isfinite(budget.eps_timing):
        rows = np.zeros((n, n))
        rows[:, -1] = 1.0
    elif math.isfinite(budget.eps_size):
        rows = np.zeros((n, n))
        rows[0, 0] = 1.0
        rows[1:, -1] = 1.0
    else:
        rows = np.eye(n)
    return ChannelMatrix(alphabet, alphabet, rows)


# ----------------------------------------------------------------------------
# Queue engines
# ----------------------------------------------------------------------------

@dataclass
class QueueState:
    """FIFO of partially transmitted packets: entries are ``[packet_id, remaining_bytes, arrival_slot]``."""

    backlog_bytes: int = 0
    entries: deque = field(default_factory=deque)


class FcfsQueue:
    """Slot-by-slot FCFS queue with padding, one packet operation at a time."""

    def __init__(self):
        self.state = QueueState()
        self._next_id = 0

    def enqueue(self, size: int, slot: int) -> None:
        if size > 0:
            self.state.entries.append([self._next_id, int(size), slot])
            self.state.backlog_bytes += int(size)
            self._next_id += 1

    def transmit(self, departure: int, slot: int):
        """Send ``departure`` bytes; returns (dummy bytes, [(packet_id, arrival_slot, finish_slot)])."""
        dummy = max(departure - self.state.backlog_bytes, 0)
        budget = departure - dummy
        done = []
        entries = self.state.entries
        while budget > 0:
            head = entries[0]
            take = min(budget, head[1])
            head[1] -= take
            budget -= take
            self.state.backlog_bytes -= take
            if head[1] == 0:
                entries.popleft()
                done.append((head[0], head[2], slot))
        return dummy, done


@dataclass(frozen=True)
class ShapingReport:
    avg_queue_bytes: float
    avg_delay_slots: float
    empirical_b_out: float
    empirical_rho: float
    dummy_bytes_total: int
    slots_simulated: int
    stable_config: bool
    empirical_b_in: float = 0.0
    packets_delivered: int = 0
    packets_pending: int = 0
    final_backlog_bytes: int = 0

    def to_dict(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            if isinstance(value, float) and not math.isfinite(value):
                value = str(value)
            out[key] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ShapingReport":
        kwargs = {k: (float(v) if isinstance(v, str) else v) for k, v in data.items()}
        return cls(**kwargs)


def _report(arrivals, departures, backlog, dummy, delays, pending, stable) -> ShapingReport:
    T = int(arrivals.size)
    if T == 0:
        return ShapingReport(0.0, 0.0, 0.0, 0.0, 0, 0, stable)
    total_in = int(arrivals.sum())
    total_out = int(departures.sum())
    if total_out:
        rho = total_in / total_out
    else:
        rho = 0.0 if total_in == 0 else math.inf
    return ShapingReport(
        avg_queue_bytes=float(backlog.mean()),
        avg_delay_slots=float(np.mean(delays)) if len(delays) else 0.0,
        empirical_b_out=total_out / T,
        empirical_rho=rho,
        dummy_bytes_total=int(dummy),
        slots_simulated=T,
        stable_config=stable,
        empirical_b_in=total_in / T,
        packets_delivered=int(len(delays)),
        packets_pending=int(pending),
        final_backlog_bytes=int(backlog[-1]),
    )


def _run_fcfs(arrivals: np.ndarray, departures: np.ndarray):
    queue = FcfsQueue()
    T = arrivals.size
    backlog = np.zeros(T, dtype=np.int64)
    dummy_total = 0
    delays = []
    for t in range(T):
        queue.enqueue(int(arrivals[t]), t)
        dummy, done = queue.transmit(int(departures[t]), t)
        dummy_total += dummy
        delays.extend(finish - arrived for _, arrived, finish in done)
        backlog[t] = queue.state.backlog_bytes
    return backlog, dummy_total, np.asarray(delays, dtype=np.int64), len(queue.state.entries)


def _run_vectorized(arrivals: np.ndarray, departures: np.ndarray):
    # Q_t = S_t - min(0, min_{s<=t} S_s) with S the running sum of A - D
    steps = arrivals - departures
    walk = np.cumsum(steps)
    backlog = walk - np.minimum(np.minimum.accumulate(walk), 0)
    prev = np.concatenate([[0], backlog[:-1]])
    dummy_total = int((backlog - (prev + steps)).sum())
    cum_in = np.cumsum(arrivals)
    delivered = cum_in - backlog  # real bytes gone by the end of each slot
    slots = np.flatnonzero(arrivals > 0)
    finish = np.searchsorted(delivered, cum_in[slots], side="left")
    done = finish < arrivals.size
    delays = finish[done] - slots[done]
    return backlog, dummy_total, delays, int((~done).sum())


def shape_stream(stream: PacketStream, mechanism: Mechanism, *, engine: str = "vectorized",
                 lam: Optional[Pmf] = None):
    """Run ``stream`` through ``mechanism`` starting from an empty queue.

    Parameters
    ----------
    stream : PacketStream
        Arrival sizes; every value must belong to the mechanism's input alphabet.
    mechanism : Mechanism
        Its ``rng_seed`` seeds a fresh generator for this run.
    engine : {"vectorized", "fcfs"}
        ``"fcfs"`` walks an explicit per-packet FIFO slot by slot;
        ``"vectorized"`` uses the closed form of the Lindley recursion.  Both
        produce identical output.
    lam : Pmf, optional
        Input law used for the ``stable_config`` flag; defaults to the
        empirical law of ``stream``.

    Returns
    -------
    (PacketStream, ShapingReport)
    """
    arrivals = np.asarray(stream.slots, dtype=np.int64)
    if arrivals.size:
        mechanism.input_alphabet.indices(arrivals)
    departures = sample_departures(mechanism, arrivals, mechanism.new_rng()).astype(np.int64)
    if engine == "fcfs":
        backlog, dummy, delays, pending = _run_fcfs(arrivals, departures)
    elif engine == "vectorized":
        backlog, dummy, delays, pending = _run_vectorized(arrivals, departures)
    else:
        raise ValueError(f"unknown engine {engine!r}")

    if lam is None and arrivals.size:
        counts = np.bincount(mechanism.input_alphabet.indices(arrivals), minlength=len(mechanism.input_alphabet))
        lam = Pmf(mechanism.input_alphabet, counts / counts.sum())
    stable = check_stability(input_byte_rate(lam), mechanism.output_byte_rate(lam)) if lam is not None else True

    output = PacketStream(departures, stream.slot_duration, mechanism.output_alphabet)
    return output, _report(arrivals, departures, backlog, dummy, delays, pending, stable)
