"""Domain types and closed-form rate formulas shared by every module.

All types here are immutable after construction: array fields are stored as
read-only numpy arrays, so instances can be shared across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

PROB_TOL = 1e-9


class ShaperError(Exception):
    """Base class for errors raised by this package."""


class AlphabetError(ShaperError, ValueError):
    """A size is outside the alphabet it was declared against."""


class InstabilityError(ShaperError):
    """The queue has non-negative drift, so no stationary regime exists."""


def _readonly(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _as_int_sizes(values: Iterable) -> np.ndarray:
    raw = np.asarray(list(values))
    if raw.size and raw.dtype.kind == "f":
        if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
            raise AlphabetError(f"packet sizes must be whole bytes, got {raw.tolist()}")
    elif raw.size and raw.dtype.kind not in "iu":
        raise AlphabetError(f"packet sizes must be integers, got {raw.tolist()}")
    return _readonly(raw, np.int64)


@dataclass(frozen=True, eq=False)
class PacketAlphabet:
    """Ordered packet sizes in bytes; index 0 is the null (no packet) size."""

    sizes: np.ndarray

    def __post_init__(self):
        sizes = _as_int_sizes(self.sizes)
        if sizes.ndim != 1 or sizes.size < 2:
            raise AlphabetError("an alphabet needs the null size and at least one event size")
        if sizes[0] != 0:
            raise AlphabetError(f"first size must be 0, got {int(sizes[0])}")
        if np.any(np.diff(sizes) <= 0):
            raise AlphabetError(f"sizes must be strictly increasing: {sizes.tolist()}")
        object.__setattr__(self, "sizes", sizes)

    def __len__(self) -> int:
        return int(self.sizes.size)

    def __eq__(self, other) -> bool:
        return isinstance(other, PacketAlphabet) and np.array_equal(self.sizes, other.sizes)

    def __hash__(self) -> int:
        return hash(tuple(self.sizes.tolist()))

    def __repr__(self) -> str:
        return f"PacketAlphabet({self.sizes.tolist()})"

    @property
    def largest(self) -> int:
        return int(self.sizes[-1])

    def index(self, size: int) -> int:
        pos = int(np.searchsorted(self.sizes, size))
        if pos >= self.sizes.size or self.sizes[pos] != size:
            raise AlphabetError(f"size {size} not in alphabet {self.sizes.tolist()}")
        return pos

    def indices(self, values: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`index`."""
        values = np.asarray(values, dtype=np.int64)
        pos = np.searchsorted(self.sizes, values)
        pos = np.minimum(pos, self.sizes.size - 1)
        bad = self.sizes[pos] != values
        if np.any(bad):
            offenders = np.unique(values[bad])[:5].tolist()
            raise AlphabetError(f"sizes {offenders} not in alphabet {self.sizes.tolist()}")
        return pos

    def __contains__(self, size) -> bool:
        try:
            self.index(int(size))
        except AlphabetError:
            return False
        return True

    def union(self, other: "PacketAlphabet | Iterable[int]") -> "PacketAlphabet":
        extra = other.sizes if isinstance(other, PacketAlphabet) else list(other)
        return PacketAlphabet(np.union1d(self.sizes, np.asarray(extra, dtype=np.int64)))


def _check_prob_vector(probs: np.ndarray, what: str) -> np.ndarray:
    if np.any(~np.isfinite(probs)):
        raise ValueError(f"{what} contains non-finite values")
    if np.any(probs < -PROB_TOL) or np.any(probs > 1 + PROB_TOL):
        raise ValueError(f"{what} entries must lie in [0, 1]: {probs.tolist()}")
    total = probs.sum(axis=-1)
    if np.any(np.abs(total - 1.0) > PROB_TOL):
        raise ValueError(f"{what} must sum to 1 (got {np.atleast_1d(total).tolist()})")
    return np.clip(probs, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Pmf:
    """Probability mass function over a packet alphabet."""

    alphabet: PacketAlphabet
    probs: np.ndarray

    def __post_init__(self):
        if not isinstance(self.alphabet, PacketAlphabet):
            object.__setattr__(self, "alphabet", PacketAlphabet(self.alphabet))
        probs = np.asarray(self.probs, dtype=float)
        if probs.shape != (len(self.alphabet),):
            raise ValueError(
                f"need {len(self.alphabet)} probabilities for {self.alphabet}, got shape {probs.shape}"
            )
        object.__setattr__(self, "probs", _readonly(_check_prob_vector(probs, "pmf"), float))

    @classmethod
    def from_sizes(cls, sizes: Sequence[int], probs: Sequence[float]) -> "Pmf":
        return cls(PacketAlphabet(sizes), probs)

    @property
    def sizes(self) -> np.ndarray:
        return self.alphabet.sizes

    def __repr__(self) -> str:
        return f"Pmf(sizes={self.sizes.tolist()}, probs={np.round(self.probs, 6).tolist()})"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Pmf)
            and self.alphabet == other.alphabet
            and np.allclose(self.probs, other.probs, atol=PROB_TOL, rtol=0)
        )

    def to_dict(self) -> dict:
        return {"sizes": self.sizes.tolist(), "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Pmf":
        return cls.from_sizes(data["sizes"], data["probs"])


@dataclass(frozen=True, eq=False)
class ChannelMatrix:
    """Right-stochastic matrix ``rows[i, j] = P(D = d_j | A = a_i)``."""

    input_alphabet: PacketAlphabet
    output_alphabet: PacketAlphabet
    rows: np.ndarray

    def __post_init__(self):
        for name in ("input_alphabet", "output_alphabet"):
            value = getattr(self, name)
            if not isinstance(value, PacketAlphabet):
                object.__setattr__(self, name, PacketAlphabet(value))
        rows = np.asarray(self.rows, dtype=float)
        shape = (len(self.input_alphabet), len(self.output_alphabet))
        if rows.shape != shape:
            raise ValueError(f"channel must have shape {shape}, got {rows.shape}")
        if self.output_alphabet.largest < self.input_alphabet.largest:
            raise AlphabetError(
                "largest output size must cover the largest input size "
                f"({self.output_alphabet.largest} < {self.input_alphabet.largest})"
            )
        object.__setattr__(self, "rows", _readonly(_check_prob_vector(rows, "channel rows"), float))

    @classmethod
    def identity(cls, alphabet: PacketAlphabet) -> "ChannelMatrix":
        return cls(alphabet, alphabet, np.eye(len(alphabet)))

    @classmethod
    def rank_one(cls, input_alphabet: PacketAlphabet, output: Pmf) -> "ChannelMatrix":
        """Every row equal to ``output.probs`` (input-independent output)."""
        rows = np.tile(output.probs, (len(input_alphabet), 1))
        return cls(input_alphabet, output.alphabet, rows)

    @property
    def shape(self) -> tuple:
        return self.rows.shape

    def output_pmf(self, lam: Pmf) -> Pmf:
        """Law of the departure size when arrivals follow ``lam``."""
        _require_same(lam.alphabet, self.input_alphabet)
        return Pmf(self.output_alphabet, lam.probs @ self.rows)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ChannelMatrix)
            and self.input_alphabet == other.input_alphabet
            and self.output_alphabet == other.output_alphabet
            and np.allclose(self.rows, other.rows, atol=PROB_TOL, rtol=0)
        )

    def __repr__(self) -> str:
        return (
            f"ChannelMatrix(input={self.input_alphabet.sizes.tolist()}, "
            f"output={self.output_alphabet.sizes.tolist()}, rows={np.round(self.rows, 6).tolist()})"
        )

    def to_dict(self) -> dict:
        return {
            "input_sizes": self.input_alphabet.sizes.tolist(),
            "output_sizes": self.output_alphabet.sizes.tolist(),
            "rows": self.rows.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelMatrix":
        return cls(PacketAlphabet(data["input_sizes"]), PacketAlphabet(data["output_sizes"]), data["rows"])


@dataclass(frozen=True, eq=False)
class PacketStream:
    """Slot-indexed packet sizes; 0 means no packet in that slot.

    ``slot_duration`` (seconds) is carried as metadata only.
    """

    slots: np.ndarray
    slot_duration: float = 1.0
    alphabet: Optional[PacketAlphabet] = None

    def __post_init__(self):
        slots = np.asarray(self.slots)
        if slots.size == 0:
            slots = np.zeros(0, dtype=np.int64)
        slots = _as_int_sizes(slots.ravel())
        if np.any(slots < 0):
            raise ValueError("slot sizes must be non-negative")
        if not self.slot_duration > 0:
            raise ValueError("slot_duration must be positive")
        if self.alphabet is not None:
            if not isinstance(self.alphabet, PacketAlphabet):
                object.__setattr__(self, "alphabet", PacketAlphabet(self.alphabet))
            if slots.size:
                self.alphabet.indices(slots)
        object.__setattr__(self, "slots", slots)

    def __len__(self) -> int:
        return int(self.slots.size)

    @property
    def total_bytes(self) -> int:
        return int(self.slots.sum())

    @property
    def arrival_slots(self) -> np.ndarray:
        """Indices of slots carrying an event packet (0-based)."""
        return np.flatnonzero(self.slots > 0)


@dataclass(frozen=True)
class PrivacyBudget:
    """Event-level budgets for packet sizes and packet timing.

    ``math.inf`` means the corresponding kind of privacy is not required.
    """

    eps_size: float
    eps_timing: float

    def __post_init__(self):
        for name in ("eps_size", "eps_timing"):
            value = float(getattr(self, name))
            if math.isnan(value) or value < 0:
                raise ValueError(f"{name} must be >= 0 (or inf), got {value}")
            object.__setattr__(self, name, value)

    @classmethod
    def both(cls, eps: float) -> "PrivacyBudget":
        return cls(eps, eps)

    @property
    def ldp_level(self) -> float:
        """LDP level the channel must meet: ``max(eps_size, eps_timing / 2)``."""
        return max(self.eps_size, self.eps_timing / 2)

    def to_dict(self) -> dict:
        return {"eps_size": _jsonable_eps(self.eps_size), "eps_timing": _jsonable_eps(self.eps_timing)}


def _jsonable_eps(value: float):
    return "inf" if math.isinf(value) else value


def parse_eps(value) -> float:
    """Accept floats or the strings ``inf``/``infinity``."""
    if isinstance(value, str) and value.strip().lower() in {"inf", "infinity", "+inf"}:
        return math.inf
    return float(value)


def _require_same(a: PacketAlphabet, b: PacketAlphabet):
    if a != b:
        raise AlphabetError(f"alphabet mismatch: {a.sizes.tolist()} vs {b.sizes.tolist()}")


def pst_channel(input_alphabet: PacketAlphabet, output: Pmf) -> ChannelMatrix:
    """Channel of a PST shaper: every input row equals ``output``."""
    return ChannelMatrix.rank_one(input_alphabet, output)


def pps_channel(input_alphabet: PacketAlphabet, output: Pmf) -> ChannelMatrix:
    """Channel of a PPS shaper: null input maps to 0, events draw from ``output``."""
    rows = np.tile(output.probs, (len(input_alphabet), 1))
    rows[0] = 0.0
    rows[0, 0] = 1.0
    return ChannelMatrix(input_alphabet, output.alphabet, rows)


# ----------------------------------------------------------------------------
# Rate formulas
# ----------------------------------------------------------------------------

def arrival_rate(pmf: Pmf) -> float:
    """Probability that a slot carries an event packet, ``1 - lambda_0``."""
    return float(1.0 - pmf.probs[0])


def input_byte_rate(pmf: Pmf) -> float:
    """Expected input bytes per slot."""
    return float(pmf.probs @ pmf.sizes)


def output_byte_rate(variant: str, *, lam: Optional[Pmf] = None, channel: Optional[ChannelMatrix] = None,
                     output_pmf: Optional[Pmf] = None) -> float:
    """Expected output bytes per slot of a memoryless shaper.

    Parameters
    ----------
    variant : {"dps", "pst", "pps"}
    lam : Pmf
        Input size distribution (required for ``dps`` and ``pps``).
    channel : ChannelMatrix
        Channel of a DPS shaper.
    output_pmf : Pmf
        Output size distribution of a PST or PPS shaper.
    """
    variant = variant.lower()
    if variant == "dps":
        if lam is None or channel is None:
            raise TypeError("dps needs lam and channel")
        _require_same(lam.alphabet, channel.input_alphabet)
        return float(lam.probs @ channel.rows @ channel.output_alphabet.sizes)
    if variant == "pst":
        if output_pmf is None:
            raise TypeError("pst needs output_pmf")
        return float(output_pmf.probs @ output_pmf.sizes)
    if variant == "pps":
        if lam is None or output_pmf is None:
            raise TypeError("pps needs lam and output_pmf")
        return arrival_rate(lam) * float(output_pmf.probs @ output_pmf.sizes)
    raise ValueError(f"unknown variant {variant!r}")


def transmission_efficiency(b_in: float, b_out: float) -> float:
    if b_out == 0:
        raise ZeroDivisionError("transmission efficiency is undefined for a zero output rate")
    return b_in / b_out


def check_stability(b_in: float, b_out: float) -> bool:
    """True iff the shaper drains faster than traffic arrives."""
    return b_in < b_out
