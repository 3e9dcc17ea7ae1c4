"""Local-DP checks on channels and exhaustive event-level DP audits on short streams."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .core import ChannelMatrix, PrivacyBudget, ShaperError

LOG_TOL = 1e-9
ENUMERATION_BUDGET = 10 ** 7


class EnumerationBudgetError(ShaperError):
    """The exhaustive audit would enumerate too many terms."""


class AdjacencyKind(str, Enum):
    PACKET_SIZE = "packet_size"
    PACKET_TIMING = "packet_timing"


def _log_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """``ln(num/den)`` with 0/0 -> nan (excluded) and x/0 -> +inf."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(num) - np.log(den)
    out[(num == 0) & (den == 0)] = np.nan
    return out


def _argmax_finite_first(values: np.ndarray):
    if np.all(np.isnan(values)):
        return 0.0, None
    flat = np.nanargmax(values)
    idx = np.unravel_index(flat, values.shape)
    return float(values[idx]), tuple(int(i) for i in idx)


@dataclass(frozen=True)
class LdpAudit:
    """Realised budgets of a channel.

    ``worst_size_pair`` is ``(i, k, j)`` maximising ``ln(c_ij / c_kj)`` over
    event rows; ``worst_timing_pair`` is ``(i, j)`` maximising
    ``|ln(c_ij / c_0j)|``.
    """

    eps_size_realized: float
    eps_timing_realized: float
    worst_size_pair: Optional[tuple] = None
    worst_timing_pair: Optional[tuple] = None

    @property
    def level(self) -> float:
        """The LDP level ``max(eps_size, eps_timing / 2)``."""
        return max(self.eps_size_realized, self.eps_timing_realized / 2)

    def satisfies(self, budget: PrivacyBudget, tol: float = LOG_TOL) -> bool:
        return (self.eps_size_realized <= budget.eps_size + tol
                and self.eps_timing_realized <= budget.eps_timing + tol)

    def to_dict(self, budget: Optional[PrivacyBudget] = None, channel: Optional[ChannelMatrix] = None) -> dict:
        def enc(x):
            return "inf" if math.isinf(x) else x

        out = {
            "eps_size_realized": enc(self.eps_size_realized),
            "eps_timing_realized": enc(self.eps_timing_realized),
            "ldp_level": enc(self.level),
            "worst_size_pair": _pair_dict(self.worst_size_pair, ("row_i", "row_k", "column_j"), channel),
            "worst_timing_pair": _pair_dict(self.worst_timing_pair, ("row_i", "column_j"), channel),
        }
        if budget is not None:
            out["requested"] = budget.to_dict()
            out["pass"] = self.satisfies(budget)
        return out


def _pair_dict(pair, names, channel):
    if pair is None:
        return None
    out = dict(zip(names, pair))
    if channel is not None:
        for name, idx in zip(names, pair):
            alphabet = channel.output_alphabet if name.startswith("column") else channel.input_alphabet
            out[name.replace("row_", "input_size_").replace("column_", "output_size_")] = int(alphabet.sizes[idx])
    return out


def ldp_level(channel: ChannelMatrix) -> LdpAudit:
    """Realised size and timing budgets of ``channel``.

    ``eps_size`` is the largest log-ratio between two event rows and
    ``eps_timing`` twice the largest absolute log-ratio between an event row
    and the null row.  An output reachable from one row but not another makes
    the corresponding budget infinite.
    """
    C = channel.rows
    events = C[1:]
    size_ratios = _log_ratio(events[:, None, :], events[None, :, :])
    eps_size, size_idx = _argmax_finite_first(size_ratios)
    worst_size = None if size_idx is None else (size_idx[0] + 1, size_idx[1] + 1, size_idx[2])
    timing = np.abs(_log_ratio(events, np.broadcast_to(C[0], events.shape)))
    eps_t_half, timing_idx = _argmax_finite_first(timing)
    worst_timing = None if timing_idx is None else (timing_idx[0] + 1, timing_idx[1])
    eps_size = max(eps_size, 0.0)
    return LdpAudit(eps_size, 2 * max(eps_t_half, 0.0), worst_size, worst_timing)


def satisfies_budget(channel: ChannelMatrix, budget: PrivacyBudget, tol: float = LOG_TOL) -> bool:
    return ldp_level(channel).satisfies(budget, tol)


# ----------------------------------------------------------------------------
# Exhaustive stream audit
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class StreamDpAudit:
    horizon: int
    adjacency_kind: AdjacencyKind
    max_log_ratio: float
    witness: Optional[tuple] = None
    pairs_checked: int = 0

    def to_dict(self) -> dict:
        w = None
        if self.witness is not None:
            w = {"input": list(self.witness[0]), "adjacent_input": list(self.witness[1]), "output": list(self.witness[2])}
        ratio = "inf" if math.isinf(self.max_log_ratio) else self.max_log_ratio
        return {"horizon": self.horizon, "adjacency_kind": self.adjacency_kind.value,
                "max_log_ratio": ratio, "witness": w, "pairs_checked": self.pairs_checked}


def _size_adjacent(n_in: int, horizon: int):
    for seq in itertools.product(range(n_in), repeat=horizon):
        for t in range(horizon):
            if seq[t] == 0:
                continue
            for other in range(1, n_in):
                if other != seq[t]:
                    yield seq, seq[:t] + (other,) + seq[t + 1:]


def _timing_adjacent(n_in: int, horizon: int):
    for seq in itertools.product(range(n_in), repeat=horizon):
        for t, s in itertools.permutations(range(horizon), 2):
            if seq[t] > 0 and seq[s] == 0:
                moved = list(seq)
                moved[t], moved[s] = 0, seq[t]
                yield seq, tuple(moved)


def audit_stream_dp(mechanism, horizon: int, adjacency_kind) -> StreamDpAudit:
    """Worst-case ``|ln P[M(A)=d] / P[M(A')=d]|`` over adjacent prefix pairs and outputs.

    Every adjacent pair of length-``horizon`` input sequences and every
    output sequence reachable under at least one of them is enumerated.
    ``mechanism`` is a ``ChannelMatrix`` or anything with ``effective_channel()``.
    """
    kind = AdjacencyKind(adjacency_kind)
    channel = mechanism if isinstance(mechanism, ChannelMatrix) else mechanism.effective_channel()
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n_in, n_out = channel.shape
    if n_in ** horizon * n_out ** horizon > ENUMERATION_BUDGET:
        raise EnumerationBudgetError(
            f"|A|^T |D|^T = {n_in ** horizon * n_out ** horizon} exceeds {ENUMERATION_BUDGET}"
        )
    with np.errstate(divide="ignore"):
        logc = np.log(channel.rows)

    cache = {}

    def seq_logprob(seq):
        if seq not in cache:
            total = np.zeros(())
            for a in seq:
                total = np.add.outer(total, logc[a])
            cache[seq] = total
        return cache[seq]

    pairs = _size_adjacent(n_in, horizon) if kind is AdjacencyKind.PACKET_SIZE else _timing_adjacent(n_in, horizon)
    best, witness, checked = 0.0, None, 0
    for seq, adj in pairs:
        checked += 1
        lp, lq = seq_logprob(seq), seq_logprob(adj)
        reachable = np.isfinite(lp) | np.isfinite(lq)
        with np.errstate(invalid="ignore"):
            ratio = np.abs(np.where(reachable, lp - lq, 0.0))
        ratio[~reachable] = 0.0
        idx = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
        if ratio[idx] > best or witness is None:
            best = float(ratio[idx])
            sizes_in = channel.input_alphabet.sizes
            sizes_out = channel.output_alphabet.sizes
            witness = (tuple(int(sizes_in[i]) for i in seq), tuple(int(sizes_in[i]) for i in adj),
                       tuple(int(sizes_out[j]) for j in np.atleast_1d(idx)))
        if math.isinf(best):
            break
    return StreamDpAudit(horizon, kind, best, witness, checked)
