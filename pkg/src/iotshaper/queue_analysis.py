"""Stationary mean backlog of the byte-level FCFS queue ``Q_t = max(Q_{t-1} + X_t, 0)``.

For a memoryless shaper the increments ``X_t = A_t - D_t`` are i.i.d. with a
finite lattice support, so ``Q`` is a reflected random walk. Two solvers are
provided:

* ``"whf"`` (default): Wiener-Hopf ladder-height factorization. The ascending
  ladder law ``a`` and descending ladder law ``b`` satisfy the Grassmann-Jain
  fixed-point equations

      a_i    = f_i    + sum_{j=0..g} b_{-j} a_{i+j}        (i = 1..h)
      b_{-k} = f_{-k} + sum_{u=1..h} a_u b_{-k-u}          (k = 0..g)

  and ``E[Q] = sum_i i a_i / (1 - sum_i a_i)`` (Pollaczek-Khinchine form of
  the all-time maximum).  The state space is never truncated.
* ``"chain"``: exact stationary solve of the Markov chain truncated at level
  ``K``, with ``K`` doubled until the mass near the cap is below ``tol``.
  Used as the independent oracle.

All work is done in lattice units of ``gcd_unit`` bytes and rescaled at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.signal import fftconvolve

from .core import ChannelMatrix, InstabilityError, Pmf, ShaperError, PROB_TOL

MAX_CHAIN_STATES = 2 ** 20
DENSE_ADJOINT_LIMIT = 1500


class AccuracyError(ShaperError):
    """The solver could not reach the requested accuracy."""

    def __init__(self, message: str, tail_mass: float = math.nan):
        super().__init__(message)
        self.tail_mass = tail_mass


def _gcd(values) -> int:
    values = [abs(int(v)) for v in values if int(v) != 0]
    return reduce(math.gcd, values, 0) or 1


@dataclass(frozen=True, eq=False)
class IncrementDistribution:
    """Law of ``X_t = A_t - D_t`` on the lattice ``gcd_unit * Z``.

    ``support`` holds increments already divided by ``gcd_unit``.
    """

    support: np.ndarray
    probs: np.ndarray
    gcd_unit: int = 1

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.int64).ravel()
        probs = np.asarray(self.probs, dtype=float).ravel()
        if support.shape != probs.shape or support.size == 0:
            raise ValueError("support and probs must be non-empty and of equal length")
        if np.any(probs < -PROB_TOL) or abs(probs.sum() - 1.0) > PROB_TOL:
            raise ValueError("increment probabilities must form a distribution")
        if int(self.gcd_unit) < 1:
            raise ValueError("gcd_unit must be a positive integer")
        # merge duplicates and drop zero-probability points
        uniq, inv = np.unique(support, return_inverse=True)
        merged = np.zeros(uniq.size)
        np.add.at(merged, inv, np.clip(probs, 0.0, None))
        keep = merged > 0
        sup = uniq[keep]
        pr = merged[keep]
        sup.setflags(write=False)
        pr.setflags(write=False)
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "probs", pr)
        object.__setattr__(self, "gcd_unit", int(self.gcd_unit))

    @classmethod
    def from_mapping(cls, law: dict, gcd_unit: int = 1) -> "IncrementDistribution":
        return cls(np.array(list(law.keys())), np.array(list(law.values())), gcd_unit)

    @property
    def mean(self) -> float:
        """Drift in lattice units per slot."""
        return float(self.support @ self.probs)

    @property
    def mean_bytes(self) -> float:
        return self.mean * self.gcd_unit

    @property
    def is_stable(self) -> bool:
        return self.mean < 0

    def as_dict(self) -> dict:
        return {int(x) * self.gcd_unit: float(p) for x, p in zip(self.support, self.probs)}


@dataclass(frozen=True, eq=False)
class StationaryQueueResult:
    """Stationary mean backlog plus solver diagnostics.

    For the ladder solver ``tail_mass`` is the L1 residual of the fixed point
    unless a distribution was exported, in which case it is the mass beyond
    ``truncation_level`` like for the chain solver.
    """

    expected_queue_bytes: float
    truncation_level: int
    tail_mass: float
    method: str
    iterations: int = 0
    distribution: Optional[np.ndarray] = None
    gcd_unit: int = 1
    converged: bool = True
    ladders: Optional[tuple] = field(default=None, repr=False)

    def distribution_dict(self) -> dict:
        if self.distribution is None:
            return {}
        return {
            "unit_bytes": self.gcd_unit,
            "probs": self.distribution.tolist(),
            "truncation_level": self.truncation_level,
            "tail_mass": self.tail_mass,
        }


# ----------------------------------------------------------------------------
# Building increment laws
# ----------------------------------------------------------------------------

def _resolve_channel(mechanism) -> ChannelMatrix:
    if isinstance(mechanism, ChannelMatrix):
        return mechanism
    effective = getattr(mechanism, "effective_channel", None)
    if effective is None:
        raise TypeError(f"cannot derive a channel from {type(mechanism).__name__}")
    return effective() if callable(effective) else effective


def alphabet_gcd(channel: ChannelMatrix) -> int:
    return _gcd(np.concatenate([channel.input_alphabet.sizes, channel.output_alphabet.sizes]))


def increment_distribution(lam: Pmf, mechanism, *, require_stable: bool = True) -> IncrementDistribution:
    """Law of ``A_t - D_t`` under input law ``lam`` and a memoryless shaper.

    ``mechanism`` is a :class:`ChannelMatrix` or anything exposing
    ``effective_channel()`` (such as :class:`iotshaper.shaping.Mechanism`).
    PST and PPS are handled through their equivalent channels, so the joint
    law is always ``P(a_i, d_j) = lam_i * c_ij``.
    """
    channel = _resolve_channel(mechanism)
    if lam.alphabet != channel.input_alphabet:
        raise ValueError("pmf alphabet does not match the channel input alphabet")
    unit = alphabet_gcd(channel)
    a = channel.input_alphabet.sizes // unit
    d = channel.output_alphabet.sizes // unit
    joint = lam.probs[:, None] * channel.rows
    diffs = a[:, None] - d[None, :]
    inc = IncrementDistribution(diffs.ravel(), joint.ravel(), unit)
    if require_stable and not inc.is_stable:
        raise InstabilityError(
            f"non-negative drift {inc.mean_bytes:.6g} B/slot: output rate does not exceed input rate"
        )
    return inc


# ----------------------------------------------------------------------------
# Ladder-height (Wiener-Hopf) solver
# ----------------------------------------------------------------------------

def _dense_law(support: np.ndarray, probs: np.ndarray):
    g = max(0, -int(support.min()))
    h = max(0, int(support.max()))
    fpos = np.zeros(h)
    fneg = np.zeros(g + 1)
    for x, p in zip(support.tolist(), probs.tolist()):
        if x > 0:
            fpos[x - 1] += p
        else:
            fneg[-x] += p
    return g, h, fpos, fneg


def _ladder_map(a, b, g, h, fpos, fneg):
    # a[i-1] = a_i, b[k] = b_{-k}; b is refreshed with the new a (Gauss-Seidel)
    an = fpos + fftconvolve(a, b[::-1])[g:g + h]
    full = fftconvolve(b, an[::-1])
    bn = fneg.copy()
    idx = np.arange(g + 1) + h
    ok = idx < full.size
    bn[ok] += full[idx[ok]]
    np.clip(an, 0.0, None, out=an)
    np.clip(bn, 0.0, None, out=bn)
    return an, bn


def _solve_ladders(g, h, fpos, fneg, *, fp_tol=1e-14, max_iter=200_000, memory=8, init=None):
    n = h + g + 1
    z = np.zeros(n) if init is None else np.array(init, dtype=float)
    xs, gs = [], []
    residual = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        an, bn = _ladder_map(z[:h], z[h:], g, h, fpos, fneg)
        tz = np.concatenate([an, bn])
        residual = float(np.abs(tz - z).sum())
        if residual < fp_tol:
            return tz, it, residual
        z_next = tz
        if memory > 0:
            xs.append(z)
            gs.append(tz)
            if len(xs) > memory + 1:
                xs.pop(0)
                gs.pop(0)
            if len(xs) > 1:
                G = np.array(gs)
                R = G - np.array(xs)
                dR = np.diff(R, axis=0)
                gamma, *_ = np.linalg.lstsq(dR.T, R[-1], rcond=None)
                cand = G[-1] - gamma @ np.diff(G, axis=0)
                # fall back to the plain step if extrapolation leaves the feasible region
                # (the wanted solution is the minimal one: sum a < 1, sum b <= 1)
                if (np.all(np.isfinite(cand)) and cand.min() > -1e-12 and cand[:h].sum() < 1.0
                        and cand[h:].sum() <= 1.0 + 1e-12):
                    z_next = np.clip(cand, 0.0, None)
                else:
                    xs, gs = [], []
        z = z_next
    return z, it, residual


def _ladder_mean(a: np.ndarray) -> float:
    alpha = a.sum()
    return float(np.arange(1, a.size + 1) @ a / (1.0 - alpha))


def _ladder_distribution(a: np.ndarray, tol: float, max_states: int):
    alpha = a.sum()
    h = a.size
    w = [1.0 - alpha]
    total = w[0]
    rev = a[::-1]
    k = 0
    while 1.0 - total > tol:
        k += 1
        if k > max_states:
            raise AccuracyError(f"queue distribution export exceeded {max_states} states", 1.0 - total)
        lo = max(0, k - h)
        hist = np.asarray(w[lo:k])
        nxt = float(hist @ rev[h - (k - lo):]) if hist.size else 0.0
        w.append(nxt)
        total += nxt
    return np.asarray(w), k, max(0.0, 1.0 - total)


def _whf(inc: IncrementDistribution, scale: int, tol: float, export: bool, warm_start) -> StationaryQueueResult:
    support = inc.support // scale
    g, h, fpos, fneg = _dense_law(support, inc.probs)
    unit = inc.gcd_unit * scale
    if h == 0:
        # no upward moves: the queue never leaves 0
        dist = np.array([1.0]) if export else None
        return StationaryQueueResult(0.0, 0, 0.0, "whf", 0, dist, unit, True, (np.zeros(0), fneg))
    init = None
    if warm_start is not None and warm_start.ladders is not None:
        wa, wb = warm_start.ladders
        if wa.size == h and wb.size == g + 1 and warm_start.gcd_unit == unit:
            init = np.concatenate([wa, wb])
    drift = abs(float(support @ inc.probs))

    def consistent(z):
        a, b = z[:h], z[h:]
        # idle-period identity (1 - alpha) E[descending ladder height] = |E[X]|
        idle = (1.0 - a.sum()) * float(np.arange(g + 1) @ b)
        return a.sum() < 1.0 and abs(b.sum() - 1.0) < 1e-8 and abs(idle - drift) <= 1e-7 * max(drift, 1e-12)

    z, iters, residual = _solve_ladders(g, h, fpos, fneg, init=init)
    if not consistent(z):
        # acceleration can still land on a spurious fixed point; the plain map from zero cannot
        z, more, residual = _solve_ladders(g, h, fpos, fneg, memory=0)
        iters += more
    a, b = z[:h], z[h:]
    if not consistent(z):
        raise AccuracyError(
            f"ladder factorization did not converge (residual {residual:.3g}, sum b {b.sum():.12f})",
            residual,
        )
    mean = _ladder_mean(a) * unit
    if export:
        dist, level, tail = _ladder_distribution(a, tol, MAX_CHAIN_STATES)
        return StationaryQueueResult(mean, level, tail, "whf", iters, dist, unit, True, (a, b))
    return StationaryQueueResult(mean, 0, residual, "whf", iters, None, unit, True, (a, b))


# ----------------------------------------------------------------------------
# Truncated-chain solver
# ----------------------------------------------------------------------------

def _chain_matrix(support, probs, K):
    states = np.arange(K + 1)
    rows = np.tile(states, support.size)
    cols = np.concatenate([np.clip(states + x, 0, K) for x in support])
    vals = np.repeat(probs, K + 1)
    return sp.csr_matrix((vals, (rows, cols)), shape=(K + 1, K + 1))


def _chain_stationary(P, linear_solver: str, max_power_iter: int):
    n = P.shape[0]
    if linear_solver == "lu":
        A = (P.T - sp.identity(n, format="csr")).tolil()
        A[0, :] = np.ones(n)
        rhs = np.zeros(n)
        rhs[0] = 1.0
        pi = spla.spsolve(A.tocsc(), rhs)
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum(), 1, True
    if linear_solver == "power":
        PT = P.T.tocsr()
        pi = np.zeros(n)
        pi[0] = 1.0
        for it in range(1, max_power_iter + 1):
            nxt = PT @ pi
            if np.abs(nxt - pi).sum() / 2 < 1e-12:
                return nxt, it, True
            pi = nxt
        return pi, max_power_iter, False
    raise ValueError(f"unknown linear_solver {linear_solver!r}")


def _chain(inc: IncrementDistribution, scale: int, tol: float, export: bool, linear_solver: str,
           max_states: int, max_power_iter: int) -> StationaryQueueResult:
    support = inc.support // scale
    unit = inc.gcd_unit * scale
    h = max(1, int(support.max()))
    g = max(1, -int(support.min()))
    K = max(64, 8 * (g + h))
    while True:
        K = min(K, max_states - 1)
        P = _chain_matrix(support, inc.probs, K)
        pi, iters, converged = _chain_stationary(P, linear_solver, max_power_iter)
        tail = float(pi[K - h + 1:].sum())
        if tail <= tol:
            mean = float(np.arange(K + 1) @ pi) * unit
            return StationaryQueueResult(mean, K, tail, "chain", iters, pi if export else None, unit, converged)
        if K >= max_states - 1:
            raise AccuracyError(f"truncation cap of {max_states} states reached with tail mass {tail:.3g}", tail)
        K *= 2


def stationary_expected_queue(inc: IncrementDistribution, tol: float = 1e-8, *, method: str = "whf",
                              export_distribution: bool = False, linear_solver: str = "lu",
                              max_states: int = MAX_CHAIN_STATES, max_power_iter: int = 1_000_000,
                              warm_start: Optional[StationaryQueueResult] = None) -> StationaryQueueResult:
    """Stationary ``E[Q]`` in bytes of the reflected walk driven by ``inc``.

    Parameters
    ----------
    inc : IncrementDistribution
        Must have negative drift.
    tol : float
        Tail-mass bound for the truncated chain and for distribution export.
    method : {"whf", "chain"}
    export_distribution : bool
        Attach the stationary queue law (in units of ``gcd_unit`` bytes).
    linear_solver : {"lu", "power"}
        Chain method only.
    warm_start : StationaryQueueResult, optional
        A previous ladder solution on the same lattice, used as starting point.
    """
    if not inc.is_stable:
        raise InstabilityError(f"non-negative drift {inc.mean_bytes:.6g} B/slot; no stationary regime")
    scale = _gcd(inc.support)
    if method == "whf":
        return _whf(inc, scale, tol, export_distribution, warm_start)
    if method == "chain":
        return _chain(inc, scale, tol, export_distribution, linear_solver, max_states, max_power_iter)
    raise ValueError(f"unknown method {method!r}")


def expected_queue(lam: Pmf, mechanism, *, method: str = "whf", tol: float = 1e-8) -> float:
    """Shortcut: stationary ``E[Q]`` in bytes for ``lam`` through ``mechanism``."""
    return stationary_expected_queue(increment_distribution(lam, mechanism), tol, method=method).expected_queue_bytes


# ----------------------------------------------------------------------------
# Sensitivities
# ----------------------------------------------------------------------------

def _jacobian_dense(a, b, g, h):
    n = h + g + 1
    J = np.zeros((n, n))
    for i in range(1, h + 1):
        for j in range(0, g + 1):
            if i + j <= h:
                J[i - 1, i + j - 1] += b[j]
                J[i - 1, h + j] += a[i + j - 1]
    for k in range(0, g + 1):
        for u in range(1, h + 1):
            if k + u <= g:
                J[h + k, u - 1] += b[k + u]
                J[h + k, h + k + u] += a[u - 1]
    return J


def _jacobian_rmatvec(v, a, b, g, h):
    """``J^T v`` for the Jacobi Jacobian of the ladder map, via convolutions."""
    va, vb = v[:h], v[h:]
    out_a = fftconvolve(b, va)[:h]
    corr_b = fftconvolve(b, vb[::-1])
    idx = g + np.arange(1, h + 1)
    ok = idx < corr_b.size
    out_a[ok] += corr_b[idx[ok]]
    corr_a = fftconvolve(a, va[::-1])
    idx = h - 1 + np.arange(g + 1)
    out_b = np.zeros(g + 1)
    ok = idx < corr_a.size
    out_b[ok] = corr_a[idx[ok]]
    out_b += fftconvolve(np.concatenate([[0.0], a]), vb)[:g + 1]
    return np.concatenate([out_a, out_b])


def _ladder_adjoint(a, b, g, h):
    """``d E_units / d f_x`` for ``x = -g..h`` as an array indexed by ``x + g``."""
    alpha = a.sum()
    mean = _ladder_mean(a)
    rhs = np.zeros(h + g + 1)
    rhs[:h] = (np.arange(1, h + 1) + mean) / (1.0 - alpha)
    n = rhs.size
    mu = None
    if n > DENSE_ADJOINT_LIMIT:
        op = spla.LinearOperator((n, n), matvec=lambda v: v - _jacobian_rmatvec(v, a, b, g, h), dtype=float)
        sol, info = spla.gmres(op, rhs, rtol=1e-12, atol=0.0, restart=min(n, 200), maxiter=50)
        if info == 0:
            mu = sol
    if mu is None:
        J = _jacobian_dense(a, b, g, h)
        mu = np.linalg.solve(np.eye(n) - J.T, rhs)
    grad = np.empty(n)
    grad[g + 1:] = mu[:h]           # x = 1..h
    grad[:g + 1] = mu[h:][::-1]     # x = -g..0
    return grad


def expected_queue_and_gradient(lam: Pmf, channel: ChannelMatrix, *, warm_start=None):
    """Stationary ``E[Q]`` (bytes) and its gradient with respect to ``channel.rows``.

    The gradient comes from the adjoint of the ladder fixed point: with
    ``f_x = sum_{a_i - d_j = x} lam_i c_ij`` we get
    ``dE/dc_ij = lam_i * dE/df_{a_i - d_j}``.  Returns ``(value, grad, result)``
    where ``result`` can be passed back as ``warm_start``.
    """
    inc = increment_distribution(lam, channel)
    unit = inc.gcd_unit
    res = stationary_expected_queue(inc, warm_start=warm_start)
    diffs = (channel.input_alphabet.sizes[:, None] - channel.output_alphabet.sizes[None, :]) // unit
    grad = np.zeros(channel.shape)
    if res.ladders is None or res.ladders[0].size == 0:
        return res.expected_queue_bytes, grad, res
    # the ladder solve may have run on a coarser lattice; redo the adjoint on the alphabet lattice
    a, b = res.ladders
    scale = res.gcd_unit // unit
    if scale != 1:
        a_full = np.zeros(a.size * scale)
        a_full[scale - 1::scale] = a
        b_full = np.zeros((b.size - 1) * scale + 1)
        b_full[::scale] = b
        a, b = a_full, b_full
    g_lat = max(0, -int(diffs.min()))
    h_lat = max(0, int(diffs.max()))
    a = np.pad(a, (0, max(0, h_lat - a.size)))[:h_lat]
    b = np.pad(b, (0, max(0, g_lat + 1 - b.size)))[:g_lat + 1]
    grad_f = _ladder_adjoint(a, b, g_lat, h_lat) * unit
    grad = lam.probs[:, None] * grad_f[diffs + g_lat]
    return res.expected_queue_bytes, grad, res
