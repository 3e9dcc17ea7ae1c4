"""Minimum-backlog shaper design.

Minimises the stationary ``E[Q]`` over DPS channels, PST output laws or PPS
output laws subject to a target transmission efficiency and a privacy budget.
All constraints are affine, so the feasible set is a polytope and the problem
is solved with away-step Frank-Wolfe using an LP oracle.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
from scipy.optimize import linprog

from .core import (
    ChannelMatrix,
    InstabilityError,
    PacketAlphabet,
    Pmf,
    PrivacyBudget,
    ShaperError,
    arrival_rate,
    input_byte_rate,
    pps_channel,
    pst_channel,
)
from .privacy import LOG_TOL, ldp_level
from .queue_analysis import AccuracyError, expected_queue_and_gradient
from .shaping import Mechanism, MechanismKind

DEFAULT_MTU = 1500
GAP_TOL = 1e-6
MAX_ITER = 500
ZERO_CLEAN = 1e-12


class InfeasibleError(ShaperError):
    """The requested efficiency cannot be met under the constraints."""


class MtuWarning(UserWarning):
    """A deterministic packet size exceeds the maximum transmission unit."""


class Variant(str, Enum):
    DPS = "dps"
    PST = "pst"
    PPS = "pps"


@dataclass(frozen=True, eq=False)
class OptimizationProblem:
    lam: Pmf
    rho_target: Optional[float]
    budget: PrivacyBudget = field(default_factory=lambda: PrivacyBudget(math.inf, math.inf))
    variant: Variant = Variant.DPS
    pad_only: bool = False
    output_alphabet: Optional[PacketAlphabet] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(str(getattr(self.variant, "value", self.variant)).lower()))
        if self.output_alphabet is None:
            object.__setattr__(self, "output_alphabet", self.lam.alphabet)
        if self.output_alphabet.largest < self.input_alphabet.largest:
            raise ValueError("output alphabet must reach the largest input size")
        if self.rho_target is None and not self.pad_only:
            raise ValueError("rho_target is required unless pad_only is set")

    @property
    def input_alphabet(self) -> PacketAlphabet:
        return self.lam.alphabet

    @property
    def b_in(self) -> float:
        return input_byte_rate(self.lam)

    def feasible_range(self) -> tuple:
        """Interval ``[lo, 1)`` of reachable efficiencies."""
        d_max = self.output_alphabet.largest
        lo = self.b_in / d_max
        if self.variant is Variant.PPS:
            lo /= arrival_rate(self.lam)
        return lo, 1.0

    @property
    def target_b_out(self) -> float:
        return self.b_in / self.rho_target

    def describe(self) -> dict:
        return {
            "variant": self.variant.value,
            "rho_target": self.rho_target,
            "eps_size": self.budget.to_dict()["eps_size"],
            "eps_timing": self.budget.to_dict()["eps_timing"],
            "pad_only": self.pad_only,
        }


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    solution: Union[ChannelMatrix, Pmf]
    channel: ChannelMatrix
    objective_eq: float
    achieved_rho: float
    realized_budget: PrivacyBudget
    solver_gap: float
    iterations: int
    status: str = "ok"
    variant: Variant = Variant.DPS

    def mechanism(self, rng_seed: int = 0) -> Mechanism:
        if self.variant is Variant.DPS:
            return Mechanism.dps(self.channel, rng_seed)
        kind = MechanismKind.PST if self.variant is Variant.PST else MechanismKind.PPS
        return Mechanism(kind, self.channel.input_alphabet, output_pmf=self.solution, rng_seed=rng_seed)


# ----------------------------------------------------------------------------
# Deterministic policies
# ----------------------------------------------------------------------------

def deterministic_rate(lam: Pmf, rho: float, variant, mtu: int = DEFAULT_MTU) -> int:
    """Constant output size of PST* (``B_in / rho``) or PPS* (``B_in / (rho * Lambda)``).

    Rounded up to whole bytes, and bumped if needed so that the output rate
    strictly exceeds the input rate.  Sizes above ``mtu`` raise an
    :class:`MtuWarning`.
    """
    kind = MechanismKind.parse(variant)
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    b_in = input_byte_rate(lam)
    if kind is MechanismKind.PST_STAR:
        scale = 1.0
    elif kind is MechanismKind.PPS_STAR:
        scale = arrival_rate(lam)
    else:
        raise ValueError("variant must be pst-star or pps-star")
    exact = b_in / (rho * scale)
    size = max(1, math.ceil(exact - 1e-9))
    while size * scale <= b_in:
        size += 1
    if size > mtu:
        warnings.warn(f"constant size {size} B exceeds the {mtu} B MTU", MtuWarning, stacklevel=2)
    return size


def deterministic_mechanism(lam: Pmf, rho: float, variant, rng_seed: int = 0, mtu: int = DEFAULT_MTU) -> Mechanism:
    kind = MechanismKind.parse(variant)
    size = deterministic_rate(lam, rho, kind, mtu)
    return Mechanism(kind, lam.alphabet, constant_size=size, rng_seed=rng_seed)


# ----------------------------------------------------------------------------
# Constraint polytope
# ----------------------------------------------------------------------------

@dataclass
class _Polytope:
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_ub: Optional[np.ndarray]
    b_ub: Optional[np.ndarray]
    upper: np.ndarray  # 0 for forced zeros, 1 otherwise

    def lmo(self, grad: np.ndarray) -> np.ndarray:
        bounds = list(zip(np.zeros_like(self.upper), self.upper))
        res = linprog(grad, A_ub=self.A_ub, b_ub=self.b_ub, A_eq=self.A_eq, b_eq=self.b_eq,
                      bounds=bounds, method="highs-ds")
        if res.status != 0:
            raise InfeasibleError(f"linear oracle failed: {res.message}")
        return np.clip(res.x, 0.0, self.upper)


def _ldp_rows(n_in: int, n_out: int, budget: PrivacyBudget):
    rows = []
    if math.isfinite(budget.eps_size):
        es = math.exp(budget.eps_size)
        for i in range(1, n_in):
            for k in range(1, n_in):
                if i == k:
                    continue
                for j in range(n_out):
                    r = np.zeros((n_in, n_out))
                    r[i, j] = 1.0
                    r[k, j] -= es
                    rows.append(r.ravel())
    if math.isfinite(budget.eps_timing):
        et = math.exp(budget.eps_timing / 2)
        for i in range(1, n_in):
            for j in range(n_out):
                for hi, lo in ((i, 0), (0, i)):
                    r = np.zeros((n_in, n_out))
                    r[hi, j] = 1.0
                    r[lo, j] -= et
                    rows.append(r.ravel())
    return rows


class _Model:
    """Maps the decision vector to a channel and evaluates ``E[Q]`` and its gradient."""

    def __init__(self, problem: OptimizationProblem):
        self.problem = problem
        self.lam = problem.lam
        self.A = problem.input_alphabet
        self.D = problem.output_alphabet
        self.n_in, self.n_out = len(self.A), len(self.D)
        self.variant = problem.variant
        self._warm = None

    @property
    def size(self) -> int:
        return self.n_in * self.n_out if self.variant is Variant.DPS else self.n_out

    def rate_row(self) -> np.ndarray:
        """Linear functional giving ``B_out`` of the decision vector."""
        d = self.D.sizes.astype(float)
        if self.variant is Variant.DPS:
            return (self.lam.probs[:, None] * d[None, :]).ravel()
        if self.variant is Variant.PST:
            return d.copy()
        return arrival_rate(self.lam) * d

    def polytope(self, pad_only: bool, b_out: Optional[float]) -> _Polytope:
        n_in, n_out = self.n_in, self.n_out
        upper = np.ones(self.size)
        eq, beq, ub, bub = [], [], [], []
        if self.variant is Variant.DPS:
            for i in range(n_in):
                r = np.zeros((n_in, n_out))
                r[i] = 1.0
                eq.append(r.ravel())
                beq.append(1.0)
            ub.extend(_ldp_rows(n_in, n_out, self.problem.budget))
            bub.extend([0.0] * (len(ub)))
            if pad_only:
                mask = self.D.sizes[None, :] < self.A.sizes[:, None]
                upper[mask.ravel()] = 0.0
        else:
            eq.append(np.ones(n_out))
            beq.append(1.0)
            if pad_only:
                upper[self.D.sizes < self.A.largest] = 0.0
        if b_out is not None:
            if pad_only:
                ub.append(self.rate_row())
                bub.append(b_out)
            else:
                eq.append(self.rate_row())
                beq.append(b_out)
        A_ub = np.array(ub) if ub else None
        return _Polytope(np.array(eq), np.array(beq), A_ub, np.array(bub) if ub else None, upper)

    def channel(self, x: np.ndarray) -> ChannelMatrix:
        x = np.clip(x, 0.0, None)
        if self.variant is Variant.DPS:
            rows = x.reshape(self.n_in, self.n_out)
            rows = rows / rows.sum(axis=1, keepdims=True)
            return ChannelMatrix(self.A, self.D, rows)
        pmf = Pmf(self.D, x / x.sum())
        return pst_channel(self.A, pmf) if self.variant is Variant.PST else pps_channel(self.A, pmf)

    def solution(self, x: np.ndarray):
        channel = self.channel(x)
        if self.variant is Variant.DPS:
            return channel, channel
        row = channel.rows[-1]
        return Pmf(self.D, row), channel

    def value_grad(self, x: np.ndarray):
        value, grad, self._warm = expected_queue_and_gradient(self.lam, self.channel(x), warm_start=self._warm)
        if self.variant is Variant.DPS:
            return value, grad.ravel()
        if self.variant is Variant.PST:
            return value, grad.sum(axis=0)
        return value, grad[1:].sum(axis=0)

    def initial_point(self, b_out: float) -> np.ndarray:
        """Rank-one output law mixing the two sizes that bracket the target mean."""
        d = self.D.sizes.astype(float)
        target = b_out / arrival_rate(self.lam) if self.variant is Variant.PPS else b_out
        hi = int(np.searchsorted(d, target - 1e-12))
        hi = min(hi, d.size - 1)
        mu = np.zeros(d.size)
        if abs(d[hi] - target) <= 1e-12 * max(1.0, target) or hi == 0:
            mu[hi] = 1.0
        else:
            lo = hi - 1
            w = (target - d[lo]) / (d[hi] - d[lo])
            mu[lo], mu[hi] = 1.0 - w, w
        if self.variant is Variant.DPS:
            return np.tile(mu, self.n_in)
        return mu


# ----------------------------------------------------------------------------
# Away-step Frank-Wolfe
# ----------------------------------------------------------------------------

def _line_search(model: _Model, x, direction, gamma_max, value0, grad0):
    """Exact line search on the convex restriction using directional derivatives."""
    slope0 = float(grad0 @ direction)
    f1, g1 = model.value_grad(x + gamma_max * direction)
    slope1 = float(g1 @ direction)
    if slope1 <= 0:
        return gamma_max, f1, g1
    lo, hi, s_lo, s_hi = 0.0, gamma_max, slope0, slope1
    best = (gamma_max, f1, g1) if f1 < value0 else (0.0, value0, grad0)
    side = 0
    for _ in range(40):
        gamma = (lo * s_hi - hi * s_lo) / (s_hi - s_lo)
        if not lo < gamma < hi:
            gamma = 0.5 * (lo + hi)
        f, g = model.value_grad(x + gamma * direction)
        s = float(g @ direction)
        if f < best[1]:
            best = (gamma, f, g)
        if abs(s) <= 1e-6 * abs(slope0) or hi - lo <= 1e-12 * gamma_max:
            break
        # Illinois modification keeps both ends moving
        if s < 0:
            lo, s_lo = gamma, s
            if side == -1:
                s_hi /= 2
            side = -1
        else:
            hi, s_hi = gamma, s
            if side == 1:
                s_lo /= 2
            side = 1
    return best


def _frank_wolfe(model: _Model, polytope: _Polytope, x0: np.ndarray, gap_tol: float, max_iter: int):
    atoms = [x0.copy()]
    weights = [1.0]
    x = x0.copy()
    value, grad = model.value_grad(x)
    gap = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        s = polytope.lmo(grad)
        gap = float(grad @ (x - s))
        if gap <= gap_tol * (1.0 + abs(value)):
            return x, value, max(gap, 0.0), it, True
        scores = [float(grad @ a) for a in atoms]
        v = int(np.argmax(scores))
        away_gain = scores[v] - float(grad @ x)
        use_away = len(atoms) > 1 and away_gain > gap
        if use_away:
            direction = x - atoms[v]
            gamma_max = weights[v] / (1.0 - weights[v])
        else:
            direction = s - x
            gamma_max = 1.0
        gamma, value, grad = _line_search(model, x, direction, gamma_max, value, grad)
        if gamma <= 0:
            # no progress along the chosen direction; gap estimate stands
            return x, value, max(gap, 0.0), it, False
        if use_away:
            weights = [w * (1 + gamma) for w in weights]
            weights[v] -= gamma
            if gamma >= gamma_max * (1 - 1e-12) or weights[v] <= 1e-15:
                del atoms[v], weights[v]
        else:
            weights = [w * (1 - gamma) for w in weights]
            for k, a in enumerate(atoms):
                if np.allclose(a, s, atol=1e-12, rtol=0):
                    weights[k] += gamma
                    break
            else:
                atoms.append(s)
                weights.append(gamma)
            if gamma >= 1 - 1e-12:
                atoms, weights = [s], [1.0]
        x = np.sum([w * a for w, a in zip(weights, atoms)], axis=0)
    return x, value, max(gap, 0.0), it, False


def _clean(x: np.ndarray) -> np.ndarray:
    x = np.where(x < ZERO_CLEAN, 0.0, x)
    return x


def _tighten_privacy(channel: ChannelMatrix, lam: Pmf, budget: PrivacyBudget) -> ChannelMatrix:
    """Mix toward the rank-one channel with the same output law until the budget holds.

    The mix keeps ``lam^T C`` and therefore the output rate unchanged.
    """
    if ldp_level(channel).satisfies(budget, LOG_TOL):
        return channel
    flat = np.tile(lam.probs @ channel.rows, (channel.shape[0], 1))

    def mixed(t):
        return ChannelMatrix(channel.input_alphabet, channel.output_alphabet, (1 - t) * channel.rows + t * flat)

    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ldp_level(mixed(mid)).satisfies(budget, LOG_TOL):
            hi = mid
        else:
            lo = mid
    return mixed(hi)


def _solve_pad_only(problem: OptimizationProblem, model: _Model) -> OptimizationResult:
    # D_t >= A_t pathwise, so the backlog is identically 0; pick the cheapest feasible shaper
    b_out_cap = None if problem.rho_target is None else problem.target_b_out
    polytope = model.polytope(True, b_out_cap)
    bounds = list(zip(np.zeros(model.size), polytope.upper))
    res = linprog(model.rate_row(), A_ub=polytope.A_ub, b_ub=polytope.b_ub, A_eq=polytope.A_eq,
                  b_eq=polytope.b_eq, bounds=bounds, method="highs-ds")
    if res.status == 2:
        best = _solve_pad_only(OptimizationProblem(problem.lam, None, problem.budget, problem.variant, True,
                                                   problem.output_alphabet), model)
        raise InfeasibleError(
            f"pad-only {problem.variant.value} cannot reach rho={problem.rho_target:.6g}; "
            f"best achievable is {best.achieved_rho:.6g}"
        )
    if res.status != 0:
        raise InfeasibleError(f"pad-only LP failed: {res.message}")
    solution, channel = model.solution(_clean(res.x))
    audit = ldp_level(channel)
    b_out = float(problem.lam.probs @ channel.rows @ channel.output_alphabet.sizes)
    return OptimizationResult(solution, channel, 0.0, problem.b_in / b_out,
                              PrivacyBudget(audit.eps_size_realized, audit.eps_timing_realized),
                              0.0, 1, "ok", problem.variant)


def solve(problem: OptimizationProblem, *, initial: Optional[np.ndarray] = None, gap_tol: float = GAP_TOL,
          max_iter: int = MAX_ITER) -> OptimizationResult:
    """Minimum-``E[Q]`` shaper for ``problem``.

    The efficiency constraint is imposed as ``B_out = B_in / rho_target``;
    the optimum always lies on that face because extra padding can only
    shrink the backlog.  Pad-only problems have zero backlog everywhere and
    are solved as an LP for the most efficient feasible shaper.

    Raises
    ------
    InfeasibleError
        ``rho_target`` outside :meth:`OptimizationProblem.feasible_range`.
    """
    model = _Model(problem)
    if problem.pad_only:
        return _solve_pad_only(problem, model)
    lo, hi = problem.feasible_range()
    rho = problem.rho_target
    if not (lo - 1e-12 <= rho < hi):
        raise InfeasibleError(
            f"rho={rho:.6g} outside the feasible range [{lo:.6g}, 1) for {problem.variant.value}"
        )
    b_out = problem.target_b_out
    polytope = model.polytope(False, b_out)
    x0 = model.initial_point(b_out) if initial is None else np.asarray(initial, dtype=float).ravel()
    x, value, gap, iters, converged = _frank_wolfe(model, polytope, x0, gap_tol, max_iter)

    solution, channel = model.solution(_clean(x))
    if problem.variant is Variant.DPS:
        channel = _tighten_privacy(channel, problem.lam, problem.budget)
        solution = channel
    value, _, _ = expected_queue_and_gradient(problem.lam, channel)
    audit = ldp_level(channel)
    achieved = problem.b_in / float(problem.lam.probs @ channel.rows @ channel.output_alphabet.sizes)
    return OptimizationResult(solution, channel, value, achieved,
                              PrivacyBudget(audit.eps_size_realized, audit.eps_timing_realized),
                              gap, iters, "ok" if converged else "max_iter", problem.variant)


# ----------------------------------------------------------------------------
# Sweeps
# ----------------------------------------------------------------------------

SWEEP_COLUMNS = ("variant", "rho_target", "eps_size", "eps_timing", "objective_EQ_bytes", "achieved_rho",
                 "iterations", "solver_gap", "status")


@dataclass(frozen=True, eq=False)
class SweepEntry:
    index: int
    problem: OptimizationProblem
    result: Optional[OptimizationResult]
    status: str

    def row(self) -> dict:
        budget = self.problem.budget.to_dict()
        res = self.result
        return {
            "variant": self.problem.variant.value + ("0" if self.problem.pad_only else ""),
            "rho_target": "" if self.problem.rho_target is None else self.problem.rho_target,
            "eps_size": budget["eps_size"],
            "eps_timing": budget["eps_timing"],
            "objective_EQ_bytes": "" if res is None else res.objective_eq,
            "achieved_rho": "" if res is None else res.achieved_rho,
            "iterations": "" if res is None else res.iterations,
            "solver_gap": "" if res is None else res.solver_gap,
            "status": self.status,
        }


def _solve_entry(args):
    index, problem, kwargs = args
    try:
        result = solve(problem, **kwargs)
        return SweepEntry(index, problem, result, result.status)
    except InfeasibleError as exc:
        return SweepEntry(index, problem, None, f"infeasible: {exc}")
    except InstabilityError as exc:
        return SweepEntry(index, problem, None, f"unstable: {exc}")
    except AccuracyError as exc:
        return SweepEntry(index, problem, None, f"inaccurate: {exc}")


def build_grid(lam: Pmf, variants: Sequence, rhos: Sequence[float], eps_pairs: Sequence[tuple],
               pad_only: bool = False, output_alphabet: Optional[PacketAlphabet] = None):
    """Problems in a fixed variant-major, then rho, then budget order."""
    problems = []
    for variant in variants:
        for rho in rhos:
            for eps_s, eps_t in eps_pairs:
                problems.append(OptimizationProblem(lam, rho, PrivacyBudget(eps_s, eps_t), Variant(variant),
                                                    pad_only, output_alphabet))
    return problems


def sweep(problems: Sequence[OptimizationProblem], *, jobs: int = 1, **solve_kwargs) -> list:
    """Solve every grid point; per-point failures are recorded in the entry status."""
    tasks = [(i, p, solve_kwargs) for i, p in enumerate(problems)]
    if jobs <= 1 or len(tasks) <= 1:
        entries = [_solve_entry(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_solve_entry, tasks))
    return sorted(entries, key=lambda e: e.index)
