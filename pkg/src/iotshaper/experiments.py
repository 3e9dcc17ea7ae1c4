"""Optimize-then-simulate pipelines behind the ``sweep`` command."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import InstabilityError, PacketAlphabet, PacketStream, Pmf, PrivacyBudget, input_byte_rate
from .optimizer import (
    InfeasibleError,
    MtuWarning,
    OptimizationProblem,
    Variant,
    deterministic_mechanism,
    solve,
)
from .privacy import ldp_level
from .queue_analysis import AccuracyError, expected_queue
from .shaping import Mechanism, MechanismKind, shape_stream
from .traces import synthesize_bursty_stream, synthesize_stream

TRADEOFF_COLUMNS = ("flow", "variant", "rho_target", "eps_size", "eps_timing", "objective_EQ_bytes",
                    "empirical_Q_bytes", "empirical_W_slots", "achieved_rho", "empirical_rho",
                    "iterations", "solver_gap", "status")


@dataclass(frozen=True)
class SimulationSummary:
    avg_queue_bytes: float
    avg_delay_slots: float
    empirical_rho: float
    seeds: tuple


def simulate_mechanism(lam: Pmf, mechanism: Mechanism, horizon: int, seeds: Sequence[int]) -> SimulationSummary:
    """Average ``Q_bar`` and ``W_bar`` over i.i.d. input streams, one per seed.

    Seed ``s`` drives both the input stream and the mechanism; the mechanism
    salts its generator, so the two draw independent uniforms.
    """
    qs, ws, rhos = [], [], []
    for seed in seeds:
        stream = synthesize_stream(lam, horizon, seed)
        _, report = shape_stream(stream, mechanism.with_seed(seed), lam=lam)
        qs.append(report.avg_queue_bytes)
        ws.append(report.avg_delay_slots)
        rhos.append(report.empirical_rho)
    return SimulationSummary(float(np.mean(qs)), float(np.mean(ws)), float(np.mean(rhos)), tuple(seeds))


@dataclass(frozen=True)
class PointOutcome:
    row: dict
    mechanism: Optional[Mechanism]


def design_mechanism(lam: Pmf, variant: str, rho: Optional[float], budget: PrivacyBudget,
                     output_alphabet: Optional[PacketAlphabet] = None, pad_only: bool = False):
    """Build the shaper for one grid point; returns ``(mechanism, info dict)``."""
    kind = MechanismKind.parse(variant)
    if kind in (MechanismKind.PST_STAR, MechanismKind.PPS_STAR):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MtuWarning)
            mech = deterministic_mechanism(lam, rho, kind)
        objective = expected_queue(lam, mech)
        b_out = mech.output_byte_rate(lam)
        return mech, {"objective_EQ_bytes": objective, "achieved_rho": input_byte_rate(lam) / b_out,
                      "iterations": 0, "solver_gap": 0.0, "status": "ok"}
    if kind in (MechanismKind.PST0, MechanismKind.PPS0):
        variant, pad_only = ("pst" if kind is MechanismKind.PST0 else "pps"), True
        if kind is MechanismKind.PST0:
            budget = PrivacyBudget(0.0, 0.0)
        else:
            budget = PrivacyBudget(0.0, math.inf)
    problem = OptimizationProblem(lam, rho, budget, Variant(MechanismKind.parse(variant).value), pad_only,
                                  output_alphabet)
    result = solve(problem)
    return result.mechanism(), {"objective_EQ_bytes": result.objective_eq, "achieved_rho": result.achieved_rho,
                                "iterations": result.iterations, "solver_gap": result.solver_gap,
                                "status": result.status, "result": result}


def run_point(lam: Pmf, variant: str, rho: Optional[float], budget: PrivacyBudget, *, horizon: int = 0,
              seeds: Sequence[int] = (0,), flow: str = "", output_alphabet: Optional[PacketAlphabet] = None,
              pad_only: bool = False) -> PointOutcome:
    """Design one shaper and optionally simulate it; failures go into ``status``."""
    kind = MechanismKind.parse(variant)
    label = kind.value + ("0" if pad_only and kind in (MechanismKind.DPS, MechanismKind.PST, MechanismKind.PPS) else "")
    row = {"flow": flow, "variant": label, "rho_target": "" if rho is None else rho, **budget.to_dict()}
    try:
        mech, info = design_mechanism(lam, variant, rho, budget, output_alphabet, pad_only)
    except InfeasibleError as exc:
        row["status"] = f"infeasible: {exc}"
        return PointOutcome(row, None)
    except (InstabilityError, AccuracyError) as exc:
        row["status"] = f"failed: {exc}"
        return PointOutcome(row, None)
    info.pop("result", None)
    row.update(info)
    if horizon > 0:
        sim = simulate_mechanism(lam, mech, horizon, seeds)
        row.update(empirical_Q_bytes=sim.avg_queue_bytes, empirical_W_slots=sim.avg_delay_slots,
                   empirical_rho=sim.empirical_rho)
    return PointOutcome(row, mech)


def _run_point_task(args):
    index, lam, variant, rho, budget, kwargs = args
    return index, run_point(lam, variant, rho, budget, **kwargs)


def tradeoff_sweep(lam: Pmf, variants: Sequence[str], rhos: Sequence[float], eps_pairs: Sequence[tuple], *,
                   horizon: int = 0, seeds: Sequence[int] = (0,), flow: str = "", jobs: int = 1,
                   output_alphabet: Optional[PacketAlphabet] = None) -> list:
    """Grid of (variant, rho, budget) points, variant-major; returns ``PointOutcome`` per point.

    Variants other than DPS ignore the budget, so they are evaluated once per
    rho; pad-only variants are evaluated once.
    """
    tasks = []
    kwargs = {"horizon": horizon, "seeds": tuple(seeds), "flow": flow, "output_alphabet": output_alphabet}
    for variant in variants:
        kind = MechanismKind.parse(variant)
        budget_free = kind not in (MechanismKind.DPS,)
        # pad-only shapers have a single operating point
        for rho in ([None] if kind in (MechanismKind.PST0, MechanismKind.PPS0) else rhos):
            pairs = eps_pairs[:1] if budget_free else eps_pairs
            for eps_s, eps_t in pairs:
                budget = PrivacyBudget(eps_s, eps_t)
                if kind is MechanismKind.PST:
                    budget = PrivacyBudget(0.0, 0.0)
                elif kind is MechanismKind.PPS:
                    budget = PrivacyBudget(0.0, math.inf)
                tasks.append((len(tasks), lam, variant, rho, budget, kwargs))
    if jobs <= 1:
        results = [_run_point_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_point_task, tasks))
    return [outcome for _, outcome in sorted(results, key=lambda r: r[0])]


def compare_iid_bursty(lam: Pmf, mechanism: Mechanism, horizon: int, seed: int = 0,
                       stickiness: float = 0.9, bursty: Optional[PacketStream] = None) -> dict:
    """Shape an i.i.d. stream and a bursty stream with the same marginal through one shaper."""
    iid = synthesize_stream(lam, horizon, seed)
    if bursty is None:
        bursty = synthesize_bursty_stream(lam, horizon, seed + 1, stickiness)
    out = {}
    for name, stream in (("iid", iid), ("bursty", bursty)):
        _, report = shape_stream(stream, mechanism.with_seed(seed + 7), lam=lam)
        out[name] = report
    out["analytic_EQ_bytes"] = expected_queue(lam, mechanism)
    return out


def realized_budget(mechanism: Mechanism) -> PrivacyBudget:
    audit = ldp_level(mechanism.effective_channel())
    return PrivacyBudget(audit.eps_size_realized, audit.eps_timing_realized)
