import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iotshaper.core import ChannelMatrix, PacketAlphabet, Pmf, PrivacyBudget, input_byte_rate
from iotshaper.optimizer import (
    InfeasibleError,
    MtuWarning,
    OptimizationProblem,
    Variant,
    build_grid,
    deterministic_mechanism,
    deterministic_rate,
    solve,
    sweep,
)
from iotshaper.privacy import satisfies_budget
from iotshaper.queue_analysis import expected_queue
from iotshaper.shaping import MechanismKind
from iotshaper.traces import DEVICE_PMFS, zipf_pmf

A3 = PacketAlphabet([0, 32, 64])
ZIPF1 = zipf_pmf(A3, 1)
CAMERA = DEVICE_PMFS["camera"]
INF = math.inf


def test_deterministic_rate_examples():
    assert deterministic_rate(CAMERA, 0.5, "pst-star") == 46
    assert deterministic_rate(CAMERA, 0.5, "pps-star") == 302
    lam = Pmf.from_sizes([0, 64], [0.5, 0.5])
    # integer B_in = 32: the boundary must be pushed to strict stability
    assert deterministic_rate(lam, 1 - 1e-12, "pst-star") == 33
    with pytest.raises(ValueError):
        deterministic_rate(lam, 1.0, "pst-star")
    with pytest.raises(ValueError):
        deterministic_rate(lam, 0.5, "dps")


def test_deterministic_rate_mtu_warning():
    with pytest.warns(MtuWarning):
        deterministic_rate(CAMERA, 0.1, "pps-star")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        deterministic_rate(CAMERA, 0.5, "pst-star")


def test_deterministic_mechanism_is_stable():
    mech = deterministic_mechanism(CAMERA, 0.5, "pps-star")
    assert mech.kind is MechanismKind.PPS_STAR
    assert mech.output_byte_rate(CAMERA) > input_byte_rate(CAMERA)


def test_pst_delta_solution_when_size_in_alphabet():
    rho = input_byte_rate(CAMERA) / 142
    res = solve(OptimizationProblem(CAMERA, rho, PrivacyBudget(0, 0), Variant.PST))
    assert res.solution.probs.tolist() == pytest.approx([0, 1, 0], abs=1e-9)
    assert res.achieved_rho == pytest.approx(rho, rel=1e-9)


@pytest.mark.parametrize("device", ["sleep", "camera", "switch"])
@pytest.mark.parametrize("budget", [(0, 0), (1, 1), (0.5, 3)])
def test_pad_only_collapse(device, budget):
    lam = DEVICE_PMFS[device]
    res = solve(OptimizationProblem(lam, None, PrivacyBudget(*budget), Variant.DPS, pad_only=True))
    expected = np.zeros((3, 3))
    expected[:, -1] = 1
    assert np.allclose(res.channel.rows, expected, atol=1e-12)
    assert res.objective_eq == 0
    assert res.achieved_rho == pytest.approx(input_byte_rate(lam) / lam.alphabet.largest, abs=1e-12)


def test_pad_only_pps_shape():
    res = solve(OptimizationProblem(CAMERA, None, PrivacyBudget(0, INF), Variant.PPS, pad_only=True))
    assert res.achieved_rho == pytest.approx(22.58 / (270 * 0.15), abs=1e-12)
    assert res.channel.rows[0].tolist() == [1, 0, 0]


def test_pad_only_unreachable_rho():
    with pytest.raises(InfeasibleError):
        solve(OptimizationProblem(CAMERA, 0.5, PrivacyBudget(0, 0), Variant.DPS, pad_only=True))


def test_infeasible_rho():
    with pytest.raises(InfeasibleError, match="feasible range"):
        solve(OptimizationProblem(ZIPF1, 0.2, PrivacyBudget(1, 1)))
    with pytest.raises(InfeasibleError):
        solve(OptimizationProblem(ZIPF1, 0.5, PrivacyBudget(0, INF), Variant.PPS))
    with pytest.raises(ValueError):
        OptimizationProblem(ZIPF1, None)


@pytest.mark.parametrize("rho", [0.4, 0.6, 0.8])
def test_nesting_dps_reduces_to_pst_and_pps(rho):
    dps00 = solve(OptimizationProblem(ZIPF1, rho, PrivacyBudget(0, 0)))
    pst = solve(OptimizationProblem(ZIPF1, rho, PrivacyBudget(0, 0), Variant.PST))
    tol = 2 * max(dps00.solver_gap, pst.solver_gap) + 1e-9 * (1 + pst.objective_eq)
    assert dps00.objective_eq == pytest.approx(pst.objective_eq, abs=tol)
    if rho >= OptimizationProblem(ZIPF1, rho, variant=Variant.PPS).feasible_range()[0]:
        dps0i = solve(OptimizationProblem(ZIPF1, rho, PrivacyBudget(0, INF)))
        pps = solve(OptimizationProblem(ZIPF1, rho, PrivacyBudget(0, INF), Variant.PPS))
        assert dps0i.objective_eq == pytest.approx(pps.objective_eq, abs=tol)


@given(st.floats(0.0, 3.0), st.floats(0.0, 6.0), st.floats(0.35, 0.95))
@settings(max_examples=25, deadline=None)
def test_solutions_are_private_and_efficient(eps_s, eps_t, rho):
    budget = PrivacyBudget(eps_s, eps_t)
    res = solve(OptimizationProblem(ZIPF1, rho, budget))
    assert satisfies_budget(res.channel, budget, tol=1e-7)
    assert res.achieved_rho >= rho - 1e-7
    assert res.achieved_rho == pytest.approx(rho, abs=1e-4)
    assert res.objective_eq == pytest.approx(expected_queue(ZIPF1, res.channel, method="chain"), rel=1e-6, abs=1e-9)
    assert res.solver_gap <= 1e-4 * (1 + res.objective_eq)


def test_unconstrained_beats_coarse_grid():
    rho = 0.9
    res = solve(OptimizationProblem(ZIPF1, rho))
    cap = input_byte_rate(ZIPF1) / rho
    steps = [np.array(p) / 4 for p in itertools.product(range(5), repeat=3) if sum(p) == 4]
    best = math.inf
    for r0, r1, r2 in itertools.product(steps, repeat=3):
        rows = np.array([r0, r1, r2])
        b_out = float(ZIPF1.probs @ rows @ A3.sizes)
        if input_byte_rate(ZIPF1) < b_out <= cap:
            best = min(best, expected_queue(ZIPF1, ChannelMatrix(A3, A3, rows)))
    assert res.objective_eq <= best + 1e-6


def test_deterministic_from_fixed_start():
    p = OptimizationProblem(CAMERA, 0.4, PrivacyBudget(1, 1))
    a, b = solve(p), solve(p)
    assert np.array_equal(a.channel.rows, b.channel.rows)


def test_non_vertex_start_reaches_same_optimum():
    p = OptimizationProblem(ZIPF1, 0.6, PrivacyBudget(0, 0), Variant.PST)
    ref = solve(p)
    target = input_byte_rate(ZIPF1) / 0.6
    # mix of all three sizes with the target mean
    w = 0.1
    # p0 = w, then 32 p1 + 64 p2 = target with p1 + p2 = 1 - w
    p2 = (target - 32 * (1 - w)) / 32
    mu = np.array([w, 1 - w - p2, p2])
    assert np.all(mu >= 0)
    res = solve(p, initial=mu)
    assert res.objective_eq == pytest.approx(ref.objective_eq, abs=2 * (ref.solver_gap + res.solver_gap) + 1e-9)


def test_sweep_records_failures_in_order():
    problems = build_grid(ZIPF1, ["dps"], [0.2, 0.6], [(1, 1), (5, 5)])
    entries = sweep(problems)
    assert [e.index for e in entries] == [0, 1, 2, 3]
    assert entries[0].status.startswith("infeasible") and entries[0].row()["objective_EQ_bytes"] == ""
    assert entries[2].status == "ok"
    assert entries[3].result.objective_eq <= entries[2].result.objective_eq + 2e-6
    row = entries[2].row()
    assert row["variant"] == "dps" and row["rho_target"] == 0.6 and row["eps_size"] == 1


def test_sweep_parallel_matches_serial():
    problems = build_grid(ZIPF1, ["dps", "pst"], [0.5, 0.8], [(1, 1)])
    serial = [e.row() for e in sweep(problems)]
    parallel = [e.row() for e in sweep(problems, jobs=2)]
    assert serial == parallel
