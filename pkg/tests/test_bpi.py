"""Two-phase policy iteration on the damped-oscillator benchmark.

Reference numbers were computed independently with direct dense
Lyapunov/Riccati solves at tight tolerances before this module was
wired up, and are frozen here.
"""

import numpy as np
import pytest

from slqt.benchmarks import damped_oscillator
from slqt.bpi import feedforward_gains, run_phase1, solve_tracking
from slqt.errors import InitConditionViolated, MaxIterExceeded
from slqt.model import (BpiHyperParams, CostWeights, ReferenceGenerator,
                        StochasticSystem, TrackingProblem, is_stabilizing,
                        spectral_abscissa)

ALPHA_TRACE = [0.523930577, 0.721031001, 1.704852975]
K_STAR = np.array([[26.04653, 7.592634]])
P_STAR = np.array([[2.555522, 0.275459], [0.275459, 0.073807]])
F_CASE1 = np.array([[-29.995822, 0.0, 0.0]])
F_CASE4 = np.array([[-89.987466, -61.576452, 16.622196]])


@pytest.fixture(scope="module")
def bundle():
    return damped_oscillator()


@pytest.fixture(scope="module")
def solution(bundle):
    prob = TrackingProblem(system=bundle.plant, reference=bundle.reference,
                           cost=bundle.cost, hyper=bundle.hyper)
    return solve_tracking(prob)


def test_phase1_alpha_trace(solution):
    got = solution.history["alpha_trace"]
    np.testing.assert_allclose(got, ALPHA_TRACE, rtol=0, atol=1e-6)
    diffs = np.diff([0.1] + list(got))
    assert (diffs > 0).all(), "phase-I alpha must strictly increase"


def test_crossing_and_total_iterations(solution):
    assert solution.history["crossing_iteration"] == 3
    total = len(solution.history["phase1"]) + len(solution.history["phase2"])
    assert total == 9


def test_converged_gain_and_value(solution):
    np.testing.assert_allclose(solution.K, K_STAR, rtol=0, atol=1e-5)
    np.testing.assert_allclose(solution.P, P_STAR, rtol=0, atol=1e-5)
    D = np.array([[0.0], [0.1]])
    np.testing.assert_allclose(solution.Lambda, D.T @ solution.P @ D,
                               rtol=0, atol=1e-12)


def test_every_iterate_is_stabilizing_at_its_level(bundle, solution):
    for st in solution.history["phase1"]:
        cert = is_stabilizing(bundle.plant, st.K, alpha=st.alpha, gamma=1.0)
        assert cert.stabilizing, f"phase-1 iterate {st.index} not in Z(alpha)"
    for st in solution.history["phase2"]:
        cert = is_stabilizing(bundle.plant, st.K)
        assert cert.stabilizing


def test_crossing_gain_stabilizes_original_system(bundle, solution):
    K_cross = solution.history["phase1"][-1].K
    assert spectral_abscissa(bundle.plant, K_cross) < 0


def test_phase2_value_matrices_decrease(solution):
    phase2 = solution.history["phase2"]
    for a, b in zip(phase2, phase2[1:]):
        assert np.linalg.eigvalsh(a.P - b.P).min() >= -1e-8


def test_feedforward_cases(bundle, solution):
    sys, cost = bundle.plant, bundle.cost
    ref1 = bundle.reference_for_case(1)
    _, F1 = feedforward_gains(sys, cost, ref1, solution.P, solution.K)
    np.testing.assert_allclose(F1, F_CASE1, rtol=0, atol=1e-5)
    # entries driven by the unobserved oscillator block vanish identically
    assert F1[0, 1] == 0.0 and F1[0, 2] == 0.0
    _, F4 = feedforward_gains(sys, cost, bundle.reference_for_case(4),
                              solution.P, solution.K)
    np.testing.assert_allclose(F4, F_CASE4, rtol=0, atol=1e-5)
    for case in (7, 8):
        _, F = feedforward_gains(sys, cost, bundle.reference_for_case(case),
                                 solution.P, solution.K)
        assert F[0, 0] == 0.0


def test_feedforward_linearity_in_output_map(bundle, solution):
    sys, cost = bundle.plant, bundle.cost
    _, F1 = feedforward_gains(sys, cost, bundle.reference_for_case(1),
                              solution.P, solution.K)
    _, F2 = feedforward_gains(sys, cost, bundle.reference_for_case(2),
                              solution.P, solution.K)
    _, F3 = feedforward_gains(sys, cost, bundle.reference_for_case(3),
                              solution.P, solution.K)
    np.testing.assert_array_equal(F2, 2.0 * F1)
    np.testing.assert_allclose(F3, 3.0 * F1, rtol=1e-13, atol=1e-13)


def test_init_condition_violated():
    sys = StochasticSystem(A=[[1.0]], B=[[1.0]], C=[[1.0]], D=[[0.0]],
                           H=[[1.0]])
    prob = TrackingProblem(
        system=sys,
        reference=ReferenceGenerator(A_d=[[0.0]], H_d=[[1.0]], x_d0=[0.0]),
        cost=CostWeights(Q=[[1.0]], R=[[1.0]]),
        hyper=BpiHyperParams(gamma=1.0, alpha0=0.1))
    with pytest.raises(InitConditionViolated):
        solve_tracking(prob)


def test_max_iter_exceeded_in_phase1(bundle):
    prob = TrackingProblem(system=bundle.plant, reference=bundle.reference,
                           cost=bundle.cost,
                           hyper=BpiHyperParams(max_iter=2))
    with pytest.raises(MaxIterExceeded):
        run_phase1(prob)


def test_stop_rules_agree(bundle):
    base = dict(system=bundle.plant, reference=bundle.reference,
                cost=bundle.cost)
    by_gain = solve_tracking(TrackingProblem(
        hyper=BpiHyperParams(stop_rule="gain"), **base))
    by_value = solve_tracking(TrackingProblem(
        hyper=BpiHyperParams(stop_rule="value"), **base))
    np.testing.assert_allclose(by_gain.K, by_value.K, rtol=0, atol=1e-4)
    np.testing.assert_allclose(by_gain.P, by_value.P, rtol=0, atol=1e-4)


def test_closed_loop_abscissa_negative(bundle, solution):
    assert spectral_abscissa(bundle.plant, solution.K) < 0
    np.testing.assert_allclose(spectral_abscissa(bundle.plant, solution.K),
                               -7.062865, atol=1e-4)
