"""Data-driven learning: rank guards, convergence, shadow augmentation."""

import dataclasses

import numpy as np
import pytest

from slqt.errors import (ConfigError, MaxIterExceeded, NonPositiveP,
                         RankDeficient, ShadowUncontrollable)
from slqt.model import (BpiHyperParams, CostWeights, ReferenceGenerator,
                        StochasticSystem, TrackingProblem)
from slqt.bpi import feedforward_gains, solve_tracking
from slqt.learner import (ShadowConfig, learn_feedback, learn_feedforward,
                          learn_shadow, shadow_regressors)
from slqt.regressors import accumulate_raw_moments
from slqt.sim import SimConfig, probing_signal, propagate_moments_exact, run_ensemble
from slqt.symquad import vech


def scalar_plant():
    return StochasticSystem(A=np.array([[0.0]]), B=np.array([[1.0]]),
                            C=np.array([[0.1]]), D=np.array([[0.0]]),
                            H=np.array([[1.0]]))


def scalar_moments(hyper, l=60, probing=True):
    sys = scalar_plant()
    sig = probing_signal(1.0, 8, (-30.0, 30.0), seed=4) if probing else None
    cfg = SimConfig(h=1e-4, sample_period=1e-3, window=0.05, l=l, n_paths=1)
    shifted = StochasticSystem(sys.A - hyper.alpha_tilde * np.eye(1),
                               sys.B, sys.C, sys.D, sys.H)
    from slqt.sim import discounted_input
    traj = propagate_moments_exact(shifted, discounted_input(sig, hyper.alpha_tilde),
                                   np.array([1.0]), cfg)
    return accumulate_raw_moments(traj, hyper=hyper, config=cfg, output_map=sys.H)


def test_scalar_learner_hits_closed_form():
    hyper = BpiHyperParams()
    tab = scalar_moments(hyper)
    cost = CostWeights(Q=np.array([[1.0]]), R=np.array([[1.0]]))
    learned = learn_feedback(tab, cost, hyper)
    p_true = (0.01 + np.sqrt(4.0001)) / 2.0
    assert learned.P_star[0, 0] == pytest.approx(p_true, abs=1e-5)
    assert learned.K_star[0, 0] == pytest.approx(p_true, abs=1e-5)
    assert learned.certification.startswith("uncertified")
    assert learned.crossing_iteration >= 1
    assert learned.total_iterations == len(learned.K_trace)


def test_learner_validation_attaches_certificates():
    hyper = BpiHyperParams()
    tab = scalar_moments(hyper)
    cost = CostWeights(Q=np.array([[1.0]]), R=np.array([[1.0]]))
    learned = learn_feedback(tab, cost, hyper, validate_with=scalar_plant())
    assert learned.certification == "validated"
    assert learned.certificates is not None
    assert len(learned.certificates) == learned.total_iterations
    assert all(c.stabilizing for c in learned.certificates)
    assert all(c.abscissa < 0.0 for c in learned.certificates)


def test_unforced_data_with_input_noise_is_rank_deficient():
    sys = StochasticSystem(A=np.array([[-0.2]]), B=np.array([[1.0]]),
                           C=np.array([[0.1]]), D=np.array([[0.05]]),
                           H=np.array([[1.0]]))
    hyper = BpiHyperParams()
    cfg = SimConfig(h=1e-3, sample_period=1e-2, window=0.05, l=30, n_paths=16,
                    base_seed=2)
    ds = run_ensemble(sys, None, np.array([1.0]), cfg,
                      discount=hyper.alpha_tilde)
    tab = accumulate_raw_moments(ds, hyper=hyper, output_map=sys.H)
    cost = CostWeights(Q=np.array([[1.0]]), R=np.array([[1.0]]))
    with pytest.raises(RankDeficient) as exc:
        learn_feedback(tab, cost, hyper)
    assert exc.value.report is not None
    assert exc.value.report.rank < exc.value.report.required_rank


def test_swapped_window_endpoints_fail_loudly():
    # reversing the endpoint moments flips the sign of the value estimate;
    # the step-size update must refuse the indefinite matrix
    hyper = BpiHyperParams()
    tab = scalar_moments(hyper)
    cost = CostWeights(Q=np.array([[1.0]]), R=np.array([[1.0]]))
    bad = dataclasses.replace(tab, G0=tab.GT, GT=tab.G0)
    with pytest.raises(NonPositiveP):
        learn_feedback(bad, cost, hyper)


def test_iteration_budget_is_enforced():
    hyper = BpiHyperParams(max_iter=1)
    tab = scalar_moments(hyper)
    cost = CostWeights(Q=np.array([[1.0]]), R=np.array([[1.0]]))
    with pytest.raises(MaxIterExceeded):
        learn_feedback(tab, cost, hyper)


def shadow_pair(r_val=2.0):
    """Small two-state plant with a rotating reference and one shadow pair."""
    plant = StochasticSystem(A=np.array([[0.0, 1.0], [-1.5, -0.1]]),
                             B=np.array([[0.0], [1.0]]),
                             C=0.05 * np.eye(2), D=np.zeros((2, 1)),
                             H=np.array([[1.0, 0.0]]))
    cost = CostWeights(Q=np.array([[4.0]]), R=np.array([[r_val]]))
    shadow = ShadowConfig(
        A_a=np.array([[-0.5, 1.2], [-0.8, -1.0]]),
        u_a=probing_signal(2.0, 20, (-40.0, 40.0), seed=13),
        x_a0=np.zeros(2),
        F_a=np.array([[0.0, 1.3], [-1.3, 0.0]]),
        y_a0=np.array([1.0, -0.5]),
        h=1e-5,
    )
    return plant, cost, shadow


def test_shadow_rows_annihilate_consistent_pairs():
    plant, cost, shadow = shadow_pair()
    t_global = np.array([0.0, 0.3, 0.6, 0.9])
    omega_K, omega_F = shadow_regressors(shadow, plant.B, cost.R,
                                         t_global, window=0.1)
    rng = np.random.default_rng(7)
    scale_K = np.abs(omega_K).max()
    scale_F = np.abs(omega_F).max()
    for trial in range(10):
        P = rng.normal(size=(2, 2))
        P = P + P.T
        K = np.linalg.solve(cost.R, plant.B.T @ P)
        theta_k = np.concatenate([vech(P), K.ravel(order="F")])
        assert np.abs(omega_K @ theta_k).max() < 1e-6 * max(1.0, scale_K)
        Pi = rng.normal(size=(2, 2))
        F = np.linalg.solve(cost.R, plant.B.T @ Pi)
        theta_f = np.concatenate([Pi.ravel(order="F"), F.ravel(order="F")])
        assert np.abs(omega_F @ theta_f).max() < 1e-6 * max(1.0, scale_F)


def test_printed_variant_breaks_the_cancellation():
    plant, cost, shadow = shadow_pair()
    t_global = np.array([0.0, 0.3, 0.6])
    omega_K, _ = shadow_regressors(shadow, plant.B, cost.R, t_global,
                                   window=0.1, printed_variant=True)
    rng = np.random.default_rng(3)
    worst = 0.0
    for trial in range(10):
        P = rng.normal(size=(2, 2))
        P = P + P.T
        K = np.linalg.solve(cost.R, plant.B.T @ P)
        theta_k = np.concatenate([vech(P), K.ravel(order="F")])
        worst = max(worst, np.abs(omega_K @ theta_k).max())
    print("printed-variant residual:", worst)
    assert worst > 1e-3


def unforced_moments(plant, hyper, l=40):
    from scipy.linalg import expm

    from slqt.regressors import MomentTable

    cfg = SimConfig(h=1e-4, sample_period=2e-3, window=0.05, l=l, n_paths=1)
    shifted = StochasticSystem(plant.A - hyper.alpha_tilde * np.eye(plant.n),
                               plant.B, plant.C, plant.D, plant.H)
    ref = ReferenceGenerator(np.array([[0.0, 1.3], [-1.3, 0.0]]),
                             np.array([[1.0, 0.0]]), np.array([1.0, -0.5]))
    # two unforced segments from different states, on one global clock
    offset = cfg.duration + cfg.h
    tables = []
    for x0, dt in ((np.array([1.0, 0.6]), 0.0), (np.array([-0.7, 1.0]), offset)):
        seg_ref = ReferenceGenerator(ref.A_d, ref.H_d,
                                     expm(ref.A_d * dt) @ ref.x_d0)
        traj = propagate_moments_exact(shifted, None, x0, cfg,
                                       reference=seg_ref)
        tables.append(accumulate_raw_moments(traj, hyper=hyper, config=cfg,
                                             output_map=plant.H, t_offset=dt))
    return MomentTable.concat(tables), ref, cfg


def test_shadow_learning_matches_model_solution():
    plant, cost, shadow = shadow_pair()
    hyper = BpiHyperParams()
    tab, ref, cfg = unforced_moments(plant, hyper)
    omegas = shadow_regressors(shadow, plant.B, cost.R, tab.t_global,
                               window=cfg.window)
    learned = learn_shadow(tab, shadow, plant.B, cost, hyper, omegas=omegas,
                           validate_with=plant)
    prob = TrackingProblem(plant, ref, cost, hyper)
    sol = solve_tracking(prob)
    np.testing.assert_allclose(learned.K_star, sol.K, atol=1e-5)
    np.testing.assert_allclose(learned.P_star, sol.P, atol=1e-5)
    assert learned.certification == "validated"
    # feedforward through the same augmented rows reproduces the model gain
    n, m, n_d = tab.n, tab.m, tab.n_d
    aug = np.hstack([np.zeros((len(tab), n * n_d)), omegas[1][:, n * n_d:]])
    fit = learn_feedforward(tab, learned.K_star, learned.Lambda_star, cost,
                            hyper, extra_rows=omegas[1], extra_rank_matrix=aug)
    Pi_m, F_m = feedforward_gains(plant, cost, ref, sol.P, sol.K)
    np.testing.assert_allclose(fit.F, F_m, atol=1e-5)
    np.testing.assert_allclose(fit.Pi, Pi_m, atol=1e-4)


def test_shadow_requires_unforced_plant_data():
    plant, cost, shadow = shadow_pair()
    hyper = BpiHyperParams()
    sig = probing_signal(1.0, 4, (-10.0, 10.0), seed=1)
    cfg = SimConfig(h=1e-3, sample_period=1e-2, window=0.05, l=10, n_paths=4)
    ds = run_ensemble(plant, sig, np.array([1.0, 0.0]), cfg,
                      discount=hyper.alpha_tilde)
    tab = accumulate_raw_moments(ds, hyper=hyper, output_map=plant.H)
    with pytest.raises(ConfigError):
        learn_shadow(tab, shadow, plant.B, cost, hyper,
                     omegas=(np.zeros((10, 5)), np.zeros((10, 6))))


def test_shadow_rejects_uncontrollable_auxiliary():
    plant, cost, shadow = shadow_pair()
    hyper = BpiHyperParams()
    tab, _, _ = unforced_moments(plant, hyper, l=10)
    bad = dataclasses.replace(shadow, A_a=-np.eye(2))
    # B = [0, 1]' cannot excite the first auxiliary state of a diagonal A_a
    with pytest.raises(ShadowUncontrollable):
        learn_shadow(tab, bad, plant.B, cost, hyper,
                     omegas=(np.zeros((10, 5)), np.zeros((10, 6))))


def test_feedforward_output_map_scaling():
    plant, cost, shadow = shadow_pair()
    hyper = BpiHyperParams()
    tab, ref, cfg = unforced_moments(plant, hyper)
    omegas = shadow_regressors(shadow, plant.B, cost.R, tab.t_global,
                               window=cfg.window)
    learned = learn_shadow(tab, shadow, plant.B, cost, hyper, omegas=omegas)
    n, m, n_d = tab.n, tab.m, tab.n_d
    aug = np.hstack([np.zeros((len(tab), n * n_d)), omegas[1][:, n * n_d:]])
    one = learn_feedforward(tab, learned.K_star, learned.Lambda_star, cost,
                            hyper, h_d=ref.H_d, extra_rows=omegas[1],
                            extra_rank_matrix=aug)
    three = learn_feedforward(tab, learned.K_star, learned.Lambda_star, cost,
                              hyper, h_d=3.0 * ref.H_d, extra_rows=omegas[1],
                              extra_rank_matrix=aug)
    np.testing.assert_allclose(three.F, 3.0 * one.F, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(three.Pi, 3.0 * one.Pi, rtol=1e-8, atol=1e-10)
