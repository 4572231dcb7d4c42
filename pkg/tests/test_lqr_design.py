import json

import numpy as np
import numpy.testing as npt
import pytest
from scipy.linalg import solve_discrete_are

from ddltv.data_ensemble import run_ensemble, uniform_input_gen, uniform_x0_gen
from ddltv.ltv_core import ContractViolation, LtvDynamics, simulate
from ddltv.lqr_design import (
    LqrWeights,
    evaluate_cost,
    lqr_data_finite,
    lqr_data_periodic,
    riccati_finite,
    riccati_periodic,
    sqrtm_psd,
)
from ddltv.sdp_backend import ORACLE_CHAIN, SdpStatus
from tests.conftest import random_plant

SCALAR_UNIT = LtvDynamics(n=1, m=1, a_of_k=lambda k: [[1.0]], b_of_k=lambda k: [[1.0]])


def controllable_test_plant(rng, n, m, horizon):
    return random_plant(rng, n, m, horizon)


def test_riccati_terminal_free_is_zero_gain():
    w = LqrWeights.finite([[1.0]], [[1.0]], [[0.0]], horizon=1)
    orc = riccati_finite(SCALAR_UNIT, w)
    npt.assert_allclose(orc.gain(0), [[0.0]])


def test_riccati_converges_to_stationary_gain():
    # fixed point of the scalar algebraic Riccati equation: the positive root
    # of p^2 = 1 + p gives K = -p/(1+p)
    p_star = (1 + np.sqrt(5)) / 2
    k_star = -p_star / (1 + p_star)
    w = LqrWeights.finite([[1.0]], [[1.0]], [[0.0]], horizon=80)
    orc = riccati_finite(SCALAR_UNIT, w)
    assert orc.gain(0)[0, 0] == pytest.approx(k_star, abs=1e-10)


def test_riccati_cost_identity():
    rng = np.random.default_rng(11)
    plant = controllable_test_plant(rng, 2, 1, 5)
    w = LqrWeights.finite(np.diag([1.0, 2.0]), [[0.5]], np.eye(2), horizon=5)
    orc = riccati_finite(plant, w)
    x0 = np.array([0.4, -0.9])
    traj = simulate(plant, x0, orc.policy(), T=5)
    assert evaluate_cost(traj, w) == pytest.approx(float(x0 @ orc.certificate[0] @ x0),
                                                   abs=1e-9)


def test_riccati_periodic_reduces_to_dare():
    w = LqrWeights.periodic([[1.0]], [[1.0]], period=1)
    orc = riccati_periodic(SCALAR_UNIT, w)
    p = solve_discrete_are(np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    k_dare = -np.linalg.solve(1 + p, p)
    npt.assert_allclose(orc.gain(0), k_dare, atol=1e-9)


def test_riccati_periodic_start_invariance(periodic_plant):
    w = LqrWeights.periodic(np.diag([1.0, 0.5]), [[0.1]], period=4)
    a = riccati_periodic(periodic_plant, w)
    b = riccati_periodic(periodic_plant, w, p_start=2.0 * np.eye(2))
    for k in range(4):
        npt.assert_allclose(a.gain(k), b.gain(k), atol=1e-8)


def test_lqr_data_matches_riccati():
    rng = np.random.default_rng(42)
    n, m, n_hor = 2, 1, 8
    plant = controllable_test_plant(rng, n, m, n_hor)
    w = LqrWeights.finite(np.diag([2.0, 1.0]), [[0.5]], np.eye(2), horizon=n_hor)
    orc = riccati_finite(plant, w)
    ens = run_ensemble(plant, L=n + m + 1, window=(0, n_hor),
                       input_gen=uniform_input_gen(3, m), x0_gen=uniform_x0_gen(4, n))
    res = lqr_data_finite(ens, w, tol=ORACLE_CHAIN)
    assert res.status is SdpStatus.OPTIMAL
    for k in range(n_hor):
        npt.assert_allclose(res.gains.gain(k), orc.gain(k), atol=1e-6)


def test_lqr_data_terminal_free_single_step():
    rng = np.random.default_rng(13)
    plant = controllable_test_plant(rng, 2, 1, 1)
    w = LqrWeights.finite(np.eye(2), [[1.0]], np.zeros((2, 2)), horizon=1)
    ens = run_ensemble(plant, L=4, window=(0, 1),
                       input_gen=uniform_input_gen(5, 1), x0_gen=uniform_x0_gen(6, 2))
    res = lqr_data_finite(ens, w, tol=ORACLE_CHAIN)
    assert res.ok
    npt.assert_allclose(res.gains.gain(0), np.zeros((1, 2)), atol=1e-6)


def test_lqr_objective_consistent_with_solution():
    rng = np.random.default_rng(21)
    plant = controllable_test_plant(rng, 2, 1, 6)
    w = LqrWeights.finite(np.diag([1.0, 0.5]), [[0.2]], np.eye(2), horizon=6)
    ens = run_ensemble(plant, L=4, window=(0, 6),
                       input_gen=uniform_input_gen(7, 1), x0_gen=uniform_x0_gen(8, 2))
    res = lqr_data_finite(ens, w, tol=ORACLE_CHAIN)
    assert res.ok
    recomputed = float(np.trace(w.qf @ res.s[6]))
    for k in range(6):
        recomputed += float(np.trace(w.q(k) @ res.s[k])) + res.o_trace[k]
    assert res.objective == pytest.approx(recomputed, rel=1e-8)


def test_lqr_data_periodic_matches_periodic_riccati(periodic_plant):
    w = LqrWeights.periodic(np.diag([1.0, 0.5]), [[0.1]], period=4)
    orc = riccati_periodic(periodic_plant, w)
    ens = run_ensemble(periodic_plant, L=4, window=(0, 4),
                       input_gen=uniform_input_gen(9, 1), x0_gen=uniform_x0_gen(10, 2))
    res = lqr_data_periodic(ens, w, tol=ORACLE_CHAIN)
    assert res.ok
    for k in range(4):
        npt.assert_allclose(res.gains.gain(k), orc.gain(k), atol=1e-5)
    # periodic closure is exact by construction
    npt.assert_array_equal(res.s[4], res.s[0])


def test_lqr_data_periodic_phi_one_matches_dare():
    plant = LtvDynamics(n=1, m=1, a_of_k=lambda k: [[0.9]], b_of_k=lambda k: [[1.0]],
                        period=1)
    w = LqrWeights.periodic([[1.0]], [[1.0]], period=1)
    ens = run_ensemble(plant, L=3, window=(0, 1),
                       input_gen=uniform_input_gen(11, 1), x0_gen=uniform_x0_gen(12, 1))
    res = lqr_data_periodic(ens, w, tol=ORACLE_CHAIN)
    p = solve_discrete_are(np.array([[0.9]]), np.eye(1), np.eye(1), np.eye(1))
    k_dare = -np.linalg.solve(1 + p, p * 0.9)
    npt.assert_allclose(res.gains.gain(0), k_dare, atol=1e-6)


def test_input_weight_scaling_reduces_input_energy(periodic_plant):
    ens = run_ensemble(periodic_plant, L=4, window=(0, 4),
                       input_gen=uniform_input_gen(9, 1), x0_gen=uniform_x0_gen(10, 2))
    energies = []
    for r_scale in (1.0, 10.0):
        w = LqrWeights.periodic(np.diag([1.0, 0.5]), [[0.1 * r_scale]], period=4)
        res = lqr_data_periodic(ens, w, tol=ORACLE_CHAIN)
        assert res.ok
        traj = simulate(periodic_plant, [1.0, -0.5], res.gains.policy(), T=12)
        energies.append(float(np.sum(traj.u ** 2)))
    assert energies[1] < energies[0]


def test_evaluate_cost_trivials():
    w = LqrWeights.finite(np.eye(2), [[1.0]], np.eye(2), horizon=1)
    zero = simulate(LtvDynamics.lti(np.zeros((2, 2)), np.zeros((2, 1))),
                    [0.0, 0.0], lambda k, z: [0.0], T=1)
    assert evaluate_cost(zero, w) == 0.0

    from ddltv.ltv_core import Trajectory

    traj = Trajectory(x=np.array([[1.0, 2.0], [0.5, -1.0]]), u=np.array([[3.0]]))
    expect = (1 + 4) + 9 + (0.25 + 1)
    assert evaluate_cost(traj, w) == pytest.approx(expect)


def test_evaluate_cost_requires_horizon():
    w = LqrWeights.finite(np.eye(1), [[1.0]], np.eye(1), horizon=5)
    traj = simulate(LtvDynamics.lti(0.5, 1.0), [1.0], lambda k, z: [0.0], T=3)
    with pytest.raises(ContractViolation):
        evaluate_cost(traj, w)


def test_optimal_cost_beats_perturbed_gains():
    rng = np.random.default_rng(33)
    plant = controllable_test_plant(rng, 2, 1, 6)
    w = LqrWeights.finite(np.diag([1.0, 1.0]), [[0.4]], np.eye(2), horizon=6)
    orc = riccati_finite(plant, w)
    x0 = np.array([0.6, -0.3])
    best = evaluate_cost(simulate(plant, x0, orc.policy(), T=6), w)
    for _ in range(20):
        noisy_gains = {k: orc.gain(k) + 0.05 * rng.standard_normal((1, 2))
                       for k in range(6)}
        traj = simulate(plant, x0, lambda k, z: noisy_gains[k] @ z, T=6)
        assert evaluate_cost(traj, w) >= best - 1e-9


def test_weight_validation():
    with pytest.raises(ContractViolation):
        LqrWeights.finite([[1.0]], [[0.0]], [[0.0]], horizon=2).r(0)  # R singular
    with pytest.raises(ContractViolation):
        LqrWeights.finite([[-1.0]], [[1.0]], [[0.0]], horizon=2).q(0)  # Q indefinite
    with pytest.raises(ContractViolation):
        LqrWeights(q_of_k=lambda k: [[1.0]], r_of_k=lambda k: [[1.0]])  # no horizon


def test_weights_from_json():
    doc = {"q": [[1.0, 0.0], [0.0, 2.0]], "r": [[0.5]], "qf": [[1.0, 0.0], [0.0, 1.0]],
           "horizon": 4}
    w = LqrWeights.from_json(doc)
    assert w.horizon == 4
    npt.assert_array_equal(w.q(0), [[1.0, 0.0], [0.0, 2.0]])
    wp = LqrWeights.from_json({"q": [[1.0]], "r": [[1.0]], "period": 3})
    assert wp.period == 3


def test_sqrtm_psd():
    rng = np.random.default_rng(2)
    mat = rng.uniform(-1, 1, (3, 3))
    psd = mat @ mat.T
    root = sqrtm_psd(psd)
    npt.assert_allclose(root @ root, psd, atol=1e-11)
    npt.assert_allclose(root, root.T, atol=1e-12)


def test_short_data_window_warns_and_truncates():
    rng = np.random.default_rng(55)
    plant = controllable_test_plant(rng, 2, 1, 6)
    w = LqrWeights.finite(np.eye(2), [[1.0]], np.zeros((2, 2)), horizon=6)
    ens = run_ensemble(plant, L=4, window=(0, 4),
                       input_gen=uniform_input_gen(1, 1), x0_gen=uniform_x0_gen(2, 2))
    with pytest.warns(UserWarning):
        res = lqr_data_finite(ens, w, tol=ORACLE_CHAIN)
    assert res.diagnostics["horizon"] == 4
