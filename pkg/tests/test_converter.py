import numpy as np
import numpy.testing as npt
import pytest

from ddltv.converter import (
    ConverterParams,
    build_converter_ltv,
    converter_ab,
    deviation_defects,
    nonlinear_rhs,
    reference_trajectory,
    simulate_converter_deviation,
)
from ddltv.data_ensemble import check_rank, fold_periodic
from ddltv.ltv_core import ContractViolation, monodromy, simulate


@pytest.fixture(scope="module")
def params():
    return ConverterParams()


def test_parameters_validate():
    with pytest.raises(ContractViolation):
        ConverterParams(inductance=-1.0)
    with pytest.raises(ContractViolation):
        ConverterParams(phi=39)  # inconsistent with 1/(freq*delta)


def test_grid_current_self_term(params):
    expected = 1.0 - params.delta * params.resistance / params.inductance
    for k in (0, 7, 120):
        a_mat, _ = converter_ab(params, k)
        assert a_mat[1, 1] == pytest.approx(expected)


def test_exact_periodicity(params):
    for k in (0, 3, 17):
        a0, b0 = converter_ab(params, k)
        a1, b1 = converter_ab(params, k + params.phi)
        npt.assert_allclose(a0, a1, atol=1e-12)
        npt.assert_allclose(b0, b1, atol=1e-12)


def test_open_loop_instability(params):
    plant, _ = build_converter_ltv(params)
    zero = {k: np.zeros((1, 2)) for k in range(params.phi)}
    _, rho = monodromy(plant, zero, params.phi)
    assert rho > 1.0


def test_reference_is_an_equilibrium_of_the_deviation_model(params):
    traj = simulate_converter_deviation(params, [0.0, 0.0], lambda k: 0.0, 40)
    assert np.abs(traj.x).max() < 1e-7


def test_reference_consistency(params):
    # the reference signals satisfy the nonlinear dynamics exactly
    for t in (0.0, 0.004, 0.011):
        ref = reference_trajectory(params, t)
        rate = nonlinear_rhs(params, [ref["v_dc"], ref["i_lg"]], ref["v_l"],
                             ref["i_s"], ref["v_g"])
        assert abs(rate[0]) < 1e-9  # DC bus holds its setpoint
        w = params.omega
        amp = np.sqrt(2.0) / params.v_g_rms
        di_expected = amp * w * (-params.p_ref * np.sin(w * t) + params.q_ref * np.cos(w * t))
        assert rate[1] == pytest.approx(di_expected, rel=1e-9)


def test_dc_bus_guard(params):
    with pytest.raises(ContractViolation):
        nonlinear_rhs(params, [-1.0, 0.0], 0.0, 0.0, 0.0)


def test_defects_are_second_order_small(params):
    rng = np.random.default_rng(0)
    traj = simulate_converter_deviation(params, [0.05, 0.05],
                                        lambda k: float(rng.uniform(0, 0.01)), 120)
    d = deviation_defects(params, traj)
    assert np.abs(d).max() < 0.1 * np.abs(traj.x).max()


def test_folded_nonlinear_data_satisfies_rank(params):
    rng = np.random.default_rng(1)
    u_seq = rng.uniform(0, 0.01, 120)
    traj = simulate_converter_deviation(params, rng.uniform(0, 0.1, 2),
                                        lambda k: u_seq[k], 120)
    ens = fold_periodic(traj, params.phi, 3)
    assert all(check_rank(ens).values())


def test_ltv_model_tracks_nonlinear_with_defects(params):
    plant, _ = build_converter_ltv(params)
    rng = np.random.default_rng(2)
    u_seq = rng.uniform(0, 0.01, 40)
    traj = simulate_converter_deviation(params, [0.02, 0.02], lambda k: u_seq[k], 40)
    d = deviation_defects(params, traj)
    x = traj.x[0]
    for k in range(40):
        x = plant.a(k) @ x + plant.b(k) @ traj.u[k] + d[k]
        npt.assert_allclose(x, traj.x[k + 1], atol=1e-12)


def test_feedback_input_signature(params):
    gains = np.array([[0.3, -0.2]])
    traj = simulate_converter_deviation(params, [0.05, 0.0],
                                        lambda k, dev: gains @ dev, 10)
    npt.assert_allclose(traj.u[0], gains @ traj.x[0], atol=1e-12)
