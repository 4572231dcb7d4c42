import numpy as np
import numpy.testing as npt
import pytest

from ddltv.data_ensemble import recover_g, run_ensemble, uniform_input_gen, uniform_x0_gen
from ddltv.ltv_core import ContractViolation, NoiseModel, simulate
from ddltv.robust_design import (
    BracketError,
    NoiseBound,
    OutputMaps,
    PerformanceIndex,
    check_model_performance,
    check_noise_bound,
    design_robust_bounded,
    design_robust_performance,
    design_robust_performance_periodic,
    design_robust_snr,
    hinf_gamma_search,
    iss_bound,
    model_robust_performance,
    performance_sum,
    residual_oracle,
)
from ddltv.sdp_backend import SdpStatus
from ddltv.stability_design import DesignResult, GainSchedule, design_bounded, trajectory_bound
from tests.conftest import make_periodic_plant


@pytest.fixture(scope="module")
def plant():
    return make_periodic_plant()


@pytest.fixture(scope="module")
def noisy_ens(plant):
    noise = NoiseModel(n=2, seed=11, process=("uniform", -0.005, 0.005),
                       measurement=("uniform", -0.002, 0.002))
    return run_ensemble(plant, L=5, window=(0, 4),
                        input_gen=uniform_input_gen(1, 1), x0_gen=uniform_x0_gen(2, 2),
                        noise=noise)


@pytest.fixture(scope="module")
def clean_ens(plant):
    return run_ensemble(plant, L=5, window=(0, 4),
                        input_gen=uniform_input_gen(3, 1), x0_gen=uniform_x0_gen(4, 2))


HINF_MAPS = OutputMaps.constant(np.eye(2), np.zeros((2, 1)), np.zeros((2, 2)))


def test_residual_oracle_noise_free_is_zero(plant, clean_ens):
    res = residual_oracle(plant, clean_ens)
    for k in res.steps:
        npt.assert_array_equal(res.r[k], np.zeros((2, 5)))


def test_residual_oracle_process_only(plant):
    noise = NoiseModel(n=2, seed=5, process=("uniform", -0.01, 0.01))
    ens = run_ensemble(plant, L=4, window=(0, 4),
                       input_gen=uniform_input_gen(6, 1), x0_gen=uniform_x0_gen(7, 2),
                       noise=noise)
    res = residual_oracle(plant, ens)
    for k in res.steps:
        npt.assert_allclose(res.r[k], -ens.D[k], atol=1e-15)


def test_noisy_representation_identity(plant, noisy_ens):
    res = residual_oracle(plant, noisy_ens)
    gain = np.array([[0.3, -0.5]])
    for k in noisy_ens.steps:
        g = recover_g(noisy_ens, gain, k, use_noisy=True)
        a_cl = plant.a(k) + plant.b(k) @ gain
        lhs = (noisy_ens.Z[k + 1] + res.r[k]) @ g
        assert np.abs(lhs - a_cl).max() < 1e-10


def test_check_noise_bound_trivial_identity(plant, clean_ens):
    res = residual_oracle(plant, clean_ens)
    triple = NoiseBound.explicit(np.eye(2), np.zeros((2, 5)), -np.eye(5))
    assert all(check_noise_bound(res, triple, clean_ens).values())


def test_snr_bound_iff_condition(plant, noisy_ens):
    # the SNR-form verdict matches R R' <= (1/gamma) Z(k+1) Z(k+1)' directly
    res = residual_oracle(plant, noisy_ens)
    for gamma in (1e-3, 1.0, 1e4, 1e7):
        verdicts = check_noise_bound(res, NoiseBound.snr(gamma), noisy_ens)
        for k in res.steps:
            z_next = noisy_ens.Z[k + 1]
            direct = np.linalg.eigvalsh(
                z_next @ z_next.T / gamma - res.r[k] @ res.r[k].T).min() >= -1e-12
            assert verdicts[k] == direct


def test_scaled_noise_breaks_bound(plant, noisy_ens):
    res = residual_oracle(plant, noisy_ens)
    bound = NoiseBound.ball(1.05 * res.max_norm(), scale=1.0)
    assert all(check_noise_bound(res, bound, noisy_ens).values())
    inflated = type(res)(r={k: 10 * v for k, v in res.r.items()}, v=res.v, d=res.d)
    assert not all(check_noise_bound(inflated, bound, noisy_ens).values())


def test_robust_bounded_noise_free_matches_plain_design(plant, clean_ens):
    # loose ball bound on noise-free data; the constructor's default
    # multiplier scaling keeps the S-procedure conservatism negligible
    loose = NoiseBound.ball(1e-6)
    robust = design_robust_bounded(clean_ens, loose, eta=1.0, rho=8.0)
    plain = design_bounded(clean_ens, eta=1.0, rho=8.0)
    assert robust.status.ok == plain.status.ok
    # and the robust certificate still satisfies the model-based decrease
    worst = -np.inf
    for k in range(4):
        a_cl = plant.a(k) + plant.b(k) @ robust.schedule.gain(k)
        mat = a_cl @ robust.schedule.certificate[k] @ a_cl.T \
            - robust.schedule.certificate[k + 1] + np.eye(2)
        worst = max(worst, np.linalg.eigvalsh(mat).max())
    assert worst <= 1e-6


def test_robust_bounded_feasible_and_sound(plant, noisy_ens):
    res_or = residual_oracle(plant, noisy_ens)
    bound = NoiseBound.ball(1.05 * res_or.max_norm())
    assert all(check_noise_bound(res_or, bound, noisy_ens).values())
    result = design_robust_bounded(noisy_ens, bound, eta=1.0, rho=8.0)
    assert result.ok
    # S-procedure soundness: the model-based decrease holds with ground truth
    for k in range(4):
        a_cl = plant.a(k) + plant.b(k) @ result.schedule.gain(k)
        mat = a_cl @ result.schedule.certificate[k] @ a_cl.T \
            - result.schedule.certificate[k + 1] + np.eye(2)
        assert np.linalg.eigvalsh(mat).max() <= 1e-6


def test_robust_bounded_out_of_contract_flagged(plant, noisy_ens):
    res_or = residual_oracle(plant, noisy_ens)
    tight = NoiseBound.ball(0.05 * res_or.max_norm())
    assert not all(check_noise_bound(res_or, tight, noisy_ens).values())
    # harness semantics: the design may solve, but the guarantee is void;
    # the noise-bound check is what flags the run


def test_snr_design_cross_certifies(plant, clean_ens):
    zmax = max(np.linalg.norm(clean_ens.X[k + 1] @ clean_ens.X[k + 1].T, 2)
               for k in clean_ens.steps)
    rho = 3 * (1 + zmax)
    result, a_map = design_robust_snr(clean_ens, eta=1.0, rho=rho)
    assert result.ok
    assert all(a >= -1e-9 for a in a_map.values())
    # re-solving the fixed-bound problem at gamma(k) = a(k) (plus slack for
    # the strict margin) stays feasible
    gamma_fn = lambda k: a_map[k] * (1 + 1e-6) + 1e-9
    fixed = design_robust_bounded(clean_ens, NoiseBound.snr(gamma_fn),
                                  eta=1.0, rho=rho)
    assert fixed.ok


def test_snr_design_rank_precondition(plant):
    from ddltv.stability_design import RankConditionError

    small = run_ensemble(plant, L=2, window=(0, 4),
                         input_gen=uniform_input_gen(8, 1), x0_gen=uniform_x0_gen(9, 2))
    with pytest.raises(RankConditionError):
        design_robust_snr(small, 1.0, 10.0)


def test_iss_bound_reduces_to_trajectory_bound():
    sched = GainSchedule(gains={k: np.ones((1, 2)) for k in range(5)}, eta=1.0, rho=4.0)
    for k in range(5):
        assert iss_bound(sched, b_max=2.0, v_sup=0.0, d_sup=0.0, k=k, x0_norm=1.5) \
            == pytest.approx(trajectory_bound(1.0, 4.0, 1.5, k))


def test_iss_bound_single_step_term():
    sched = GainSchedule(gains={0: np.zeros((1, 2))}, eta=1.0, rho=4.0)
    val = iss_bound(sched, b_max=1.0, v_sup=0.0, d_sup=0.7, k=1, x0_norm=0.0)
    assert val == pytest.approx(np.sqrt(4.0) * 0.7)


def test_iss_bound_monte_carlo(plant, noisy_ens):
    res_or = residual_oracle(plant, noisy_ens)
    bound = NoiseBound.ball(1.05 * res_or.max_norm())
    result = design_robust_bounded(noisy_ens, bound, eta=1.0, rho=8.0)
    assert result.ok
    sched = result.schedule
    b_max = max(np.linalg.norm(plant.b(k), 2) for k in range(4))
    rng = np.random.default_rng(17)
    for trial in range(100):
        noise = NoiseModel(n=2, seed=1000 + trial,
                           process=("uniform", -0.005, 0.005),
                           measurement=("uniform", -0.002, 0.002))
        x0 = rng.uniform(-1, 1, 2)
        traj = simulate(plant, x0, sched.policy(), T=4, noise=noise)
        v_sup = float(np.linalg.norm(traj.v, axis=1).max())
        d_sup = float(np.linalg.norm(traj.d, axis=1).max())
        for k in range(5):
            limit = iss_bound(sched, b_max, v_sup, d_sup, k,
                              x0_norm=float(np.linalg.norm(x0)))
            assert np.linalg.norm(traj.x[k]) <= limit * (1 + 1e-9)


def test_hinf_noise_free_matches_model_oracle(plant, clean_ens):
    def model_factory(g):
        return model_robust_performance(
            plant, HINF_MAPS, PerformanceIndex.hinf(g, n_w=3, q=2), period=4)

    model = hinf_gamma_search(model_factory, lo=0.1, hi=100.0, tol=0.005)

    bound = NoiseBound.ball(1e-7)

    def data_factory(g):
        return design_robust_performance_periodic(
            clean_ens, HINF_MAPS, PerformanceIndex.hinf(g, n_w=3, q=2), bound)

    data = hinf_gamma_search(data_factory, lo=0.1, hi=100.0, tol=0.005)
    assert abs(data.gamma - model.gamma) / model.gamma < 0.02


def test_hinf_design_sound_on_true_plant(plant, noisy_ens):
    res_or = residual_oracle(plant, noisy_ens)
    bound = NoiseBound.ball(1.05 * res_or.max_norm())
    perf = PerformanceIndex.hinf(6.0, n_w=3, q=2)
    result = design_robust_performance_periodic(noisy_ens, HINF_MAPS, perf, bound)
    assert result.ok
    eigs = check_model_performance(plant, HINF_MAPS, perf, result.schedule, range(4))
    assert min(eigs.values()) > 0

    rng = np.random.default_rng(0)
    worst = -np.inf
    for _ in range(50):
        t_hor = 24
        v_seq = rng.uniform(-0.01, 0.01, (t_hor, 2)) * (np.arange(t_hor)[:, None] < 12)
        d_seq = rng.uniform(-0.01, 0.01, (t_hor, 2)) * (np.arange(t_hor)[:, None] < 12)
        worst = max(worst, performance_sum(plant, result.schedule, HINF_MAPS, perf,
                                           v_seq, d_seq, t_hor, include_eps=False,
                                           terminal=False))
    assert worst <= 1e-9


def test_process_noise_only_mode(plant):
    noise = NoiseModel(n=2, seed=12, process=("uniform", -0.01, 0.01))
    ens = run_ensemble(plant, L=5, window=(0, 4),
                       input_gen=uniform_input_gen(6, 1), x0_gen=uniform_x0_gen(7, 2),
                       noise=noise)
    res_or = residual_oracle(plant, ens)
    bound = NoiseBound.ball(1.05 * max(res_or.max_norm(), 1e-9))

    def factory(g):
        perf = PerformanceIndex.hinf(g, n_w=2, q=2)
        return design_robust_performance_periodic(ens, HINF_MAPS, perf, bound,
                                                  process_noise_only=True)

    search = hinf_gamma_search(factory, lo=0.1, hi=100.0, tol=0.01)
    assert search.result.ok


def test_finite_horizon_performance_with_terminal(plant, clean_ens):
    perf = PerformanceIndex.hinf(8.0, n_w=3, q=2)
    res = design_robust_performance(clean_ens, HINF_MAPS, perf, NoiseBound.ball(1e-7),
                                    n_hor=4)
    assert res.ok
    # terminal output condition holds on the returned certificate
    c_term = HINF_MAPS.terminal(4)
    term = np.eye(2) - c_term @ res.schedule.certificate[4] @ c_term.T
    assert np.linalg.eigvalsh(term).min() >= -1e-8


def test_zero_output_maps_reduce_to_boundedness_style(plant, clean_ens):
    zero_maps = OutputMaps.constant(np.zeros((1, 2)), np.zeros((1, 1)), np.zeros((1, 2)))
    perf = PerformanceIndex.constant(-np.eye(3), np.zeros((3, 1)), np.eye(1))
    res = design_robust_performance_periodic(clean_ens, zero_maps, perf,
                                             NoiseBound.ball(1e-7))
    # with zero maps the performance rows vanish; feasibility mirrors the
    # robust-boundedness-style condition on the same data
    robust = design_robust_bounded(clean_ens, NoiseBound.ball(1e-6), eta=1.0, rho=8.0)
    assert res.status.ok == robust.status.ok


def test_lft_reconstruction(plant, noisy_ens):
    res_or = residual_oracle(plant, noisy_ens)
    gain = np.array([[0.2, -0.4]])
    rng = np.random.default_rng(3)
    for k in noisy_ens.steps:
        g = recover_g(noisy_ens, gain, k, use_noisy=True)
        stacked = np.vstack([noisy_ens.Z[k], noisy_ens.U[k]])
        m_k, *_ = np.linalg.lstsq(stacked, np.vstack([np.zeros((2, 1)), np.eye(1)]),
                                  rcond=None)
        x = rng.uniform(-1, 1, 2)
        w_bar = rng.uniform(-1, 1, 3)  # [K v; d]
        ecl_bar = np.hstack([noisy_ens.Z[k + 1] @ m_k, np.eye(2)])
        m_bar = np.hstack([m_k, np.zeros((5, 2))])
        z_tilde = g @ x + m_bar @ w_bar
        w_tilde = res_or.r[k] @ z_tilde
        x_next = noisy_ens.Z[k + 1] @ g @ x + ecl_bar @ w_bar + w_tilde
        a_cl = plant.a(k) + plant.b(k) @ gain
        e_cl = np.hstack([plant.b(k), np.eye(2)])
        direct = a_cl @ x + e_cl @ w_bar
        assert np.abs(x_next - direct).max() < 1e-10
        # performance row: z(k) matches the closed-loop output map
        c_cl = HINF_MAPS.c(k) + HINF_MAPS.du(k) @ gain
        d_cl = np.hstack([HINF_MAPS.du(k), HINF_MAPS.dd(k)])
        z_lft = c_cl @ x + d_cl @ w_bar
        u = gain @ x + w_bar[:1]
        z_direct = HINF_MAPS.c(k) @ x + HINF_MAPS.du(k) @ u + HINF_MAPS.dd(k) @ w_bar[1:]
        assert np.abs(z_lft - z_direct).max() < 1e-12


def test_gamma_search_contract():
    calls = []

    def factory(g):
        calls.append(g)
        ok = g >= 3.7
        status = SdpStatus.FEASIBLE if ok else SdpStatus.INFEASIBLE
        sched = GainSchedule(gains={0: np.zeros((1, 1))}) if ok else None
        return DesignResult(status, sched, None)

    out = hinf_gamma_search(factory, lo=1.0, hi=9.0, tol=0.01)
    assert out.gamma >= 3.7
    assert out.gamma - 3.7 <= 0.011
    # bracket widths halve each bisection step
    widths = []
    lo, hi = 1.0, 9.0
    for g, status in out.trace[2:]:
        widths.append(hi - lo)
        if status == "Feasible":
            hi = g
        else:
            lo = g
    assert all(abs(w1 / w0 - 0.5) < 1e-12 for w0, w1 in zip(widths, widths[1:]))
    # monotone feasibility across the trace
    feas = sorted(g for g, s in out.trace if s == "Feasible")
    infeas = sorted(g for g, s in out.trace if s != "Feasible")
    assert max(infeas) < min(feas)


def test_gamma_search_bracket_errors():
    always_bad = lambda g: DesignResult(SdpStatus.INFEASIBLE, None, None)
    with pytest.raises(BracketError):
        hinf_gamma_search(always_bad, lo=1.0, hi=2.0, tol=0.1)
    always_good = lambda g: DesignResult(
        SdpStatus.FEASIBLE, GainSchedule(gains={0: np.zeros((1, 1))}), None)
    with pytest.raises(BracketError):
        hinf_gamma_search(always_good, lo=1.0, hi=2.0, tol=0.1)


def test_performance_index_validation():
    with pytest.raises(ContractViolation):
        PerformanceIndex.hinf(-1.0, n_w=2, q=1)
    # R_p must be PSD
    bad = PerformanceIndex.constant(-np.eye(2), np.zeros((2, 1)), -np.eye(1))
    with pytest.raises(ContractViolation):
        bad.blocks(0)
    # Q_p_tilde must be negative definite (positive definite index fails)
    pd = PerformanceIndex.constant(np.eye(2), np.zeros((2, 1)), np.eye(1))
    with pytest.raises(ContractViolation):
        pd.inverse_blocks(0)


def test_noise_bound_validation():
    with pytest.raises(ContractViolation):
        NoiseBound.ball(-1.0)
    bad = NoiseBound.explicit(np.eye(2), np.zeros((2, 5)), np.eye(5))  # R_r > 0

    class FakeEns:
        n, L = 2, 5

    with pytest.raises(ContractViolation):
        bad.triples(0, FakeEns())
