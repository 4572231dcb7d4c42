import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddltv.ltv_core import (
    ContractViolation,
    LtvDynamics,
    NoiseModel,
    Trajectory,
    monodromy,
    simulate,
    spectral_radius,
    step,
)
from ddltv.benchmarks import scalar_benchmark_plant


def test_step_scalar_benchmark_at_zero():
    # A(0) = 1.3 (sin term vanishes), B(0) = 0.2
    sys_ = scalar_benchmark_plant()
    out = step(sys_, 0, [1.0], [0.0], [0.0])
    npt.assert_allclose(out, [1.3])


def test_step_zero_propagates():
    sys_ = LtvDynamics.lti([[0.3, 1.0], [0.0, 0.5]], [[1.0], [2.0]])
    npt.assert_allclose(step(sys_, 0, np.zeros(2), [0.0]), np.zeros(2))


def test_step_matches_dense_oracle():
    rng = np.random.default_rng(0)
    a_tab = [rng.uniform(-1, 1, (2, 2)) for _ in range(5)]
    b_tab = [rng.uniform(-1, 1, (2, 1)) for _ in range(5)]
    sys_ = LtvDynamics.from_tables(a_tab, b_tab)
    x, u, d = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 1), rng.uniform(-1, 1, 2)
    k = 3
    expect = np.array([
        sum(a_tab[k][i][j] * x[j] for j in range(2)) + b_tab[k][i][0] * u[0] + d[i]
        for i in range(2)
    ])
    npt.assert_allclose(step(sys_, k, x, u, d), expect, atol=1e-14)


def test_step_dimension_mismatch():
    sys_ = LtvDynamics.lti(0.5, 1.0)
    with pytest.raises(ContractViolation):
        step(sys_, 0, [1.0, 2.0], [0.0])


def test_simulate_open_loop_unstable_growth():
    sys_ = scalar_benchmark_plant()
    traj = simulate(sys_, [0.3], lambda k, z: [0.0], T=150)
    assert abs(traj.x[150, 0]) > abs(traj.x[0, 0])


def test_simulate_zero_everything():
    sys_ = LtvDynamics.lti([[0.4]], [[1.0]])
    traj = simulate(sys_, [0.0], lambda k, z: [0.0], T=10)
    npt.assert_array_equal(traj.x, np.zeros((11, 1)))


def test_simulate_matches_geometric_closed_form():
    sys_ = LtvDynamics.lti([[0.5]], [[1.0]])
    x0 = 0.83
    traj = simulate(sys_, [x0], lambda k, z: [0.0], T=40)
    expect = x0 * 0.5 ** np.arange(41)
    npt.assert_allclose(traj.x[:, 0], expect, atol=1e-12)


def test_simulate_policy_dimension_check():
    sys_ = LtvDynamics.lti(0.5, 1.0)
    with pytest.raises(ContractViolation):
        simulate(sys_, [1.0], lambda k, z: np.zeros(3), T=2)


def test_simulate_determinism_with_noise():
    sys_ = LtvDynamics.lti([[0.9, 0.1], [0.0, 0.8]], [[0.0], [1.0]])
    noise = NoiseModel(n=2, seed=42, process=("uniform", -0.1, 0.1),
                       measurement=("gauss", 0.05))
    runs = [simulate(sys_, [1.0, -1.0], lambda k, z: [0.1], T=20, noise=noise)
            for _ in range(2)]
    npt.assert_array_equal(runs[0].x, runs[1].x)
    npt.assert_array_equal(runs[0].zeta, runs[1].zeta)
    npt.assert_array_equal(runs[0].d, runs[1].d)


def test_noise_streams_differ_across_experiments():
    noise = NoiseModel(n=2, seed=1, process=("uniform", -1, 1))
    assert not np.array_equal(noise.process_sample(0, 0), noise.process_sample(0, 1))
    npt.assert_array_equal(noise.process_sample(3, 2), noise.process_sample(3, 2))


def test_step_simulate_agreement():
    rng = np.random.default_rng(5)
    a_tab = [rng.uniform(-0.8, 0.8, (3, 3)) for _ in range(12)]
    b_tab = [rng.uniform(-1, 1, (3, 2)) for _ in range(12)]
    sys_ = LtvDynamics.from_tables(a_tab, b_tab)
    noise = NoiseModel(n=3, seed=9, process=("uniform", -0.05, 0.05))
    traj = simulate(sys_, rng.uniform(-1, 1, 3), lambda k, z: rng.uniform(-1, 1, 2),
                    T=12, noise=noise)
    for k in range(12):
        npt.assert_array_equal(step(sys_, k, traj.x[k], traj.u[k], traj.d[k]),
                               traj.x[k + 1])


def test_periodic_consistency():
    from tests.conftest import make_periodic_plant

    sys_ = make_periodic_plant(phi=4)
    u_of_k = lambda k: [np.sin(2 * np.pi * (k % 4) / 4)]
    traj = simulate(sys_, [0.0, 0.0], lambda k, z: u_of_k(k), T=8)
    for k in range(8):
        resid = traj.x[k + 1] - (sys_.a(k) @ traj.x[k] + sys_.b(k) @ traj.u[k])
        assert np.abs(resid).max() < 1e-12


def test_monodromy_trivials():
    sys_ = LtvDynamics.from_tables([0.5 * np.eye(2)] * 2, [np.ones((2, 1))] * 2, period=2)
    gains = {0: np.zeros((1, 2)), 1: np.zeros((1, 2))}
    pi, rho = monodromy(sys_, gains, 2)
    npt.assert_allclose(pi, 0.25 * np.eye(2))
    assert rho == pytest.approx(0.25)

    sys2 = LtvDynamics.lti(2.0, 1.0)
    pi2, rho2 = monodromy(sys2, {0: np.array([[-1.5]])}, 1)
    npt.assert_allclose(pi2, [[0.5]])
    assert rho2 == pytest.approx(0.5)


def test_monodromy_missing_gain():
    sys_ = LtvDynamics.lti(2.0, 1.0)
    with pytest.raises(ContractViolation):
        monodromy(sys_, {}, 1)


def test_trajectory_length_validation():
    with pytest.raises(ContractViolation):
        Trajectory(x=np.zeros((3, 1)), u=np.zeros((3, 1)))


def test_plant_json_round_trip(tmp_path):
    from tests.conftest import make_periodic_plant

    sys_ = make_periodic_plant(phi=4)
    path = tmp_path / "plant.json"
    sys_.save(path)
    back = LtvDynamics.load(path)
    for k in range(8):
        npt.assert_array_equal(back.a(k), sys_.a(k))
        npt.assert_array_equal(back.b(k), sys_.b(k))


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_periodic_table_lookup_wraps(k):
    from tests.conftest import make_periodic_plant

    sys_ = make_periodic_plant(phi=4)
    npt.assert_array_equal(sys_.a(k), sys_.a(k % 4))


def test_spectral_radius():
    assert spectral_radius([[0.0, 1.0], [-0.25, 0.0]]) == pytest.approx(0.5)


def test_trajectory_json_round_trip():
    sys_ = LtvDynamics.lti([[0.7, 0.1], [0.0, 0.6]], [[0.0], [1.0]])
    noise = NoiseModel(n=2, seed=3, process=("uniform", -0.1, 0.1),
                       measurement=("gauss", 0.01))
    traj = simulate(sys_, [1.0, -0.5], lambda k, z: [0.2], T=6, noise=noise)
    back = Trajectory.from_json(traj.to_json())
    npt.assert_array_equal(back.x, traj.x)
    npt.assert_array_equal(back.u, traj.u)
    npt.assert_array_equal(back.zeta, traj.zeta)
    npt.assert_array_equal(back.d, traj.d)
