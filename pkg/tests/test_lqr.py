import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ivp_sampling import lqr
from ivp_sampling.errors import DomainError, InsufficientData, SingularFit


def test_spec_validation():
    with pytest.raises(DomainError):
        lqr.LqrSpec(T=0, epsilon=0.1, N=1)
    with pytest.raises(DomainError):
        lqr.LqrSpec(T=2.5, epsilon=0.1, N=1)
    with pytest.raises(DomainError):
        lqr.LqrSpec(T=2, epsilon=-1.0, N=1)
    with pytest.raises(DomainError):
        lqr.LqrSpec(T=2, epsilon=0.1, N=1, dt=0.03)
    s = lqr.LqrSpec(T=3, epsilon=0.1, N=4)
    assert len(s.times) == 301 and s.rollout_step == 0.02


def test_optimal_gain_values():
    # u = -T x / (T (T - t) + 1): at t = T the gain is -T
    assert lqr.optimal_gain(0.0, 1) == pytest.approx(-0.5)
    assert lqr.optimal_gain(10.0, 10) == pytest.approx(-10.0)


@pytest.mark.parametrize("T", [1, 3, 10])
def test_optimal_controller_cost(T):
    x0 = np.array([-2.0, 0.5, 1.0])
    J = lqr.closed_loop_cost(lqr.OptimalController(T), x0, T, 0.02)
    np.testing.assert_allclose(J, x0 ** 2 / (T * T + 1.0), rtol=1e-6)


def test_noiseless_path_is_optimal_and_consistent():
    spec = lqr.LqrSpec(T=4, epsilon=0.0, N=1)
    p = lqr.noisy_open_loop(1.0, np.array([2.0]), spec, np.random.default_rng(0))
    # open-loop optimum from (t0, x0) is constant -T x0/(T(T-t0)+1)
    assert p.u_hat()[0] == pytest.approx(-4 * 2.0 / 13.0)
    assert p.x_hat(1.0)[0] == pytest.approx(2.0)
    # x_hat is linear with slope u_hat
    assert (p.x_hat(3.0) - p.x_hat(2.0))[0] == pytest.approx(p.u_hat()[0])


def test_noisy_path_slope_matches_control():
    spec = lqr.LqrSpec(T=4, epsilon=0.3, N=1)
    p = lqr.noisy_open_loop(0.0, np.array([1.0, -1.0]), spec, np.random.default_rng(1))
    np.testing.assert_allclose(p.x_hat(1.5) - p.x_hat(0.5), p.u_hat(), rtol=1e-12)


def test_oracle_rejects_t0_outside_horizon():
    spec = lqr.LqrSpec(T=2, epsilon=0.1, N=1)
    with pytest.raises(DomainError):
        lqr.noisy_open_loop(2.0, np.array([1.0]), spec, np.random.default_rng(0))


def test_oracle_counts_calls():
    spec = lqr.LqrSpec(T=2, epsilon=0.1, N=3)
    oracle = lqr.NoisyOracle(spec, np.random.default_rng(0))
    oracle(0.0, np.zeros(5))
    oracle(1.0, np.zeros(3))
    assert oracle.calls == 8


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_vanilla_model1_matches_closed_form(seed):
    spec = lqr.LqrSpec(T=4, epsilon=0.1, N=5)
    run = lqr.run_vanilla(spec, 1, np.random.default_rng(seed))
    a, b = lqr.vanilla_closed_form(spec, float(np.mean(run.noise[0])))
    na, nb = run.controller.at_nodes()
    np.testing.assert_allclose(na, a, atol=1e-10)
    np.testing.assert_allclose(nb, b, atol=1e-10)
    assert run.oracle_calls == spec.N * spec.T


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ivp_model1_matches_closed_form(seed):
    spec = lqr.LqrSpec(T=4, epsilon=0.1, N=5)
    run = lqr.run_ivp_enhanced(spec, 1, np.random.default_rng(seed))
    zbars = [float(np.mean(z)) for z in run.noise]
    a, b = lqr.ivp_closed_form(spec, zbars)
    na, nb = run.controller.at_nodes()
    np.testing.assert_allclose(na, a, atol=1e-10)
    np.testing.assert_allclose(nb, b, atol=1e-10)
    for i in range(1, spec.T):
        np.testing.assert_allclose(run.reached[i],
                                   lqr.reached_closed_form(spec, run.initial_states, zbars, i),
                                   atol=1e-10)
    assert run.oracle_calls == spec.N * spec.T


def test_model2_recovers_optimal_law_without_noise():
    spec = lqr.LqrSpec(T=3, epsilon=0.0, N=4)
    run = lqr.run_vanilla(spec, 2, np.random.default_rng(5))
    a, b = run.controller.at_nodes()
    np.testing.assert_allclose(a, lqr.optimal_gain(spec.times, 3), atol=1e-9)
    np.testing.assert_allclose(b, 0.0, atol=1e-9)


def test_model2_singular_slice():
    times = np.array([0.0, 1.0])
    data = lqr.GridData(times, np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(SingularFit):
        lqr.fit_model2(data, 1)
    with pytest.warns(RuntimeWarning):
        lqr.fit_model2(data, 1, ridge=1e-12)


def test_missing_slice_raises_insufficient_data():
    times = np.array([0.0, 1.0])
    x = np.array([[1.0, 2.0], [np.nan, np.nan]])
    with pytest.raises(InsufficientData) as err:
        lqr.fit_model1(lqr.GridData(times, x, x.copy()), 1)
    assert err.value.time == 1.0


def test_theorem_predictions_reference_values():
    rep = lqr.theorem1_predictions(lqr.LqrSpec(T=10, epsilon=0.1, N=50))
    assert rep.vanilla_perf_gap == pytest.approx(101 * 0.01 / 500)
    assert rep.ivp_perf_gap_bound == pytest.approx(6e-4)
    assert rep.ivp_perf_gap <= rep.ivp_perf_gap_bound
    assert rep.vanilla_moment_gap(10.0) == pytest.approx((1 - 1 / 500) * 0.01 * 100)
    assert np.all(rep.ivp_moment_gap(np.linspace(0, 10, 101)) <= rep.ivp_moment_gap_bound)


@settings(max_examples=30, deadline=None)
@given(T=st.integers(1, 20), N=st.integers(1, 200))
def test_ivp_exact_gap_within_bound(T, N):
    rep = lqr.theorem1_predictions(lqr.LqrSpec(T=T, epsilon=0.1, N=N))
    assert 0 <= rep.ivp_perf_gap <= rep.ivp_perf_gap_bound + 1e-15


def test_affine_rollout_matches_generic_integrator():
    from ivp_sampling.core import integrate_ivp
    spec = lqr.LqrSpec(T=3, epsilon=0.2, N=6)
    run = lqr.run_ivp_enhanced(spec, 2, np.random.default_rng(3))
    x0 = np.array([0.7, -1.3])
    times, states = lqr.affine_rollout(run.controller, x0, 0.0, 3.0, 0.02)
    vec = lqr.VectorController(run.controller)
    for j, x in enumerate(x0):
        traj = integrate_ivp(lqr.lqr_problem(3), vec, np.array([x]), 0.0, 3.0, 0.02)
        np.testing.assert_allclose(traj.states[:, 0], states[:, j], atol=1e-12)


def test_monte_carlo_perf_gap_is_reproducible():
    spec = lqr.LqrSpec(T=2, epsilon=0.1, N=5)
    f = lqr.model_factory("vanilla", 1)
    a = lqr.monte_carlo_perf_gap(f, spec, 20, 50, 11)
    b = lqr.monte_carlo_perf_gap(f, spec, 20, 50, 11)
    assert a["mean"] == b["mean"] and a["std_error"] > 0
