from dataclasses import replace

import numpy as np
import pytest

from ivp_sampling import pmp
from ivp_sampling.core import ControlProblem
from ivp_sampling.errors import ContinuationFailed, DomainError
from ivp_sampling.quadrotor import Quadrotor


def _linear_problem(A, B, T=1.0):
    """x' = Ax + Bu, L = |u|^2, M = |x|^2, without closed-form helpers."""
    n, m = B.shape
    base = ControlProblem(
        n, m, T,
        dynamics=lambda t, x, u: x @ A.T + u @ B.T,
        running_cost=lambda t, x, u: np.sum(u * u, axis=-1),
        terminal_cost=lambda x: np.sum(x * x, axis=-1))
    return pmp.TpbvpProblem(
        base=base,
        f_x=lambda t, x, u: np.broadcast_to(A, np.shape(x)[:-1] + (n, n)),
        f_u=lambda t, x, u: np.broadcast_to(B, np.shape(x)[:-1] + (n, m)),
        L_x=lambda t, x, u: np.zeros(np.shape(x)),
        L_u=lambda t, x, u: 2.0 * u,
        grad_M=lambda x: 2.0 * np.asarray(x),
        target_state=np.zeros(n))


def test_hamiltonian_values():
    T = 3.0
    prob = pmp.lqr_tpbvp(T)
    u, lam = np.array([0.7]), np.array([-1.3])
    assert pmp.hamiltonian(prob, 0.0, np.array([2.0]), np.zeros(1), u) == pytest.approx(0.49 / T)
    assert pmp.hamiltonian(prob, 0.0, np.array([2.0]), lam, u) == pytest.approx(0.49 / T - 1.3 * 0.7)
    quad = Quadrotor().tpbvp()
    assert pmp.hamiltonian(quad, 0.0, np.zeros(12), np.zeros(12), Quadrotor().params.hover) == 0.0


def test_lqr_minimizer():
    prob = pmp.lqr_tpbvp(2.0)
    assert pmp.minimize_hamiltonian(prob, 0.0, np.array([5.0]), np.array([1.0]))[0] == -1.0
    assert pmp.minimize_hamiltonian(prob, 0.0, np.array([5.0]), np.zeros(1))[0] == 0.0


def test_quadrotor_closed_form_matches_newton():
    quad = Quadrotor().tpbvp()
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(100, 12))
    Lam = rng.normal(size=(100, 12)) * 5
    closed = pmp.minimize_hamiltonian(quad, 0.0, X, Lam)
    newton = pmp.newton_minimize_hamiltonian(quad, 0.0, X, Lam)
    np.testing.assert_allclose(closed, newton, atol=1e-9)


def test_linear_adjoint():
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    prob = _linear_problem(A, B)
    lam = rng.normal(size=3)
    rhs = pmp.costate_rhs(prob, 0.0, rng.normal(size=3), lam, rng.normal(size=2))
    np.testing.assert_allclose(rhs, -A.T @ lam, atol=1e-14)
    # LQR: H does not depend on x
    lq = pmp.lqr_tpbvp(2.0)
    assert pmp.costate_rhs(lq, 0.0, np.array([1.0]), np.array([3.0]), np.array([0.1]))[0] == 0.0


@pytest.mark.parametrize("x0", [-2.0, -1.0, 1.0, 2.0])
def test_lqr_solve_matches_analytic(x0):
    T = 1.0
    sol = pmp.solve_tpbvp(pmp.lqr_tpbvp(T), np.array([x0]))
    assert sol.converged
    np.testing.assert_allclose(sol.trajectory.controls[:, 0], -T * x0 / (T * T + 1), atol=1e-6)
    assert sol.cost == pytest.approx(x0 ** 2 / (T * T + 1), abs=1e-6)
    np.testing.assert_allclose(sol.costates[:, 0], x0, atol=1e-6)     # lam = 2 x(T) = x0
    assert sol.trajectory.states[-1, 0] == pytest.approx(x0 / 2, abs=1e-6)


def test_linear_problem_matches_riccati_free_solution():
    # x' = u, 2-d: same closed form per coordinate
    prob = _linear_problem(np.zeros((2, 2)), np.eye(2), T=2.0)
    x0 = np.array([1.0, -3.0])
    sol = pmp.solve_tpbvp(prob, x0, opts=pmp.SolverOptions(dt=0.05))
    # L = |u|^2, M = |x|^2 over horizon T: u = -x0 / (1 + T)
    assert sol.converged
    np.testing.assert_allclose(sol.trajectory.controls, np.tile(-x0 / 3.0, (41, 1)), atol=1e-6)


def test_quadrotor_equilibrium_start():
    q = Quadrotor()
    sol = pmp.solve_tpbvp(q.tpbvp(), np.zeros(12))
    assert sol.converged and sol.cost == 0.0
    np.testing.assert_allclose(sol.trajectory.controls, np.tile(q.params.hover, (321, 1)))
    assert np.all(sol.trajectory.states == 0.0)


def test_warm_start_from_exact_solution():
    q = Quadrotor()
    x0 = np.zeros(12)
    x0[:3] = [1.0, -0.5, 2.0]
    prob = q.tpbvp()
    sol = pmp.solve_with_fallback(prob, x0)
    assert sol.converged
    assert sol.residuals["terminal_costate_gap"] < sol.residuals["tol_bc"]
    assert sol.residuals["max_stationarity"] < 1e-8
    again = pmp.solve_tpbvp(prob, x0, guess=sol)
    assert again.converged and again.newton_iters <= 2
    assert again.cost == pytest.approx(sol.cost, rel=1e-9)


def test_schedule_geometry():
    x0 = np.array([2.0, -4.0, 6.0])
    sched = pmp.MarchSchedule.uniform(np.zeros(3), x0, 4)
    for k, wp in enumerate(sched.waypoints, start=1):
        np.testing.assert_allclose(wp, k / 4 * x0)
    assert np.all(sched.waypoints[-1] == x0)
    with pytest.raises(DomainError):
        pmp.MarchSchedule.uniform(np.zeros(3), x0, 0)


def test_single_step_march_equals_plain_solve():
    prob = pmp.lqr_tpbvp(2.0)
    opts = pmp.SolverOptions(march_steps=1)
    a = pmp.space_march(prob, np.array([1.5]), opts=opts)
    b = pmp.solve_tpbvp(prob, np.array([1.5]), opts=opts)
    np.testing.assert_array_equal(a.trajectory.controls, b.trajectory.controls)


def test_march_failure_reports_step():
    prob = pmp.lqr_tpbvp(2.0)
    opts = pmp.SolverOptions(max_iter=0, march_steps=3)
    with pytest.raises(ContinuationFailed) as err:
        pmp.space_march(prob, np.array([1.0]), opts=opts)
    assert err.value.step == 1 and err.value.last_good is None
    sol = pmp.solve_with_fallback(prob, np.array([1.0]), opts=opts)
    assert not sol.converged and np.isnan(sol.cost)


def test_unconverged_solution_has_residuals():
    prob = pmp.lqr_tpbvp(2.0)
    sol = pmp.solve_tpbvp(prob, np.array([1.0]), opts=pmp.SolverOptions(max_iter=0))
    assert not sol.converged
    assert set(sol.residuals) >= {"terminal_costate_gap", "max_stationarity"}


def test_unknown_cold_start_rejected():
    opts = replace(pmp.SolverOptions(), cold_start="magic")
    with pytest.raises(DomainError):
        pmp.solve_tpbvp(pmp.lqr_tpbvp(1.0), np.array([1.0]), opts=opts)
