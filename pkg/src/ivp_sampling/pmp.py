"""Indirect open-loop solver: PMP boundary value problem by multiple shooting.

The state/costate system ``x' = f(x, u*)``, ``lam' = -(L_x + f_x^T lam)`` with
``u* = argmin_u H`` is integrated by RK4 on a fixed grid, split into segments.
Damped Newton (Armijo backtracking on the residual norm) drives the segment
defects and the terminal condition ``lam(T) = grad M(x(T))`` to zero. The
shooting Jacobian is built by forward differences, all perturbed columns of
all segments integrated as one batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import ControlProblem, Trajectory, evaluate_cost, time_grid
from .errors import ContinuationFailed, DomainError, IntegrationDiverged, StationarityError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TpbvpProblem:
    base: ControlProblem
    f_x: Callable
    f_u: Callable
    L_x: Callable
    L_u: Callable
    grad_M: Callable
    hess_M: Optional[Callable] = None
    hamiltonian_minimizer: Optional[Callable] = None   # (t, x, lam) -> u
    costate: Optional[Callable] = None                 # (t, x, lam, u) -> lam'
    target_state: Optional[np.ndarray] = None
    reference_control: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.base.state_dim

    @property
    def m(self) -> int:
        return self.base.control_dim


@dataclass(frozen=True)
class SolverOptions:
    dt: float = 0.05
    segments: int = 8
    max_iter: int = 60
    tol_bc: float = 1e-6            # relative to (1 + |grad M|)
    tol_stationarity: float = 1e-8
    tol_defect: float = 1e-8
    fd_step: float = 1e-6
    armijo: float = 1e-4
    min_step: float = 1.0 / 1024
    march_steps: int = 10
    warm_start_from_previous: bool = True
    cold_start: str = "interpolate"   # or "rollout"


@dataclass
class TpbvpSolution:
    trajectory: Trajectory
    costates: np.ndarray
    converged: bool
    residuals: dict
    newton_iters: int = 0
    cost: float = float("nan")
    info: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.trajectory.times


@dataclass(frozen=True)
class MarchSchedule:
    waypoints: np.ndarray           # (K, n), increasing distance from the target

    @classmethod
    def uniform(cls, target, x0, K: int) -> "MarchSchedule":
        if K < 1:
            raise DomainError("K must be >= 1")
        target, x0 = np.asarray(target, float), np.asarray(x0, float)
        frac = np.arange(1, K + 1)[:, None] / K
        pts = target + frac * (x0 - target)
        pts[-1] = x0
        return cls(pts)

    @property
    def K(self) -> int:
        return len(self.waypoints)


# --- pointwise PMP quantities ---------------------------------------------

def hamiltonian(prob: TpbvpProblem, t, x, lam, u):
    """``H = L + lam . f``."""
    f = prob.base.dynamics(t, x, u)
    return prob.base.running_cost(t, x, u) + np.sum(np.asarray(lam) * f, axis=-1)


def hamiltonian_grad_u(prob: TpbvpProblem, t, x, lam, u):
    fu = prob.f_u(t, x, u)
    return prob.L_u(t, x, u) + np.einsum("...ij,...i->...j", fu, np.asarray(lam, dtype=float))


def minimize_hamiltonian(prob: TpbvpProblem, t, x, lam, tol: float = 1e-10, max_iter: int = 50):
    """Pointwise minimizer of H in u.

    Uses the problem's closed form when present; otherwise damped Newton on
    dH/du with a finite-difference Hessian, started from the reference control.
    """
    if prob.hamiltonian_minimizer is not None:
        return prob.hamiltonian_minimizer(t, x, lam)
    return newton_minimize_hamiltonian(prob, t, x, lam, tol, max_iter)


def newton_minimize_hamiltonian(prob: TpbvpProblem, t, x, lam, tol=1e-10, max_iter=50):
    x, lam = np.asarray(x, float), np.asarray(lam, float)
    m = prob.m
    u = np.zeros(x.shape[:-1] + (m,))
    if prob.reference_control is not None:
        u = u + prob.reference_control
    for _ in range(max_iter):
        g = hamiltonian_grad_u(prob, t, x, lam, u)
        res = np.max(np.abs(g)) if g.size else 0.0
        if res < tol:
            return u
        Hs = np.empty(u.shape + (m,))
        for j in range(m):
            step = 1e-6 * (1.0 + np.abs(u[..., j]))
            e_j = np.zeros_like(u)
            e_j[..., j] = step
            Hs[..., :, j] = (hamiltonian_grad_u(prob, t, x, lam, u + e_j) - g) / step[..., None]
        Hs = 0.5 * (Hs + np.swapaxes(Hs, -1, -2))
        du = -np.linalg.solve(Hs, g[..., None])[..., 0]
        u = u + du
    g = hamiltonian_grad_u(prob, t, x, lam, u)
    res = float(np.max(np.abs(g)))
    if res >= tol:
        raise StationarityError(f"Hamiltonian minimization stalled at |dH/du|={res:.3g}", res)
    return u


def costate_rhs(prob: TpbvpProblem, t, x, lam, u):
    """``lam' = -(L_x + f_x^T lam)``."""
    if prob.costate is not None:
        return prob.costate(t, x, lam, u)
    fx = prob.f_x(t, x, u)
    return -(prob.L_x(t, x, u) + np.einsum("...ij,...i->...j", fx, np.asarray(lam, dtype=float)))


def _augmented_rhs(prob: TpbvpProblem, t, z):
    n = prob.n
    x, lam = z[..., :n], z[..., n:]
    u = minimize_hamiltonian(prob, t, x, lam)
    out = np.empty_like(z)
    out[..., :n] = prob.base.dynamics(t, x, u)
    out[..., n:] = costate_rhs(prob, t, x, lam, u)
    return out


def _rk4_batch(prob, t, h, z):
    """One RK4 step; ``t`` and ``h`` broadcast against z's leading axes."""
    f = lambda tt, zz: _augmented_rhs(prob, tt, zz)
    hh = h[..., None]
    k1 = f(t, z)
    k2 = f(t + 0.5 * h, z + 0.5 * hh * k1)
    k3 = f(t + 0.5 * h, z + 0.5 * hh * k2)
    k4 = f(t + h, z + hh * k3)
    return z + hh / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


# --- multiple shooting -----------------------------------------------------

class _Shooting:
    """Segment layout plus the batched flow map of every segment."""

    def __init__(self, prob: TpbvpProblem, t0: float, opts: SolverOptions):
        self.prob, self.opts = prob, opts
        self.times = time_grid(t0, prob.base.horizon, opts.dt)
        nsteps = len(self.times) - 1
        S = max(1, min(opts.segments, nsteps))
        self.bounds = np.rint(np.linspace(0, nsteps, S + 1)).astype(int)
        self.S = S
        lens = np.diff(self.bounds)
        L = int(lens.max())
        self.step_t = np.zeros((S, L))
        self.step_h = np.zeros((S, L))
        for s in range(S):
            a, b = self.bounds[s], self.bounds[s + 1]
            self.step_t[s, :b - a] = self.times[a:b]
            self.step_h[s, :b - a] = np.diff(self.times[a:b + 1])
            self.step_t[s, b - a:] = self.times[b]
        self.L = L

    def flow(self, Z, record=False):
        """Integrate segment starts Z[S, C, 2n] to segment ends."""
        out = [Z] if record else None
        with np.errstate(all="ignore"):
            for k in range(self.L):
                t = self.step_t[:, k][:, None]
                h = np.broadcast_to(self.step_h[:, k][:, None], Z.shape[:-1])
                Z = _rk4_batch(self.prob, np.broadcast_to(t, Z.shape[:-1]), h, Z)
                if record:
                    out.append(Z)
        return (Z, out) if record else Z

    # unknowns: lam_0, then (x_s, lam_s) for s = 1..S-1
    def pack(self, Zs):
        n = self.prob.n
        return np.concatenate([Zs[0, n:], Zs[1:].ravel()])

    def unpack(self, y, x0):
        n = self.prob.n
        Zs = np.empty((self.S, 2 * n))
        Zs[0, :n] = x0
        Zs[0, n:] = y[:n]
        Zs[1:] = y[n:].reshape(self.S - 1, 2 * n)
        return Zs

    def residual_from_ends(self, Zs, ends):
        n = self.prob.n
        defects = ends[:-1] - Zs[1:]
        xe, le = ends[-1, :n], ends[-1, n:]
        term = le - self.prob.grad_M(xe)
        return np.concatenate([defects.ravel(), term]), defects, term, xe

    def residual(self, y, x0):
        Zs = self.unpack(y, x0)
        ends = self.flow(Zs[:, None, :])[:, 0, :]
        return self.residual_from_ends(Zs, ends) + (Zs,)

    def jacobian(self, Zs, x0):
        """Residual and forward-difference Jacobian of the shooting map."""
        n, S = self.prob.n, self.S
        d = 2 * n
        steps = self.opts.fd_step * (1.0 + np.abs(Zs))          # (S, d)
        batch = np.repeat(Zs[:, None, :], d + 1, axis=1)
        idx = np.arange(d)
        batch[:, 1 + idx, idx] += steps
        ends = self.flow(batch)
        base = ends[:, 0, :]
        G = (ends[:, 1:, :] - base[:, None, :]) / steps[:, :, None]   # G[s, j, :] = dPhi/dz_j
        G = np.swapaxes(G, 1, 2)                                      # (S, d_out, d_in)
        r, defects, term, xe = self.residual_from_ends(Zs, base)
        size = n + d * (S - 1)
        Jm = np.zeros((size, size))
        col = lambda s: (0, n) if s == 0 else (n + d * (s - 1), n + d * s)
        for s in range(S - 1):
            rows = slice(d * s, d * (s + 1))
            c0, c1 = col(s)
            Jm[rows, c0:c1] = G[s][:, n:] if s == 0 else G[s]
            n0, n1 = col(s + 1)
            Jm[rows, n0:n1] = -np.eye(d)
        HM = self._hess_M(xe)
        term_map = np.hstack([-HM, np.eye(n)]) @ G[S - 1]
        c0, c1 = col(S - 1)
        Jm[d * (S - 1):, c0:c1] = term_map[:, n:] if S == 1 else term_map
        return r, Jm, defects, term, xe

    def _hess_M(self, x):
        if self.prob.hess_M is not None:
            return np.asarray(self.prob.hess_M(x), dtype=float)
        n = self.prob.n
        H = np.empty((n, n))
        g0 = self.prob.grad_M(x)
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1e-6 * (1.0 + abs(x[j]))
            H[:, j] = (self.prob.grad_M(x + e) - g0) / e[j]
        return 0.5 * (H + H.T)

    def initial_nodes(self, x0, guess: Optional[TpbvpSolution]):
        n = self.prob.n
        starts = self.times[self.bounds[:-1]]
        Zs = np.empty((self.S, 2 * n))
        if guess is None:
            if self.opts.cold_start == "rollout":
                ref = default_guess(self.prob, x0, self.times)
                Zs[:, :n] = ref[self.bounds[:-1]]
                Zs[:, n:] = self.prob.grad_M(ref[-1])
            elif self.opts.cold_start == "interpolate":
                # straight line from x0 to the target; costate frozen at grad M there
                target = (self.prob.target_state if self.prob.target_state is not None
                          else np.zeros(n))
                frac = (starts - self.times[0]) / (self.times[-1] - self.times[0])
                Zs[:, :n] = (1.0 - frac)[:, None] * x0 + frac[:, None] * target
                Zs[:, n:] = self.prob.grad_M(np.asarray(target, dtype=float))
            else:
                raise DomainError(f"unknown cold_start {self.opts.cold_start!r}")
        else:
            gt = guess.trajectory.times
            for j in range(n):
                Zs[:, j] = np.interp(starts, gt, guess.trajectory.states[:, j])
                Zs[:, n + j] = np.interp(starts, gt, guess.costates[:, j])
        Zs[0, :n] = x0
        return Zs


def default_guess(prob: TpbvpProblem, x0, times):
    """States of the rollout under the running-cost-optimal control (lam = 0)."""
    x = np.asarray(x0, dtype=float).copy()
    out = np.empty((len(times), prob.n))
    out[0] = x
    lam0 = np.zeros(prob.n)
    with np.errstate(all="ignore"):
        for k in range(len(times) - 1):
            h = times[k + 1] - times[k]
            t = times[k]

            def f(tt, xx):
                return prob.base.dynamics(tt, xx, minimize_hamiltonian(prob, tt, xx, lam0))
            k1 = f(t, x)
            k2 = f(t + h / 2, x + h / 2 * k1)
            k3 = f(t + h / 2, x + h / 2 * k2)
            k4 = f(t + h, x + h * k3)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(x)):
                out[k + 1:] = out[k]
                break
            out[k + 1] = x
    return out


def _assemble(sh: _Shooting, Zs, x0):
    prob, n = sh.prob, sh.prob.n
    ends, rec = sh.flow(Zs[:, None, :], record=True)
    rec = np.stack(rec)[:, :, 0, :]                      # (L+1, S, 2n)
    Z = np.empty((len(sh.times), 2 * n))
    for s in range(sh.S):
        a, b = sh.bounds[s], sh.bounds[s + 1]
        Z[a:b + 1] = rec[:b - a + 1, s]
    x, lam = Z[:, :n], Z[:, n:]
    u = minimize_hamiltonian(prob, sh.times[:, None], x, lam)
    return Trajectory(sh.times.copy(), x, u), lam, ends[:, 0, :]


def solve_tpbvp(prob: TpbvpProblem, x0, t0: float = 0.0, guess: Optional[TpbvpSolution] = None,
                opts: SolverOptions = SolverOptions()) -> TpbvpSolution:
    """Solve the PMP boundary value problem from ``(t0, x0)`` to the horizon.

    Never raises on non-convergence: the returned solution carries
    ``converged=False`` and its residuals.

    Raises:
        IntegrationDiverged: the initial guess already produces a non-finite rollout.
    """
    x0 = np.asarray(x0, dtype=float)
    sh = _Shooting(prob, t0, opts)
    Zs = sh.initial_nodes(x0, guess)
    y = sh.pack(Zs)
    r, defects, term, xe, Zs = sh.residual(y, x0)
    if not np.all(np.isfinite(r)):
        raise IntegrationDiverged("initial shooting guess diverged", last_time=t0)
    it = 0
    converged = False
    status = "max_iter"
    for it in range(opts.max_iter + 1):
        tol_bc = opts.tol_bc * (1.0 + np.linalg.norm(prob.grad_M(xe)))
        if (np.linalg.norm(term) < tol_bc
                and (defects.size == 0 or np.max(np.abs(defects)) < opts.tol_defect)):
            converged = True
            status = "converged"
            break
        if it == opts.max_iter:
            break
        r, Jm, defects, term, xe = sh.jacobian(Zs, x0)
        try:
            dy = np.linalg.solve(Jm, -r)
        except np.linalg.LinAlgError:
            dy = np.linalg.lstsq(Jm, -r, rcond=None)[0]
        if not np.all(np.isfinite(dy)):
            status = "singular"
            break
        phi = 0.5 * r @ r
        alpha = 1.0
        accepted = False
        while alpha >= opts.min_step:
            r_new, d_new, t_new, xe_new, Z_new = sh.residual(y + alpha * dy, x0)
            phi_new = 0.5 * r_new @ r_new
            if np.isfinite(phi_new) and phi_new <= (1.0 - 2.0 * opts.armijo * alpha) * phi:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            status = "line_search"
            break
        y = y + alpha * dy
        r, defects, term, xe, Zs = r_new, d_new, t_new, xe_new, Z_new
    traj, lam, ends = _assemble(sh, Zs, x0)
    stat = np.linalg.norm(hamiltonian_grad_u(prob, traj.times[:, None], traj.states, lam,
                                             traj.controls), axis=-1)
    tol_bc = opts.tol_bc * (1.0 + np.linalg.norm(prob.grad_M(traj.states[-1])))
    residuals = {
        "terminal_costate_gap": float(np.linalg.norm(lam[-1] - prob.grad_M(traj.states[-1]))),
        "max_stationarity": float(np.max(stat)),
        "mesh_residual": float(np.max(np.abs(defects))) if defects.size else 0.0,
        "tol_bc": float(tol_bc),
    }
    ok = (converged and np.all(np.isfinite(traj.states))
          and residuals["max_stationarity"] < opts.tol_stationarity)
    finite = np.all(np.isfinite(traj.states)) and np.all(np.isfinite(traj.controls))
    cost = evaluate_cost(prob.base, traj) if finite else float("nan")
    return TpbvpSolution(traj, lam, bool(ok), residuals, it, cost, {"status": status, "t0": t0})


def space_march(prob: TpbvpProblem, x0, schedule: Optional[MarchSchedule] = None, t0: float = 0.0,
                opts: SolverOptions = SolverOptions(),
                guess: Optional[TpbvpSolution] = None) -> TpbvpSolution:
    """Continuation over initial states from the target toward ``x0``.

    Each waypoint is solved warm-started from the previous solution; the
    first one uses ``guess`` (cold default when None).

    Raises:
        ContinuationFailed: waypoint ``step`` (1-based) did not converge;
            ``last_good`` holds the last converged solution (or None).
    """
    x0 = np.asarray(x0, dtype=float)
    if schedule is None:
        target = prob.target_state if prob.target_state is not None else np.zeros(prob.n)
        schedule = MarchSchedule.uniform(target, x0, opts.march_steps)
    if not np.allclose(schedule.waypoints[-1], x0):
        raise DomainError("the last waypoint must equal x0")
    prev, history = guess, []
    sol = None
    for k, wp in enumerate(schedule.waypoints, start=1):
        try:
            sol = solve_tpbvp(prob, wp, t0, prev, opts)
        except IntegrationDiverged as exc:
            raise ContinuationFailed(f"continuation step {k} diverged: {exc}", k, prev) from exc
        history.append((k, sol.converged, sol.newton_iters))
        if not sol.converged:
            raise ContinuationFailed(
                f"continuation step {k}/{schedule.K} did not converge "
                f"({sol.info.get('status')})", k, prev if prev is not guess else None)
        prev = sol
    sol.info["march"] = history
    return sol


def solve_with_fallback(prob: TpbvpProblem, x0, t0: float = 0.0,
                        guess: Optional[TpbvpSolution] = None,
                        opts: SolverOptions = SolverOptions()) -> TpbvpSolution:
    """Warm start from ``guess`` when given, then space marching from the target.

    Returns the best attempt; unconverged results are returned, not raised.
    """
    x0 = np.asarray(x0, dtype=float)
    attempts = 0
    if guess is not None:
        attempts += 1
        try:
            sol = solve_tpbvp(prob, x0, t0, guess, opts)
            if sol.converged:
                sol.info["route"] = "warm"
                return sol
        except IntegrationDiverged:
            pass
    try:
        sol = space_march(prob, x0, None, t0, opts)
        sol.info["route"] = "march"
        return sol
    except ContinuationFailed as exc:
        log.info("open-loop solve from t0=%g failed: %s", t0, exc)
        failed = exc
    sh_sol = _failed_solution(prob, x0, t0, opts)
    sh_sol.info.update({"route": "failed", "step": failed.step, "status": str(failed)})
    return sh_sol


def _failed_solution(prob, x0, t0, opts):
    times = time_grid(t0, prob.base.horizon, opts.dt)
    states = np.full((len(times), prob.n), np.nan)
    states[0] = x0
    traj = Trajectory(times, states, np.full((len(times), prob.m), np.nan))
    res = {"terminal_costate_gap": float("nan"), "max_stationarity": float("nan"),
           "mesh_residual": float("nan"), "tol_bc": float("nan")}
    return TpbvpSolution(traj, np.full((len(times), prob.n), np.nan), False, res, 0)


def lqr_tpbvp(T: float) -> TpbvpProblem:
    """The scalar LQR as a PMP problem (closed-form minimizer ``u = -lam T / 2``)."""
    from .lqr import lqr_problem
    base = lqr_problem(T)
    return TpbvpProblem(
        base=base,
        f_x=lambda t, x, u: np.zeros(np.shape(x)[:-1] + (1, 1)),
        f_u=lambda t, x, u: np.ones(np.shape(x)[:-1] + (1, 1)),
        L_x=lambda t, x, u: np.zeros(np.shape(x)),
        L_u=lambda t, x, u: 2.0 * np.asarray(u) / T,
        grad_M=lambda x: 2.0 * np.asarray(x, dtype=float),
        hess_M=lambda x: np.array([[2.0]]),
        hamiltonian_minimizer=lambda t, x, lam: -0.5 * T * np.asarray(lam, dtype=float),
        target_state=np.zeros(1),
        reference_control=np.zeros(1),
    )
