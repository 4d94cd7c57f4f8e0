"""Scalar LQR benchmark with a noisy open-loop oracle.

The problem is ``min (1/T) int_{t0}^T u^2 dt + x(T)^2`` subject to ``x' = u``.
Closed-loop controllers here are affine in the state, ``u = a(t) x + b(t)``,
with ``a`` and ``b`` stored on a uniform time grid (default step 0.01) and
linearly interpolated in between. Rollouts use RK4 with twice the grid step so
every stage time lands on a grid node.

Parameters fitted by the IVP-enhanced loop jump at the integer knots. Each
node therefore stores a left limit as well as its value; a rollout step that
ends on a knot uses the left limit, which makes the discrete rollouts match
the continuous-time analysis to rounding error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import ControlProblem
from .errors import DomainError, InsufficientData, SingularFit

RIDGE_FALLBACK = 1e-12


@dataclass(frozen=True)
class LqrSpec:
    T: int
    epsilon: float
    N: int
    dt: float = 0.01

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise DomainError(f"T must be a positive integer, got {self.T}")
        if not self.epsilon >= 0:
            raise DomainError("epsilon must be non-negative")
        if self.N < 1:
            raise DomainError("N must be >= 1")
        steps = 1.0 / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise DomainError(f"dt={self.dt} must divide 1")

    @property
    def nodes_per_unit(self) -> int:
        return int(round(1.0 / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.T * self.nodes_per_unit + 1) * self.dt

    @property
    def rollout_step(self) -> float:
        return 2.0 * self.dt


def optimal_gain(t, T):
    """Feedback gain of the optimal closed loop, ``-T / (T (T - t) + 1)``."""
    return -T / (T * (T - np.asarray(t, dtype=float)) + 1.0)


def lqr_optimal_closed_loop(t, x, T):
    return optimal_gain(t, T) * np.asarray(x, dtype=float)


def lqr_problem(T: float) -> ControlProblem:
    return ControlProblem(
        state_dim=1, control_dim=1, horizon=float(T),
        dynamics=lambda t, x, u: np.asarray(u, dtype=float) + 0.0 * x,
        running_cost=lambda t, x, u: np.sum(np.asarray(u) ** 2, axis=-1) / T,
        terminal_cost=lambda x: np.sum(np.asarray(x) ** 2, axis=-1),
        name=f"lqr-T{T}",
    )


@dataclass(frozen=True)
class NoisyPath:
    """Approximate open-loop solutions from ``(t0, x0)``; arrays broadcast."""

    t0: np.ndarray
    x0: np.ndarray
    z: np.ndarray
    T: int
    epsilon: float

    def u_hat(self, t=None):
        u = -self.T * self.x0 / (self.T * (self.T - self.t0) + 1.0) + self.epsilon * self.z
        if t is None:
            return u
        return np.broadcast_to(u, np.broadcast_shapes(np.shape(t), np.shape(u))).copy()

    def x_hat(self, t):
        t = np.asarray(t, dtype=float)
        T = self.T
        return ((T * (T - t) + 1.0) / (T * (T - self.t0) + 1.0) * self.x0
                + (t - self.t0) * self.epsilon * self.z)


def noisy_open_loop(t0, x0, spec: LqrSpec, rng: np.random.Generator) -> NoisyPath:
    """Draw one noisy open-loop solution per entry of ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), x0.shape)
    if np.any(t0 < 0) or np.any(t0 >= spec.T):
        raise DomainError("t0 must lie in [0, T)")
    z = rng.standard_normal(x0.shape)
    return NoisyPath(t0, x0, z, spec.T, spec.epsilon)


class NoisyOracle:
    """Counts every open-loop solve it hands out."""

    def __init__(self, spec: LqrSpec, rng: np.random.Generator):
        self.spec, self.rng, self.calls = spec, rng, 0

    def __call__(self, t0, x0) -> NoisyPath:
        path = noisy_open_loop(t0, x0, self.spec, self.rng)
        self.calls += int(np.size(path.x0))
        return path


@dataclass
class GridData:
    """Training data on the parameter grid: ``x[k, j]``, ``u[k, j]`` at ``times[k]``.

    NaN marks a missing sample.
    """

    times: np.ndarray
    x: np.ndarray
    u: np.ndarray


# --- node-wise affine controllers -----------------------------------------

@dataclass
class NodeController:
    """``u(t, x) = a(t) x + b(t)`` with node values plus left limits."""

    times: np.ndarray
    b: np.ndarray
    a: Optional[np.ndarray] = None          # None means the optimal gain (Model 1)
    T: Optional[int] = None
    b_left: Optional[np.ndarray] = None
    a_left: Optional[np.ndarray] = None

    def __post_init__(self):
        self.dt = float(self.times[1] - self.times[0])
        if self.b_left is None:
            self.b_left = self.b.copy()
        if self.a is not None and self.a_left is None:
            self.a_left = self.a.copy()

    def _locate(self, t, left):
        t = np.clip(np.asarray(t, dtype=float), self.times[0], self.times[-1])
        s = (t - self.times[0]) / self.dt
        if left:
            k1 = np.clip(np.ceil(s - 1e-9).astype(int), 1, len(self.times) - 1)
            k0 = k1 - 1
        else:
            k0 = np.clip(np.floor(s + 1e-9).astype(int), 0, len(self.times) - 2)
            k1 = k0 + 1
        w = np.clip(s - k0, 0.0, 1.0)
        return t, k0, k1, w

    def coefficients(self, t, left=False):
        t, k0, k1, w = self._locate(t, left)
        b = (1.0 - w) * self.b[k0] + w * self.b_left[k1]
        if self.a is None:
            a = optimal_gain(t, self.T)
        else:
            a = (1.0 - w) * self.a[k0] + w * self.a_left[k1]
        return a, b

    def __call__(self, t, x):
        a, b = self.coefficients(t)
        return a * x + b

    def left_limit(self, t, x):
        a, b = self.coefficients(t, left=True)
        return a * x + b

    def at_nodes(self):
        a = optimal_gain(self.times, self.T) if self.a is None else self.a
        return a, self.b


class OptimalController:
    def __init__(self, T):
        self.T = T

    def coefficients(self, t, left=False):
        t = np.asarray(t, dtype=float)
        return optimal_gain(t, self.T), np.zeros_like(t)

    def __call__(self, t, x):
        return lqr_optimal_closed_loop(t, x, self.T)


@dataclass
class Model1Params:
    times: np.ndarray
    b: np.ndarray
    T: int

    def controller(self, previous: Optional[NodeController] = None, knot=None) -> NodeController:
        return _with_left_limits(NodeController(self.times, self.b.copy(), None, self.T),
                                 previous, knot)


@dataclass
class Model2Params:
    times: np.ndarray
    a: np.ndarray
    b: np.ndarray
    T: int

    def controller(self, previous: Optional[NodeController] = None, knot=None) -> NodeController:
        return _with_left_limits(
            NodeController(self.times, self.b.copy(), self.a.copy(), self.T), previous, knot)


def _with_left_limits(ctrl: NodeController, previous, knot):
    """Inherit left limits at and before ``knot`` from the previous controller."""
    if previous is None or knot is None:
        return ctrl
    upto = ctrl.times <= knot + 1e-9
    ctrl.b_left[upto] = previous.b_left[upto]
    if ctrl.a is not None:
        prev_a_left = (optimal_gain(previous.times, previous.T) if previous.a is None
                       else previous.a_left)
        ctrl.a_left[upto] = prev_a_left[upto]
    return ctrl


def _slice_counts(data: GridData):
    counts = np.sum(np.isfinite(data.x) & np.isfinite(data.u), axis=1)
    return counts


def fit_model1(data: GridData, T: int) -> Model1Params:
    """Per-node least squares for the offset of ``u = -T x/(T(T-t)+1) + b(t)``."""
    counts = _slice_counts(data)
    if np.any(counts == 0):
        k = int(np.flatnonzero(counts == 0)[0])
        raise InsufficientData(f"no data at t={data.times[k]:.6g}", time=float(data.times[k]))
    gain = optimal_gain(data.times, T)[:, None]
    resid = data.u - gain * data.x
    return Model1Params(data.times.copy(), np.nanmean(resid, axis=1), T)


def fit_model2(data: GridData, T: Optional[int] = None, ridge: Optional[float] = None) -> Model2Params:
    """Per-node ordinary least squares for ``u = a(t) x + b(t)``.

    With ``ridge`` set, slices whose x-variance vanishes (or with a single
    sample) are solved with that ridge on the slope and a warning is issued;
    without it they raise :class:`SingularFit`.
    """
    valid = np.isfinite(data.x) & np.isfinite(data.u)
    counts = valid.sum(axis=1)
    if np.any(counts == 0):
        k = int(np.flatnonzero(counts == 0)[0])
        raise InsufficientData(f"no data at t={data.times[k]:.6g}", time=float(data.times[k]))
    x = np.where(valid, data.x, 0.0)
    u = np.where(valid, data.u, 0.0)
    xm = x.sum(axis=1) / counts
    um = u.sum(axis=1) / counts
    dx = np.where(valid, data.x - xm[:, None], 0.0)
    du = np.where(valid, data.u - um[:, None], 0.0)
    sxx = np.sum(dx * dx, axis=1)
    sxu = np.sum(dx * du, axis=1)
    scale = np.maximum(1.0, np.sum(x * x, axis=1))
    degenerate = (counts < 2) | (sxx <= 1e-14 * scale)
    if np.any(degenerate):
        k = int(np.flatnonzero(degenerate)[0])
        if ridge is None:
            raise SingularFit(f"zero x-variance at t={data.times[k]:.6g}")
        warnings.warn(f"degenerate Model-2 slice at t={data.times[k]:.6g}; ridge {ridge:g} used",
                      RuntimeWarning, stacklevel=2)
    denom = np.where(degenerate, sxx + (ridge or 0.0), sxx)
    a = np.where(denom > 0, sxu / np.where(denom > 0, denom, 1.0), 0.0)
    b = um - a * xm
    return Model2Params(data.times.copy(), a, b, T)


def fit(model: int, data: GridData, T: int):
    if model == 1:
        return fit_model1(data, T)
    if model == 2:
        return fit_model2(data, T, ridge=RIDGE_FALLBACK)
    raise DomainError(f"unknown model {model!r}")


# --- exact RK4 rollouts of affine closed loops ----------------------------

def _step_maps(ctrl, t0: float, t1: float, h: float):
    """Per-step affine maps ``x -> alpha x + beta`` of one RK4 step.

    Also returns the control at each step's start and end as affine maps.
    """
    n = int(round((t1 - t0) / h))
    if n < 1 or abs(n * h - (t1 - t0)) > 1e-9:
        raise DomainError(f"rollout step {h} must divide [{t0}, {t1}]")
    ts = t0 + h * np.arange(n)
    a0, b0 = ctrl.coefficients(ts)
    am, bm = ctrl.coefficients(ts + 0.5 * h)
    a1, b1 = ctrl.coefficients(ts + h, left=True)
    # each quantity is tracked as (coefficient on x, constant)
    k1 = (a0, b0)
    x2 = (1 + 0.5 * h * k1[0], 0.5 * h * k1[1])
    k2 = (am * x2[0], am * x2[1] + bm)
    x3 = (1 + 0.5 * h * k2[0], 0.5 * h * k2[1])
    k3 = (am * x3[0], am * x3[1] + bm)
    x4 = (1 + h * k3[0], h * k3[1])
    k4 = (a1 * x4[0], a1 * x4[1] + b1)
    alpha = 1 + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    beta = h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    times = np.append(ts, t1)
    return times, alpha, beta, (a0, b0), (a1, b1)


def affine_rollout(ctrl, x0, t0: float, t1: float, h: float):
    """RK4 states of ``x' = a(t) x + b(t)`` for a batch of initial states.

    Returns ``(times, states[n_steps+1, B])``. Exact composition of the per-step
    affine maps; no Python loop over the batch.
    """
    times, alpha, beta, _, _ = _step_maps(ctrl, t0, t1, h)
    states = _compose(alpha, beta, np.asarray(x0, dtype=float))
    return times, states


def _compose(alpha, beta, x0):
    n = len(alpha)
    P = np.empty(n + 1)
    Q = np.empty(n + 1)
    P[0], Q[0] = 1.0, 0.0
    for k in range(n):
        P[k + 1] = alpha[k] * P[k]
        Q[k + 1] = alpha[k] * Q[k] + beta[k]
    return P[:, None] * np.atleast_1d(x0)[None, :] + Q[:, None]


def closed_loop_cost(ctrl, x0, T: int, h: float):
    """``(1/T) int u^2 + x(T)^2`` for each initial state, RK4 + one-sided trapezoid."""
    times, alpha, beta, (a0, b0), (a1, b1) = _step_maps(ctrl, 0.0, float(T), h)
    X = _compose(alpha, beta, np.asarray(x0, dtype=float))
    u_start = a0[:, None] * X[:-1] + b0[:, None]
    u_end = a1[:, None] * X[1:] + b1[:, None]
    run = np.sum(0.5 * h * (u_start ** 2 + u_end ** 2), axis=0) / T
    return run + X[-1] ** 2


def optimal_cost(x0, T):
    return np.asarray(x0, dtype=float) ** 2 / (T * T + 1.0)


# --- training pipelines ----------------------------------------------------

@dataclass
class LqrRun:
    controller: NodeController
    params: object
    data: GridData
    oracle_calls: int
    noise: list = field(default_factory=list)      # Z draws per iteration
    reached: list = field(default_factory=list)    # reached states per iteration
    initial_states: Optional[np.ndarray] = None


def run_vanilla(spec: LqrSpec, model: int, rng: np.random.Generator, oracle=None) -> LqrRun:
    """Fit on N*T noisy optimal paths started at t=0 from N(0, 1) states."""
    oracle = oracle or NoisyOracle(spec, rng)
    x0 = rng.standard_normal(spec.N * spec.T)
    paths = oracle(0.0, x0)
    t = spec.times[:, None]
    data = GridData(spec.times, paths.x_hat(t), paths.u_hat(t))
    params = fit(model, data, spec.T)
    return LqrRun(params.controller(), params, data, oracle.calls, [paths.z], [x0], x0)


def run_ivp_enhanced(spec: LqrSpec, model: int, rng: np.random.Generator, oracle=None) -> LqrRun:
    """IVP-enhanced sampling with knots 0 < 1 < ... < T."""
    oracle = oracle or NoisyOracle(spec, rng)
    times = spec.times
    x_init = rng.standard_normal(spec.N)
    ctrl = NodeController(times, np.zeros_like(times), np.zeros_like(times), spec.T)
    xs = np.full((len(times), spec.N), np.nan)
    us = np.full((len(times), spec.N), np.nan)
    noise, reached, params = [], [], None
    for i in range(spec.T):
        if i == 0:
            x_reach = x_init.copy()
        else:
            _, states = affine_rollout(ctrl, x_init, 0.0, float(i), spec.rollout_step)
            x_reach = states[-1]
        paths = oracle(float(i), x_reach)
        new = times >= i - 1e-9
        xs[new] = paths.x_hat(times[new][:, None])
        us[new] = paths.u_hat(times[new][:, None])
        data = GridData(times, xs.copy(), us.copy())
        params = fit(model, data, spec.T)
        ctrl = params.controller(previous=ctrl if i > 0 else None, knot=float(i))
        noise.append(paths.z)
        reached.append(x_reach)
    return LqrRun(ctrl, params, data, oracle.calls, noise, reached, x_init)


def run(method: str, spec: LqrSpec, model: int, rng) -> LqrRun:
    if method == "vanilla":
        return run_vanilla(spec, model, rng)
    if method == "ivp":
        return run_ivp_enhanced(spec, model, rng)
    raise DomainError(f"unknown method {method!r}")


# --- closed forms ----------------------------------------------------------

def vanilla_closed_form(spec: LqrSpec, zbar: float):
    """Node values (a, b) of the Model-1 vanilla controller."""
    T, t = spec.T, spec.times
    return optimal_gain(t, T), (T * T + 1.0) / (T * (T - t) + 1.0) * spec.epsilon * zbar


def ivp_closed_form(spec: LqrSpec, zbars):
    """Node values (a, b) of the Model-1 IVP-enhanced controller."""
    T, t = spec.T, spec.times
    i = np.minimum(np.floor(t + 1e-9), T - 1).astype(int)
    zb = np.asarray(zbars)[i]
    return optimal_gain(t, T), (T * (T - i) + 1.0) / (T * (T - t) + 1.0) * spec.epsilon * zb


def reached_closed_form(spec: LqrSpec, x_init, zbars, i: int):
    """Reached state at knot ``i`` of the IVP-enhanced loop."""
    T, eps = spec.T, spec.epsilon
    out = (T * (T - i) + 1.0) / (T * T + 1.0) * np.asarray(x_init, dtype=float)
    for k in range(i):
        out = out + (T * (T - i) + 1.0) / (T * (T - k - 1) + 1.0) * eps * zbars[k]
    return out


@dataclass(frozen=True)
class Theorem1Report:
    vanilla_moment_gap: Callable
    ivp_moment_gap: Callable
    ivp_moment_gap_bound: float
    vanilla_perf_gap: float
    ivp_perf_gap: float
    ivp_perf_gap_bound: float


def theorem1_predictions(spec: LqrSpec) -> Theorem1Report:
    T, N, eps = spec.T, spec.N, spec.epsilon

    def vanilla_gap(t):
        return (1.0 - 1.0 / (N * T)) * eps ** 2 * np.asarray(t, dtype=float) ** 2

    def ivp_gap(t):
        t = np.asarray(t, dtype=float)
        i = np.minimum(np.floor(t + 1e-9), T - 1)
        return eps ** 2 * (t - i) ** 2 * (1.0 - 1.0 / N)

    exact = eps ** 2 / N * (2.0 + sum(1.0 / (T * k + 1.0) for k in range(1, T)))
    return Theorem1Report(vanilla_gap, ivp_gap, eps ** 2, (T * T + 1.0) * eps ** 2 / (N * T),
                          exact, 3.0 * eps ** 2 / N)


# --- Monte-Carlo estimators -----------------------------------------------

def _replicate_rng(rng, r):
    if isinstance(rng, np.random.Generator):
        raise TypeError("pass an integer base seed for replicate streams")
    return np.random.default_rng(int(rng) + r)


def monte_carlo_perf_gap(controller_factory, spec: LqrSpec, n_repeats: int, n_eval_points: int,
                         rng) -> dict:
    """Mean of ``J_controller - J_o`` over replicates and N(0,1) initial states.

    ``controller_factory(spec, generator)`` returns an affine controller;
    replicate ``r`` uses seed ``rng + r``. The standard error is the sample
    standard deviation of the per-replicate means over sqrt(n_repeats).
    """
    if n_repeats < 2:
        raise DomainError("n_repeats must be >= 2")
    per_rep = np.empty(n_repeats)
    for r in range(n_repeats):
        g = _replicate_rng(rng, r)
        ctrl = controller_factory(spec, g)
        x = g.standard_normal(n_eval_points)
        gap = closed_loop_cost(ctrl, x, spec.T, spec.rollout_step) - optimal_cost(x, spec.T)
        per_rep[r] = gap.mean()
    return {"mean": float(per_rep.mean()),
            "std_error": float(per_rep.std(ddof=1) / np.sqrt(n_repeats)),
            "replicates": per_rep}


def moment_gap_mc(spec: LqrSpec, method: str, model: int, eval_times, n_repeats: int,
                  n_eval_points: int, seed: int) -> dict:
    """Empirical ``E|x_hat(t)|^2 - E|x(t)|^2`` for training data vs rollouts."""
    eval_times = np.asarray(eval_times, dtype=float)
    idx = np.rint(eval_times / spec.dt).astype(int)
    gaps = np.empty((n_repeats, len(eval_times)))
    for r in range(n_repeats):
        g = np.random.default_rng(seed + r)
        res = run(method, spec, model, g)
        x = g.standard_normal(n_eval_points)
        times, states = affine_rollout(res.controller, x, 0.0, float(spec.T), spec.rollout_step)
        ridx = np.rint(eval_times / spec.rollout_step).astype(int)
        train_m2 = np.nanmean(res.data.x[idx] ** 2, axis=1)
        roll_m2 = np.mean(states[ridx] ** 2, axis=1)
        gaps[r] = train_m2 - roll_m2
    return {"times": eval_times, "mean": gaps.mean(axis=0),
            "std_error": gaps.std(axis=0, ddof=1) / np.sqrt(n_repeats), "replicates": gaps}


def model_factory(method: str, model: int):
    def factory(spec, g):
        return run(method, spec, model, g).controller
    return factory


# --- adapter for the generic sampler -----------------------------------------

def grid_from_dataset(dataset) -> GridData:
    """Regroup a scalar-state Dataset into node slices ``x[k, j]`` (NaN = missing)."""
    times = np.unique(np.round(dataset.t, 9))
    ids = np.unique(dataset.traj_id)
    k = np.searchsorted(times, np.round(dataset.t, 9))
    j = np.searchsorted(ids, dataset.traj_id)
    x = np.full((len(times), len(ids)), np.nan)
    u = np.full((len(times), len(ids)), np.nan)
    x[k, j] = dataset.x[:, 0]
    u[k, j] = dataset.u[:, 0]
    return GridData(times, x, u)


class VectorController:
    """Adapts a scalar-state controller to ``(..., 1)`` state arrays."""

    def __init__(self, scalar):
        self.scalar = scalar

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.scalar(t, x[..., 0]))[..., None] + 0.0 * x

    def left_limit(self, t, x):
        x = np.asarray(x, dtype=float)
        f = getattr(self.scalar, "left_limit", self.scalar)
        return np.asarray(f(t, x[..., 0]))[..., None] + 0.0 * x


def model2_trainer(T: int, ridge: Optional[float] = RIDGE_FALLBACK):
    """``dataset -> controller`` fitting Model 2 node-wise (for the generic sampler)."""
    def trainer(dataset, previous=None):
        params = fit_model2(grid_from_dataset(dataset), T, ridge=ridge)
        return VectorController(params.controller())
    return trainer
