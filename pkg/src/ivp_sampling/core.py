"""Problem definitions, fixed-step RK4 rollouts, costs and dataset sampling.

All callables on a :class:`ControlProblem` are expected to broadcast over
leading batch dimensions: ``dynamics(t, x[..., n], u[..., m]) -> [..., n]``,
``running_cost(t, x, u) -> [...]`` and ``terminal_cost(x) -> [...]``.
Controllers follow the same convention, ``controller(t, x[..., n]) -> [..., m]``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import AlignmentError, DomainError, IntegrationDiverged

_TIME_TOL = 1e-9


@dataclass(frozen=True)
class ControlProblem:
    state_dim: int
    control_dim: int
    horizon: float
    dynamics: Callable
    running_cost: Callable
    terminal_cost: Callable
    control_lower: Optional[np.ndarray] = None
    control_upper: Optional[np.ndarray] = None
    name: str = "problem"

    def __post_init__(self):
        if self.state_dim < 1 or self.control_dim < 1:
            raise DomainError("state_dim and control_dim must be positive")
        if not self.horizon > 0:
            raise DomainError(f"horizon must be positive, got {self.horizon}")
        lo, hi = self.control_lower, self.control_upper
        if lo is not None and hi is not None and np.any(np.asarray(lo) > np.asarray(hi)):
            raise DomainError("control_lower exceeds control_upper")

    def clamp(self, u):
        if self.control_lower is None and self.control_upper is None:
            return u
        return np.clip(u, self.control_lower, self.control_upper)


class ZeroController:
    """The controller that always returns zero (used before any training)."""

    def __init__(self, control_dim: int):
        self.control_dim = control_dim

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.control_dim,))


class ConstantController:
    def __init__(self, u):
        self.u = np.asarray(u, dtype=float)

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.u, x.shape[:-1] + self.u.shape).copy()


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        n = len(self.times)
        if n < 2 or len(self.states) != n or len(self.controls) != n:
            raise DomainError("trajectory arrays must share a length >= 2")
        if np.any(np.diff(self.times) <= 0):
            raise DomainError("trajectory times must be strictly increasing")

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def state_at(self, t: float) -> np.ndarray:
        """Linear interpolation of the state at time ``t``."""
        return np.array([np.interp(t, self.times, col) for col in self.states.T])

    def control_at(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, col) for col in self.controls.T])

    def to_csv(self, path=None) -> str:
        n, m = self.states.shape[1], self.controls.shape[1]
        header = ["t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for t, x, u in zip(self.times, self.states, self.controls):
            writer.writerow([_fmt(t)] + [_fmt(v) for v in x] + [_fmt(v) for v in u])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "Trajectory":
        text = source if "\n" in str(source) else open(source).read()
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        n = sum(1 for h in header if h.startswith("x"))
        return cls(body[:, 0], body[:, 1:1 + n], body[:, 1 + n:])


def _fmt(v) -> str:
    return format(float(v), ".17g")


@dataclass(frozen=True)
class DataPoint:
    t: float
    x: np.ndarray
    u: np.ndarray


@dataclass(frozen=True)
class TemporalGrid:
    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", k)
        if len(k) < 2 or k[0] != 0.0 or np.any(np.diff(k) <= 0):
            raise DomainError(f"temporal grid must start at 0 and increase strictly: {k}")

    @classmethod
    def parse(cls, text: str) -> "TemporalGrid":
        return cls(np.array([float(s) for s in text.split(",") if s.strip()]))

    @property
    def K(self) -> int:
        return len(self.knots) - 1

    @property
    def T(self) -> float:
        return float(self.knots[-1])

    def check_horizon(self, T: float):
        if abs(self.T - T) > _TIME_TOL:
            raise DomainError(f"grid ends at {self.T}, horizon is {T}")


@dataclass
class Dataset:
    """Time-state-control tuples tagged with the trajectory they came from."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    traj_id: np.ndarray
    delta: float

    @classmethod
    def empty(cls, state_dim: int, control_dim: int, delta: float) -> "Dataset":
        return cls(np.zeros(0), np.zeros((0, state_dim)), np.zeros((0, control_dim)),
                   np.zeros(0, dtype=int), delta)

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], ids: Sequence[int], delta: float,
                          state_dim: int, control_dim: int) -> "Dataset":
        parts = [cls.empty(state_dim, control_dim, delta)]
        for traj, i in zip(trajs, ids):
            idx = sample_indices(traj.times, delta)
            parts.append(cls(traj.times[idx], traj.states[idx], traj.controls[idx],
                             np.full(len(idx), i, dtype=int), delta))
        return cls.concat(parts)

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        return cls(np.concatenate([p.t for p in parts]),
                   np.concatenate([p.x for p in parts]),
                   np.concatenate([p.u for p in parts]),
                   np.concatenate([p.traj_id for p in parts]),
                   parts[0].delta)

    def __len__(self):
        return len(self.t)

    def points(self):
        return [DataPoint(float(t), x, u) for t, x, u in zip(self.t, self.x, self.u)]

    def subset(self, mask) -> "Dataset":
        return Dataset(self.t[mask], self.x[mask], self.u[mask], self.traj_id[mask], self.delta)

    def splice(self, new: "Dataset", t_cut: float) -> "Dataset":
        """Keep rows strictly before ``t_cut`` and append ``new``."""
        keep = self.subset(self.t < t_cut - _TIME_TOL)
        return Dataset.concat([keep, new])

    def at_time(self, t: float):
        mask = np.abs(self.t - t) < 1e-7
        order = np.argsort(self.traj_id[mask], kind="stable")
        return self.traj_id[mask][order], self.x[mask][order]

    def key_set(self):
        return {(int(i), round(float(t), 9)) for i, t in zip(self.traj_id, self.t)}

    def check_invariants(self):
        keys = [(int(i), round(float(t), 9)) for i, t in zip(self.traj_id, self.t)]
        if len(keys) != len(set(keys)):
            raise AlignmentError("duplicate (trajectory_id, t) pairs in dataset")
        ratio = self.t / self.delta
        if np.any(np.abs(ratio - np.round(ratio)) > 1e-6):
            raise AlignmentError("dataset times are not multiples of delta")


def rk4_step(problem: ControlProblem, controller, t: float, x: np.ndarray, h: float):
    """One RK4 step of the closed loop; returns (x_next, u_at_t)."""
    f, clamp = problem.dynamics, problem.clamp
    left = getattr(controller, "left_limit", controller)
    u1 = clamp(controller(t, x))
    k1 = f(t, x, u1)
    tm = t + 0.5 * h
    k2 = f(tm, x + 0.5 * h * k1, clamp(controller(tm, x + 0.5 * h * k1)))
    k3 = f(tm, x + 0.5 * h * k2, clamp(controller(tm, x + 0.5 * h * k2)))
    x4 = x + h * k3
    k4 = f(t + h, x4, clamp(left(t + h, x4)))
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), u1


def time_grid(t0: float, t1: float, dt: float) -> np.ndarray:
    """Uniform grid from t0 with step dt, ending exactly at t1.

    A trailing short step is used when dt does not divide (t1 - t0).
    """
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    if not t1 > t0:
        raise DomainError(f"need t0 < t1, got {t0}, {t1}")
    n = int(np.ceil((t1 - t0) / dt - 1e-9))
    times = t0 + dt * np.arange(n + 1)
    times[-1] = t1
    return times


def integrate_ivp(problem: ControlProblem, controller, x0, t0: float, t1: float,
                  dt: float) -> Trajectory:
    """Classical RK4 rollout of the closed loop ``x' = f(t, x, u(t, x))``.

    Raises:
        IntegrationDiverged: a non-finite state appeared; ``last_time`` is the
            last grid time with a finite state.
    """
    if t0 < -_TIME_TOL or t1 > problem.horizon + _TIME_TOL:
        raise DomainError(f"[{t0}, {t1}] is outside [0, {problem.horizon}]")
    times = time_grid(t0, t1, dt)
    x = np.asarray(x0, dtype=float).copy()
    states = np.empty((len(times), problem.state_dim))
    controls = np.empty((len(times), problem.control_dim))
    states[0] = x
    with np.errstate(all="ignore"):
        for k in range(len(times) - 1):
            x, u = rk4_step(problem, controller, times[k], x, times[k + 1] - times[k])
            controls[k] = u
            if not np.all(np.isfinite(x)):
                raise IntegrationDiverged(
                    f"non-finite state after t={times[k]:.6g}", last_time=float(times[k]))
            states[k + 1] = x
        controls[-1] = problem.clamp(controller(times[-1], x))
    return Trajectory(times, states, controls)


@dataclass
class BatchRollout:
    times: np.ndarray
    states: np.ndarray          # (K+1, B, n)
    controls: np.ndarray        # (K+1, B, m)
    diverged: np.ndarray        # (B,) bool
    diverged_time: np.ndarray = field(default=None)

    def trajectory(self, b: int) -> Trajectory:
        return Trajectory(self.times, self.states[:, b], self.controls[:, b])


def integrate_batch(problem: ControlProblem, controller, X0, t0: float, t1: float,
                    dt: float, input_noise=None) -> BatchRollout:
    """Vectorized RK4 rollout of many initial states at once.

    Rows that produce non-finite states are frozen, filled with NaN from then
    on and flagged in ``diverged``; they never raise.

    ``input_noise(k, B) -> (dt_noise[B], dx_noise[B, n])`` optionally perturbs
    the controller input (time and state) once per step, constant across the
    four RK4 stages.
    """
    times = time_grid(t0, t1, dt)
    X = np.array(X0, dtype=float, ndmin=2)
    B, n = X.shape
    states = np.full((len(times), B, n), np.nan)
    controls = np.full((len(times), B, problem.control_dim), np.nan)
    states[0] = X
    alive = np.all(np.isfinite(X), axis=1)
    dead_time = np.full(B, np.nan)
    dead_time[~alive] = t0
    base = controller
    with np.errstate(all="ignore"):
        for k in range(len(times) - 1):
            ctrl = base
            if input_noise is not None:
                ns_t, ns_x = input_noise(k, B)
                ctrl = _NoisyInput(base, ns_t[alive], ns_x[alive])
            xa = X[alive]
            xn, u = rk4_step(problem, ctrl, times[k], xa, times[k + 1] - times[k])
            controls[k, alive] = u
            ok = np.all(np.isfinite(xn), axis=1)
            idx = np.flatnonzero(alive)
            X[idx[ok]] = xn[ok]
            dead_time[idx[~ok]] = times[k]
            alive[idx[~ok]] = False
            states[k + 1, alive] = X[alive]
        if alive.any():
            ctrl = base
            if input_noise is not None:
                ns_t, ns_x = input_noise(len(times) - 1, B)
                ctrl = _NoisyInput(base, ns_t[alive], ns_x[alive])
            controls[-1, alive] = problem.clamp(ctrl(times[-1], X[alive]))
    return BatchRollout(times, states, controls, ~alive, dead_time)


class _NoisyInput:
    def __init__(self, base, dt_noise, dx_noise):
        self.base, self.dt_noise, self.dx_noise = base, dt_noise, dx_noise

    def __call__(self, t, x):
        return self.base(t + self.dt_noise, x + self.dx_noise)


def trapezoid(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    dt = np.diff(times)
    dt = dt.reshape(dt.shape + (1,) * (values.ndim - 1))
    return np.sum(0.5 * dt * (values[1:] + values[:-1]), axis=0)


def evaluate_cost(problem: ControlProblem, traj: Trajectory) -> float:
    """Trapezoidal running cost plus terminal cost along ``traj``."""
    if abs(traj.t_end - problem.horizon) > 1e-7:
        raise DomainError(f"trajectory ends at {traj.t_end}, horizon is {problem.horizon}")
    L = problem.running_cost(traj.times, traj.states, traj.controls)
    return float(trapezoid(np.asarray(L, dtype=float), traj.times)
                 + problem.terminal_cost(traj.states[-1]))


def batch_cost(problem: ControlProblem, roll: BatchRollout) -> np.ndarray:
    """Per-row cost of a batch rollout; diverged rows get +inf."""
    t = roll.times[:, None]
    L = problem.running_cost(t, roll.states, roll.controls)
    J = trapezoid(L, roll.times) + problem.terminal_cost(roll.states[-1])
    J = np.where(roll.diverged | ~np.isfinite(J), np.inf, J)
    return J


def sample_indices(times: np.ndarray, delta: float) -> np.ndarray:
    """Indices of the grid nodes at t0, t0 + delta, ... (inclusive of the end)."""
    if not delta > 0:
        raise AlignmentError(f"delta must be positive, got {delta}")
    times = np.asarray(times, dtype=float)
    t0 = times[0]
    n = int(np.floor((times[-1] - t0) / delta + 1e-9))
    targets = t0 + delta * np.arange(n + 1)
    idx = np.searchsorted(times, targets - 1e-9)
    idx = np.minimum(idx, len(times) - 1)
    if np.any(np.abs(times[idx] - targets) > 1e-7):
        raise AlignmentError(f"delta={delta} is not aligned with the trajectory grid")
    return idx


def sample_dataset(traj: Trajectory, delta: float):
    """Data points of ``traj`` at times t0, t0 + delta, ..."""
    idx = sample_indices(traj.times, delta)
    return [DataPoint(float(traj.times[i]), traj.states[i].copy(), traj.controls[i].copy())
            for i in idx]
