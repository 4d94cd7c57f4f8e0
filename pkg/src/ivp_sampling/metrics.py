"""Diagnostics: training/reached distribution mismatch, cost ratios, disturbances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (ControlProblem, Trajectory, batch_cost, evaluate_cost, integrate_batch,
                   rk4_step, time_grid)
from .errors import AlignmentError, DomainError

SUMMARY_COLUMNS = ("mean", "std", "max", "p90", "p75", "median", "diverged")
SUMMARY_HEADER = ("Mean", "Std", "Max", "90%", "75%", "Median", "Diverged")


@dataclass(frozen=True)
class SnapshotPair:
    t: float
    training_states: np.ndarray
    reached_states: np.ndarray

    def __post_init__(self):
        a, b = np.atleast_2d(self.training_states), np.atleast_2d(self.reached_states)
        if a.size == 0 or b.size == 0:
            raise DomainError("snapshot sets must be non-empty")
        if a.shape[1] != b.shape[1]:
            raise DomainError("snapshot sets have different state dimensions")


def pointwise_distance(pair: SnapshotPair) -> float:
    """Mean Euclidean distance between index-aligned training and reached states."""
    X, Y = np.atleast_2d(pair.training_states), np.atleast_2d(pair.reached_states)
    if X.shape != Y.shape:
        raise AlignmentError(f"misaligned snapshot sets: {X.shape} vs {Y.shape}")
    return float(np.mean(np.linalg.norm(X - Y, axis=1)))


def _gauss_gram(X, Y):
    d2 = (np.sum(X * X, axis=1)[:, None] + np.sum(Y * Y, axis=1)[None, :] - 2.0 * X @ Y.T)
    return np.exp(-0.5 * np.maximum(d2, 0.0))


def mmd_gaussian(X, Y, unbiased: bool = False) -> float:
    """Maximum mean discrepancy with kernel ``exp(-|x - y|^2 / 2)``.

    Biased V-statistic by default; returns ``sqrt(max(0, MMD^2))``.
    """
    X, Y = np.atleast_2d(np.asarray(X, float)), np.atleast_2d(np.asarray(Y, float))
    if X.size == 0 or Y.size == 0:
        raise DomainError("MMD needs non-empty sets")
    Kxx, Kyy = _gauss_gram(X, X), _gauss_gram(Y, Y)
    # both orientations, so that swapping X and Y is bit-for-bit symmetric
    kxy = 0.5 * (_gauss_gram(X, Y).mean() + _gauss_gram(Y, X).mean())
    if unbiased:
        n, m = len(X), len(Y)
        if n < 2 or m < 2:
            raise DomainError("unbiased MMD needs at least two points per set")
        mxx = (Kxx.sum() - np.trace(Kxx)) / (n * (n - 1))
        myy = (Kyy.sum() - np.trace(Kyy)) / (m * (m - 1))
    else:
        mxx, myy = Kxx.mean(), Kyy.mean()
    mmd2 = mxx + myy - 2.0 * kxy
    return float(np.sqrt(max(0.0, mmd2)))


# --- cost ratios ---------------------------------------------------------------

@dataclass
class RatioTable:
    """Per-trajectory cost ratios; +inf marks a diverged rollout."""

    ratios: np.ndarray
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=float)
        if self.ids is None:
            self.ids = np.arange(len(self.ratios))

    @property
    def finite(self) -> np.ndarray:
        return self.ratios[np.isfinite(self.ratios)]

    def summary(self) -> dict:
        """Mean/Std/percentiles over finite ratios; Max includes +inf; diverged count."""
        r = self.finite
        n_div = int(np.sum(~np.isfinite(self.ratios)))
        if r.size == 0:
            nan = float("nan")
            return {"mean": nan, "std": nan, "max": float("inf") if n_div else nan,
                    "p90": nan, "p75": nan, "median": nan, "diverged": n_div}
        return {
            "mean": float(np.mean(r)),
            "std": float(np.std(r)),
            "max": float("inf") if n_div else float(np.max(r)),
            "p90": float(np.percentile(r, 90)),
            "p75": float(np.percentile(r, 75)),
            "median": float(np.median(r)),
            "diverged": n_div,
        }

    def cdf(self):
        """Sorted ratios (+inf last) and cumulative fractions ending at 1."""
        r = np.sort(self.ratios)
        return r, np.arange(1, len(r) + 1) / len(r)

    def ratios_csv(self) -> str:
        rows = ["id,ratio"] + [f"{int(i)},{_num(r)}" for i, r in zip(self.ids, self.ratios)]
        return "\n".join(rows) + "\n"

    def cdf_csv(self) -> str:
        r, c = self.cdf()
        rows = ["ratio,cum_fraction"] + [f"{_num(a)},{_num(b)}" for a, b in zip(r, c)]
        return "\n".join(rows) + "\n"


def _num(v) -> str:
    v = float(v)
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


def summary_csv(rows: dict) -> str:
    """``rows`` maps a label to a summary dict; one CSV line per label."""
    lines = ["label," + ",".join(SUMMARY_HEADER)]
    for label, s in rows.items():
        lines.append(label + "," + ",".join(_num(s[c]) if c != "diverged" else str(s[c])
                                            for c in SUMMARY_COLUMNS))
    return "\n".join(lines) + "\n"


def _refs_initial(refs):
    t0 = {float(r.trajectory.times[0]) for r in refs}
    if len(t0) != 1:
        raise DomainError("references must share their initial time")
    X0 = np.array([r.trajectory.states[0] for r in refs])
    return t0.pop(), X0


def _ratio(costs, refs):
    opt = np.array([r.cost for r in refs], dtype=float)
    if np.any(~np.isfinite(opt)) or not all(r.converged for r in refs):
        raise DomainError("cost ratios need converged optimal references")
    out = np.where(np.isfinite(costs), costs / opt, np.inf)
    return out


def cost_ratio_table(problem: ControlProblem, controller, optimal_refs: Sequence,
                     rollout_dt: float, input_noise=None) -> RatioTable:
    """Roll ``controller`` from each reference's initial state; divide by the optimal cost."""
    if not optimal_refs:
        raise DomainError("no references")
    t0, X0 = _refs_initial(optimal_refs)
    roll = integrate_batch(problem, controller, X0, t0, problem.horizon, rollout_dt, input_noise)
    return RatioTable(_ratio(batch_cost(problem, roll), optimal_refs))


class UniformInputNoise:
    """Fresh uniform draws on [-sigma, sigma]^(1+n) for every rollout step."""

    def __init__(self, sigma: float, state_dim: int, rng: np.random.Generator):
        if sigma < 0:
            raise DomainError("sigma must be >= 0")
        self.sigma, self.n, self.rng = sigma, state_dim, rng

    def __call__(self, k, B):
        e = self.rng.uniform(-self.sigma, self.sigma, size=(B, 1 + self.n))
        return e[:, 0], e[:, 1:]


def disturbance_eval(problem: ControlProblem, controller, optimal_refs: Sequence, sigma: float,
                     trials: int, rollout_dt: float, rng: np.random.Generator) -> RatioTable:
    """Cost ratios when the controller sees ``(t, x) + eps``, eps ~ U[-sigma, sigma]^(1+n).

    One independent RNG stream per trial; ids are ``trial * len(refs) + ref``.
    """
    if sigma < 0:
        raise DomainError("sigma must be >= 0")
    if sigma == 0:
        base = cost_ratio_table(problem, controller, optimal_refs, rollout_dt)
        ratios = np.tile(base.ratios, trials)
        return RatioTable(ratios)
    streams = rng.spawn(trials)
    parts = []
    for g in streams:
        noise = UniformInputNoise(sigma, problem.state_dim, g)
        parts.append(cost_ratio_table(problem, controller, optimal_refs, rollout_dt, noise).ratios)
    return RatioTable(np.concatenate(parts))


class OpenLoopReplay:
    """The stored open-loop control evaluated at a (possibly perturbed) time.

    Off-grid times use linear interpolation; times are clipped to the grid.
    """

    def __init__(self, traj: Trajectory, time_noise=None):
        self.traj, self.time_noise = traj, time_noise

    def __call__(self, t, x):
        tt = np.asarray(t, dtype=float)
        if self.time_noise is not None:
            tt = tt + self.time_noise
        return np.stack([np.interp(tt, self.traj.times, self.traj.controls[:, j])
                         for j in range(self.traj.controls.shape[1])], axis=-1) + 0.0 * x[..., :1]


def open_loop_disturbance_eval(problem: ControlProblem, optimal_refs: Sequence, sigma: float,
                               rollout_dt: float, rng: np.random.Generator) -> RatioTable:
    """Replay each reference's open-loop control at times perturbed by U[-sigma, sigma].

    A fresh time perturbation is drawn once per rollout step.
    """
    ratios = []
    for ref in optimal_refs:
        traj = ref.trajectory
        times = time_grid(traj.times[0], problem.horizon, rollout_dt)
        noise = rng.uniform(-sigma, sigma, size=len(times))
        x = traj.states[0][None, :].copy()
        ok = True
        with np.errstate(all="ignore"):
            states = [x[0].copy()]
            controls = []
            for k in range(len(times) - 1):
                ctrl = OpenLoopReplay(traj, noise[k])
                x, u = rk4_step(problem, ctrl, times[k], x, times[k + 1] - times[k])
                controls.append(u[0])
                if not np.all(np.isfinite(x)):
                    ok = False
                    break
                states.append(x[0].copy())
            if ok:
                controls.append(OpenLoopReplay(traj, noise[-1])(times[-1], x)[0])
                c = evaluate_cost(problem, Trajectory(times, np.array(states), np.array(controls)))
                ratios.append(c / ref.cost)
            else:
                ratios.append(np.inf)
    return RatioTable(np.array(ratios))


# --- mismatch curves -----------------------------------------------------------

def mismatch_curve(dataset, roll_states, roll_times, eval_times):
    """Training-vs-reached discrepancy at each evaluation time.

    Args:
        dataset: training Dataset; trajectory ids index rows of the rollout.
        roll_states: (K+1, N, n) rollout of the controller from the N initial points.
        roll_times: rollout grid.
        eval_times: times that lie on both the data grid and the rollout grid.

    Returns:
        (times, pointwise, mmd) arrays; NaN where no aligned data exist.
    """
    pw, mm = [], []
    for t in eval_times:
        k = int(np.argmin(np.abs(roll_times - t)))
        if abs(roll_times[k] - t) > 1e-7:
            raise AlignmentError(f"t={t} is not on the rollout grid")
        ids, X = dataset.at_time(t)
        Y = roll_states[k, ids]
        ok = np.all(np.isfinite(Y), axis=1)
        if not np.any(ok):
            pw.append(np.nan)
            mm.append(np.nan)
            continue
        pair = SnapshotPair(float(t), X[ok], Y[ok])
        pw.append(pointwise_distance(pair))
        mm.append(mmd_gaussian(X[ok], Y[ok]))
    return np.asarray(eval_times, dtype=float), np.array(pw), np.array(mm)


def mismatch_csv(times, pointwise, mmd) -> str:
    rows = ["t,pointwise,mmd"] + [f"{_num(t)},{_num(p)},{_num(m)}"
                                  for t, p, m in zip(times, pointwise, mmd)]
    return "\n".join(rows) + "\n"


def knot_jumps(times, curve, knots, tol: float = 1e-7):
    """Two-sided jumps ``|c(t_k) - c(t_k^-)|`` at knots and the median step elsewhere."""
    times, curve = np.asarray(times, float), np.asarray(curve, float)
    steps = np.abs(np.diff(curve))
    at_knot = np.zeros(len(steps), dtype=bool)
    jumps = []
    for tk in knots:
        k = np.flatnonzero(np.abs(times - tk) < tol)
        if len(k) == 0 or k[0] == 0:
            continue
        at_knot[k[0] - 1] = True
        jumps.append(steps[k[0] - 1])
    off = steps[~at_knot]
    return np.array(jumps), float(np.median(off)) if off.size else float("nan")
