"""Data generation strategies for learning a closed-loop controller.

``ivp_enhanced`` alternates between training on open-loop optimal data and
rolling the current controller forward to the next knot of a temporal grid,
where fresh open-loop problems are solved from the states actually reached.
The other strategies draw initial points from the box (``vanilla``) or pick,
among a few candidates, the one that looks worst for the current controller
(``as_large_u``, ``as_large_v``, ``as_bad_v``).

Everything here is problem-agnostic: a :class:`SamplerSetup` bundles the
problem, an open-loop solver, a trainer and an initial-state sampler.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (ControlProblem, Dataset, TemporalGrid, ZeroController, batch_cost,
                   integrate_batch)
from .errors import DomainError, IterationStarved
from .nn import Normalization, _batch_arrays, train
from .pmp import SolverOptions, TpbvpProblem, TpbvpSolution, solve_with_fallback

log = logging.getLogger(__name__)

STRATEGIES = ("ivp", "vanilla", "as_large_u", "as_large_v", "as_bad_v")
SOLVE_COLUMNS = ("id", "t0", "converged", "newton_iters", "bc_residual", "stationarity", "cost")


class OpenLoopSolver:
    """Callable ``(t0, x0, guess) -> TpbvpSolution`` around the PMP solver."""

    def __init__(self, tpbvp: TpbvpProblem, opts: SolverOptions = SolverOptions()):
        self.tpbvp, self.opts = tpbvp, opts

    def __call__(self, t0, x0, guess=None) -> TpbvpSolution:
        if not self.opts.warm_start_from_previous:
            guess = None
        return solve_with_fallback(self.tpbvp, x0, t0, guess, self.opts)


class NnTrainer:
    """Trains the network from scratch (or fine-tunes) on each dataset.

    The normalization is computed on the first dataset seen and then frozen.
    """

    def __init__(self, spec, config):
        self.spec, self.config = spec, config
        self.norm = config.normalization

    def __call__(self, dataset, previous=None):
        if self.norm is None:
            Z, U = _batch_arrays(dataset)
            self.norm = Normalization.fit(Z, U, self.config.standardize_outputs)
        cfg = replace(self.config, normalization=self.norm)
        init = previous.params if (cfg.finetune and previous is not None) else None
        return train(dataset, self.spec, cfg, init=init)


@dataclass
class SamplerSetup:
    problem: ControlProblem
    solver: Callable                    # (t0, x0, guess) -> TpbvpSolution
    trainer: Callable                   # (dataset, previous_controller) -> controller
    initial: Callable                   # (rng, n) -> (n, state_dim)
    delta: float
    rollout_dt: float
    pool: Optional[object] = None       # concurrent.futures executor, or None


@dataclass(frozen=True)
class BaselineConfig:
    strategy: str
    initial_batch: int = 20
    increments: tuple = (16, 12, 12)
    candidates_per_pick: int = 2

    def __post_init__(self):
        object.__setattr__(self, "increments", tuple(int(k) for k in self.increments))
        if self.strategy not in ("vanilla", "as_large_u", "as_large_v", "as_bad_v"):
            raise DomainError(f"unknown baseline strategy {self.strategy!r}")
        if self.initial_batch < 1 or any(k < 1 for k in self.increments) \
                or self.candidates_per_pick < 1:
            raise DomainError("batch sizes and candidates_per_pick must be positive")

    @property
    def kept_paths(self) -> int:
        return self.initial_batch + sum(self.increments)

    def expected_solves(self) -> int:
        if self.strategy == "as_bad_v":
            return self.initial_batch + sum(self.increments) * self.candidates_per_pick
        return self.kept_paths


@dataclass
class IterationRecord:
    index: int
    t_start: float
    reached: np.ndarray                 # (N, n); NaN rows for rollouts that diverged
    dataset: Dataset
    controller: object
    solutions: list                     # TpbvpSolution or None per initial point
    n_converged: int


@dataclass
class SamplingRun:
    strategy: str
    X0: np.ndarray
    delta: float
    grid: Optional[TemporalGrid] = None
    iterations: list = field(default_factory=list)
    solve_log: list = field(default_factory=list)

    @property
    def N(self) -> int:
        return len(self.X0)

    @property
    def budget(self) -> int:
        """Number of open-loop solves performed (converged or not)."""
        return len(self.solve_log)

    @property
    def controller(self):
        return self.iterations[-1].controller

    @property
    def dataset(self) -> Dataset:
        return self.iterations[-1].dataset

    def solves_csv(self) -> str:
        lines = [",".join(SOLVE_COLUMNS)]
        for r in self.solve_log:
            lines.append(",".join(_fmt(r[c]) for c in SOLVE_COLUMNS))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _map(pool, fn, items):
    if pool is None:
        return [fn(*a) for a in items]
    return list(pool.map(lambda a: fn(*a), items))


def _solve_batch(setup: SamplerSetup, run: SamplingRun, t0: float, X, guesses=None):
    """Solve from every row of X (NaN rows skipped); log each solve in order."""
    jobs = [j for j in range(len(X)) if np.all(np.isfinite(X[j]))]
    if guesses is None:
        guesses = [None] * len(X)
    sols = _map(setup.pool, setup.solver, [(t0, X[j], guesses[j]) for j in jobs])
    out = [None] * len(X)
    for j, sol in zip(jobs, sols):
        run.solve_log.append({
            "id": len(run.solve_log), "t0": t0, "converged": bool(sol.converged),
            "newton_iters": int(sol.newton_iters),
            "bc_residual": sol.residuals["terminal_costate_gap"],
            "stationarity": sol.residuals["max_stationarity"], "cost": sol.cost,
        })
        if sol.converged:
            out[j] = sol
        else:
            log.info("open-loop solve from t0=%g (point %d) did not converge; dropped", t0, j)
    return out


def _dataset(setup: SamplerSetup, sols, ids) -> Dataset:
    keep = [(s.trajectory, i) for s, i in zip(sols, ids) if s is not None]
    return Dataset.from_trajectories([k[0] for k in keep], [k[1] for k in keep], setup.delta,
                                     setup.problem.state_dim, setup.problem.control_dim)


def roll_to(setup: SamplerSetup, controller, X0, t1: float):
    """States reached at ``t1`` from ``(0, X0)`` under ``controller`` (NaN if diverged)."""
    if t1 <= 0:
        return np.array(X0, dtype=float)
    roll = integrate_batch(setup.problem, controller, X0, 0.0, t1, setup.rollout_dt)
    return roll.states[-1]


def ivp_enhanced(setup: SamplerSetup, grid: TemporalGrid, N: int, rng: np.random.Generator,
                 X0=None) -> SamplingRun:
    """Iterate: roll to knot t_i, solve open-loop from the reached states, splice, retrain.

    Raises:
        IterationStarved: no open-loop solve converged in some iteration.
    """
    if N < 1:
        raise DomainError("N must be >= 1")
    grid.check_horizon(setup.problem.horizon)
    X0 = setup.initial(rng, N) if X0 is None else np.asarray(X0, dtype=float)
    run = SamplingRun("ivp", X0, setup.delta, grid)
    ids = np.arange(len(X0))
    controller = ZeroController(setup.problem.control_dim)
    prev_sols = [None] * len(X0)
    data = None
    for i, t_i in enumerate(grid.knots[:-1]):
        t_i = float(t_i)
        X_i = roll_to(setup, controller, X0, t_i)
        n_div = int(np.sum(~np.all(np.isfinite(X_i), axis=1)))
        if n_div:
            log.info("iteration %d: %d rollouts diverged before t=%g", i, n_div, t_i)
        sols = _solve_batch(setup, run, t_i, X_i, prev_sols)
        n_ok = sum(s is not None for s in sols)
        if n_ok == 0:
            raise IterationStarved(f"no open-loop solve converged at iteration {i}", i)
        new = _dataset(setup, sols, ids)
        data = new if data is None else data.splice(new, t_i)
        controller = setup.trainer(data, None if i == 0 else controller)
        run.iterations.append(IterationRecord(i, t_i, X_i, data, controller, sols, n_ok))
        prev_sols = [s if s is not None else p for s, p in zip(sols, prev_sols)]
    return run


def vanilla(setup: SamplerSetup, N_total: int, rng: np.random.Generator,
            seed_run: Optional[SamplingRun] = None) -> SamplingRun:
    """``N_total`` open-loop solves from t = 0 and a single training pass.

    With ``seed_run`` the first iteration of that run (its initial points and
    their t = 0 solutions) is reused, and only the remainder is drawn.
    """
    if N_total < 1:
        raise DomainError("N_total must be >= 1")
    if seed_run is not None:
        first = seed_run.iterations[0]
        n0 = min(len(seed_run.X0), N_total)
        extra = setup.initial(rng, N_total - n0) if N_total > n0 else np.zeros((0, seed_run.X0.shape[1]))
        X0 = np.concatenate([seed_run.X0[:n0], extra])
        run = SamplingRun("vanilla", X0, setup.delta)
        run.solve_log.extend(dict(r) for r in seed_run.solve_log[:n0])
        sols = list(first.solutions[:n0]) + _solve_batch(setup, run, 0.0, extra)
    else:
        X0 = setup.initial(rng, N_total)
        run = SamplingRun("vanilla", X0, setup.delta)
        sols = _solve_batch(setup, run, 0.0, X0)
    n_ok = sum(s is not None for s in sols)
    if n_ok == 0:
        raise IterationStarved("no open-loop solve converged", 0)
    data = _dataset(setup, sols, np.arange(len(X0)))
    controller = setup.trainer(data, None)
    run.iterations.append(IterationRecord(0, 0.0, X0, data, controller, sols, n_ok))
    return run


def _scores(setup: SamplerSetup, strategy: str, controller, C, run: SamplingRun):
    """Badness score per candidate; returns (scores, solutions or None)."""
    if strategy == "as_large_u":
        return np.linalg.norm(np.asarray(controller(0.0, C)), axis=-1), None
    roll = integrate_batch(setup.problem, controller, C, 0.0, setup.problem.horizon,
                           setup.rollout_dt)
    v = batch_cost(setup.problem, roll)
    if strategy == "as_large_v":
        return v, None
    sols = _solve_batch(setup, run, 0.0, C)
    opt = np.array([s.cost if s is not None else np.nan for s in sols])
    score = np.where(np.isfinite(opt), v - opt, -np.inf)
    return score, sols


def adaptive_baseline(setup: SamplerSetup, config: BaselineConfig, rng: np.random.Generator,
                      seed_run: Optional[SamplingRun] = None) -> SamplingRun:
    """Initial batch, then increments of points picked by the strategy's score.

    Every pick draws ``candidates_per_pick`` states from the box, scores them
    with the controller trained at the end of the previous block and keeps
    the argmax. Data accumulate and the controller is retrained after each
    block.
    """
    strategy = config.strategy
    if strategy == "vanilla":
        return vanilla(setup, config.kept_paths, rng, seed_run)
    if seed_run is not None:
        first = seed_run.iterations[0]
        X0 = seed_run.X0[:config.initial_batch]
        run = SamplingRun(strategy, X0, setup.delta)
        run.solve_log.extend(dict(r) for r in seed_run.solve_log[:len(X0)])
        data, controller = first.dataset, first.controller
        if len(X0) != len(seed_run.X0):
            data = first.dataset.subset(first.dataset.traj_id < len(X0))
            controller = setup.trainer(data, None)
        run.iterations.append(IterationRecord(0, 0.0, X0, data, controller,
                                              list(first.solutions[:len(X0)]),
                                              sum(s is not None for s in first.solutions[:len(X0)])))
    else:
        X0 = setup.initial(rng, config.initial_batch)
        run = SamplingRun(strategy, X0, setup.delta)
        sols = _solve_batch(setup, run, 0.0, X0)
        n_ok = sum(s is not None for s in sols)
        if n_ok == 0:
            raise IterationStarved("no open-loop solve converged in the initial batch", 0)
        data = _dataset(setup, sols, np.arange(len(X0)))
        controller = setup.trainer(data, None)
        run.iterations.append(IterationRecord(0, 0.0, X0, data, controller, sols, n_ok))
    next_id = len(X0)
    picked_all = [X0]
    for b, inc in enumerate(config.increments, start=1):
        picked, kept = [], []
        for _ in range(inc):
            C = setup.initial(rng, config.candidates_per_pick)
            score, csols = _scores(setup, strategy, controller, C, run)
            k = int(np.argmax(score))
            if csols is None:
                sol = _solve_batch(setup, run, 0.0, C[k:k + 1])[0]
            else:
                sol = csols[k]
            picked.append(C[k])
            kept.append(sol)
        ids = np.arange(next_id, next_id + inc)
        next_id += inc
        new = _dataset(setup, kept, ids)
        data = Dataset.concat([data, new])
        controller = setup.trainer(data, controller)
        picked_all.append(np.array(picked))
        run.iterations.append(IterationRecord(b, 0.0, np.array(picked), data, controller, kept,
                                              sum(s is not None for s in kept)))
    run.X0 = np.concatenate(picked_all)
    return run


def run_strategy(setup: SamplerSetup, strategy: str, rng: np.random.Generator, *,
                 grid: Optional[TemporalGrid] = None, N: int = 20,
                 baseline: Optional[BaselineConfig] = None,
                 seed_run: Optional[SamplingRun] = None) -> SamplingRun:
    if strategy == "ivp":
        if grid is None:
            raise DomainError("ivp strategy needs a temporal grid")
        return ivp_enhanced(setup, grid, N, rng)
    if baseline is None:
        baseline = BaselineConfig(strategy)
    if baseline.strategy != strategy:
        baseline = BaselineConfig(strategy, baseline.initial_batch, baseline.increments,
                                  baseline.candidates_per_pick)
    return adaptive_baseline(setup, baseline, rng, seed_run)
