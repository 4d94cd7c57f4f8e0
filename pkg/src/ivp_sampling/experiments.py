"""Experiment suites behind the command line: LQR checks and quadrotor runs.

Every artifact is a pure function of (config, seed). Independent random
streams are derived as ``default_rng([seed, stream])``.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import lqr, metrics
from .core import TemporalGrid, integrate_batch
from .errors import ConfigError
from .nn import MlpSpec, TrainConfig
from .pmp import SolverOptions, solve_with_fallback
from .quadrotor import InitialBox, LandingCost, QuadParams, Quadrotor, sample_initial
from .sampler import (BaselineConfig, NnTrainer, OpenLoopSolver, SamplerSetup, SamplingRun,
                      run_strategy, vanilla)

log = logging.getLogger(__name__)

STREAM_TRAIN, STREAM_TEST, STREAM_DISTURB = 0, 1, 2


def stream(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(k)])


def make_pool(threads: int):
    """Thread pool for open-loop solves; None means run inline."""
    n = (os.cpu_count() or 1) if threads == 0 else int(threads)
    return ThreadPoolExecutor(max_workers=n) if n > 1 else None


# --- LQR suite -------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class LqrResults:
    theorem_rows: list = field(default_factory=list)       # (quantity, predicted, empirical, se)
    sweep_rows: list = field(default_factory=list)         # (T, method, gap, se)
    paths: Optional[tuple] = None
    checks: list = field(default_factory=list)


def lqr_suite(cfg: dict) -> LqrResults:
    q = cfg["lqr"]
    seed = int(cfg["seed"])
    spec = lqr.LqrSpec(int(q["T"]), float(q["epsilon"]), int(q["N"]), float(q["dt"]))
    pred = lqr.theorem1_predictions(spec)
    res = LqrResults()
    reps, n_eval = int(q["perf_repeats"]), int(q["eval_points"])

    van = lqr.monte_carlo_perf_gap(lqr.model_factory("vanilla", 1), spec, reps, n_eval, seed)
    ivp = lqr.monte_carlo_perf_gap(lqr.model_factory("ivp", 1), spec, reps, n_eval,
                                   seed + 1_000_000)
    res.theorem_rows += [
        ("vanilla_perf_gap", pred.vanilla_perf_gap, van["mean"], van["std_error"]),
        ("ivp_perf_gap", pred.ivp_perf_gap, ivp["mean"], ivp["std_error"]),
        ("ivp_perf_gap_bound", pred.ivp_perf_gap_bound, ivp["mean"], ivp["std_error"]),
    ]
    dv = abs(van["mean"] - pred.vanilla_perf_gap)
    res.checks.append(Check("vanilla performance gap", dv <= 3 * van["std_error"],
                            f"|{van['mean']:.4g} - {pred.vanilla_perf_gap:.4g}| = {dv:.3g} "
                            f"vs 3 SE = {3 * van['std_error']:.3g}"))
    lim = pred.ivp_perf_gap_bound + 3 * ivp["std_error"]
    res.checks.append(Check("IVP-enhanced performance bound", ivp["mean"] <= lim,
                            f"{ivp['mean']:.4g} <= {lim:.4g}"))

    times = [float(t) for t in q["moment_times"]]
    mreps = int(q["moment_repeats"])
    mv = lqr.moment_gap_mc(spec, "vanilla", 1, times, mreps, n_eval, seed + 2_000_000)
    mi = lqr.moment_gap_mc(spec, "ivp", 1, times, mreps, n_eval, seed + 3_000_000)
    pv = pred.vanilla_moment_gap(np.array(times))
    for k, t in enumerate(times):
        ev, sv = abs(mv["mean"][k]), mv["std_error"][k]
        ei, si = abs(mi["mean"][k]), mi["std_error"][k]
        res.theorem_rows += [(f"vanilla_moment_gap@t={t:g}", float(pv[k]), float(ev), float(sv)),
                             (f"ivp_moment_gap_bound@t={t:g}", pred.ivp_moment_gap_bound,
                              float(ei), float(si))]
        res.checks.append(Check(f"vanilla moment gap t={t:g}", abs(ev - pv[k]) <= 3 * sv,
                                f"|{ev:.4g} - {pv[k]:.4g}| vs 3 SE = {3 * sv:.3g}"))
        res.checks.append(Check(f"IVP-enhanced moment gap t={t:g}",
                                ei <= pred.ivp_moment_gap_bound + 3 * si,
                                f"{ei:.4g} <= {pred.ivp_moment_gap_bound + 3 * si:.4g}"))

    gaps = {}
    for T in q["sweep_T"]:
        sspec = lqr.LqrSpec(int(T), float(q["epsilon"]), int(q["sweep_N"]), float(q["dt"]))
        for m, method in enumerate(("vanilla", "ivp")):
            r = lqr.monte_carlo_perf_gap(lqr.model_factory(method, 2), sspec,
                                         int(q["sweep_repeats"]), int(q["sweep_eval_points"]),
                                         seed + 10_000_000 + 1000 * int(T) + 100 * m)
            gaps[(int(T), method)] = r["mean"]
            res.sweep_rows.append((int(T), method, r["mean"], r["std_error"]))
    Ts = [int(T) for T in q["sweep_T"]]
    if len(Ts) >= 2:
        lo, hi = min(Ts), max(Ts)
        rv = gaps[(hi, "vanilla")] / gaps[(lo, "vanilla")]
        ri = gaps[(hi, "ivp")] / gaps[(lo, "ivp")]
        res.checks.append(Check(f"Model-2 vanilla gap grows T={lo}->{hi}", rv > 4.0,
                                f"ratio {rv:.3g} > 4"))
        res.checks.append(Check(f"Model-2 IVP-enhanced gap flat T={lo}->{hi}", ri < 3.0,
                                f"ratio {ri:.3g} < 3"))

    res.paths = lqr_paths(spec, int(q["paths"]), seed + 4_000_000)
    return res


def lqr_paths(spec: lqr.LqrSpec, n_paths: int, seed: int):
    """Optimal, vanilla and IVP-enhanced (Model 1) closed-loop paths from common starts."""
    g = np.random.default_rng(seed)
    van = lqr.run_vanilla(spec, 1, g).controller
    ivp = lqr.run_ivp_enhanced(spec, 1, g).controller
    x0 = g.standard_normal(n_paths)
    h = spec.rollout_step
    t, xo = lqr.affine_rollout(lqr.OptimalController(spec.T), x0, 0.0, float(spec.T), h)
    _, xv = lqr.affine_rollout(van, x0, 0.0, float(spec.T), h)
    _, xi = lqr.affine_rollout(ivp, x0, 0.0, float(spec.T), h)
    return t, xo, xv, xi


def write_lqr(res: LqrResults, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    f = metrics._num
    lines = ["quantity,predicted,empirical,std_error"]
    lines += [f"{a},{f(b)},{f(c)},{f(d)}" for a, b, c, d in res.theorem_rows]
    (out / "theorem1.csv").write_text("\n".join(lines) + "\n")
    lines = ["T,method,gap,std_error"]
    lines += [f"{T},{m},{f(g)},{f(s)}" for T, m, g, s in res.sweep_rows]
    (out / "model2_gap_vs_T.csv").write_text("\n".join(lines) + "\n")
    t, xo, xv, xi = res.paths
    lines = ["t,path,optimal,vanilla,ivp"]
    for j in range(xo.shape[1]):
        lines += [f"{f(t[k])},{j},{f(xo[k, j])},{f(xv[k, j])},{f(xi[k, j])}"
                  for k in range(len(t))]
    (out / "paths.csv").write_text("\n".join(lines) + "\n")


# --- quadrotor --------------------------------------------------------------------

def quadrotor_from_config(cfg: dict):
    q = cfg["quadrotor"]
    params = QuadParams(float(q["mass"]), tuple(q["inertia"]), float(q["gravity"]),
                        float(q["arm"]), float(q["drag"]))
    weights = LandingCost(tuple(q["Q_u"]), float(q["Q_pf"]), float(q["Q_vf"]),
                          float(q["Q_etaf"]), float(q["Q_wf"]))
    quad = Quadrotor(params, weights, float(q["horizon"]))
    box = (InitialBox.paper() if q["box"] == "paper"
           else InitialBox.desk(float(q["position_scale"]), float(q["angle_scale"])))
    return quad, box


def solver_options(cfg: dict) -> SolverOptions:
    s = cfg["solver"]
    return SolverOptions(dt=float(s["dt"]), segments=int(s["segments"]),
                         max_iter=int(s["max_iter"]), tol_bc=float(s["tol_bc"]),
                         tol_stationarity=float(s["tol_stationarity"]),
                         tol_defect=float(s["tol_defect"]), fd_step=float(s["fd_step"]),
                         march_steps=int(s["march_steps"]),
                         warm_start_from_previous=bool(s["warm_start_from_previous"]),
                         cold_start=str(s["cold_start"]))


def nn_from_config(cfg: dict, state_dim: int, control_dim: int):
    n = cfg["nn"]
    spec = MlpSpec(1 + state_dim, tuple(n["hidden"]), control_dim, n["activation"])
    tc = TrainConfig(learning_rate=float(n["learning_rate"]), adam_beta1=float(n["adam_beta1"]),
                     adam_beta2=float(n["adam_beta2"]), adam_eps=float(n["adam_eps"]),
                     batch_size=int(n["batch_size"]), epochs=int(n["epochs"]),
                     seed=int(n["seed"]), finetune=bool(n["finetune"]),
                     holdout=float(n["holdout"]),
                     standardize_outputs=bool(n["standardize_outputs"]))
    return spec, tc


def quadrotor_setup(cfg: dict, pool=None) -> SamplerSetup:
    quad, box = quadrotor_from_config(cfg)
    s = cfg["sampler"]
    spec, tc = nn_from_config(cfg, 12, 4)
    delta = float(s["delta"])
    return SamplerSetup(quad.problem(), OpenLoopSolver(quad.tpbvp(), solver_options(cfg)),
                        NnTrainer(spec, tc), lambda rng, n: sample_initial(box, rng, n),
                        delta, delta / int(s["rollout_substeps"]), pool)


def test_references(cfg: dict, pool=None):
    """Open-loop optimal solutions from the test states; unconverged ones are dropped."""
    quad, box = quadrotor_from_config(cfg)
    X = sample_initial(box, stream(cfg["seed"], STREAM_TEST), int(cfg["sampler"]["n_test"]))
    prob, opts = quad.tpbvp(), solver_options(cfg)
    fn = lambda x: solve_with_fallback(prob, x, 0.0, None, opts)
    sols = list(pool.map(fn, X)) if pool is not None else [fn(x) for x in X]
    kept = [s for s in sols if s.converged]
    if len(kept) < len(sols):
        log.warning("%d of %d test references did not converge; dropped",
                    len(sols) - len(kept), len(sols))
    return kept


@dataclass
class QuadrotorResults:
    run: SamplingRun
    refs: list
    tables: list                      # RatioTable per iteration
    mismatch: list                    # (times, pointwise, mmd) per iteration
    disturbance: dict                 # label -> RatioTable
    expected_budget: int


def expected_budget(cfg: dict, strategy: str) -> int:
    s = cfg["sampler"]
    K = len(s["grid"]) - 1
    if strategy == "ivp":
        return int(s["N"]) * K
    if strategy == "vanilla":
        return int(s["N"]) * K
    b = BaselineConfig(strategy, int(s["initial_batch"]), tuple(s["increments"]),
                       int(s["candidates_per_pick"]))
    return b.expected_solves()


def quadrotor_experiment(cfg: dict, strategy: Optional[str] = None, refs=None,
                         seed_run: Optional[SamplingRun] = None, pool=None) -> QuadrotorResults:
    strategy = strategy or cfg["strategy"]
    s, m = cfg["sampler"], cfg["metrics"]
    setup = quadrotor_setup(cfg, pool)
    if refs is None:
        refs = test_references(cfg, pool)
    grid = TemporalGrid(tuple(float(k) for k in s["grid"]))
    rng = stream(cfg["seed"], STREAM_TRAIN)
    if strategy == "vanilla":
        run = vanilla(setup, int(s["N"]) * grid.K, rng, seed_run)
    else:
        baseline = None
        if strategy != "ivp":
            baseline = BaselineConfig(strategy, int(s["initial_batch"]), tuple(s["increments"]),
                                      int(s["candidates_per_pick"]))
        run = run_strategy(setup, strategy, rng, grid=grid, N=int(s["N"]), baseline=baseline,
                           seed_run=seed_run)
    prob = setup.problem
    tables = [metrics.cost_ratio_table(prob, it.controller, refs, setup.rollout_dt)
              for it in run.iterations]
    mism = []
    if m["mismatch"]:
        eval_times = np.round(np.arange(0, round(prob.horizon / setup.delta) + 1) * setup.delta, 9)
        for it in run.iterations:
            roll = integrate_batch(prob, it.controller, run.X0, 0.0, prob.horizon, setup.rollout_dt)
            mism.append(metrics.mismatch_curve(it.dataset, roll.states, roll.times, eval_times))
    dist = {}
    g = stream(cfg["seed"], STREAM_DISTURB)
    for sigma in m["disturbance_sigmas"]:
        dist[f"disturbance_sigma={sigma:g}"] = metrics.disturbance_eval(
            prob, run.controller, refs, float(sigma), int(m["disturbance_trials"]),
            setup.rollout_dt, g)
        if m["open_loop_disturbance"]:
            dist[f"open_loop_sigma={sigma:g}"] = metrics.open_loop_disturbance_eval(
                prob, refs, float(sigma), setup.rollout_dt, g)
    return QuadrotorResults(run, refs, tables, mism, dist, expected_budget(cfg, strategy))


def _dataset_csv(ds) -> str:
    n, mdim = ds.x.shape[1], ds.u.shape[1]
    head = ["traj_id", "t"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(mdim)]
    f = metrics._num
    rows = [",".join(head)]
    for i, t, x, u in zip(ds.traj_id, ds.t, ds.x, ds.u):
        rows.append(",".join([str(int(i)), f(t)] + [f(v) for v in x] + [f(v) for v in u]))
    return "\n".join(rows) + "\n"


def write_quadrotor(res: QuadrotorResults, cfg: dict, out: Path, strategy: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / "datasets").mkdir(exist_ok=True)
    (out / "controllers").mkdir(exist_ok=True)
    run = res.run
    (out / "solves.csv").write_text(run.solves_csv())
    final = res.tables[-1]
    (out / "ratios.csv").write_text(final.ratios_csv())
    (out / "cdf.csv").write_text(final.cdf_csv())
    rows = {f"iter{i}": t.summary() for i, t in enumerate(res.tables)}
    rows["final"] = final.summary()
    rows.update({k: v.summary() for k, v in res.disturbance.items()})
    (out / "summary.csv").write_text(metrics.summary_csv(rows))
    if res.mismatch:
        for i, (t, pw, mm) in enumerate(res.mismatch):
            (out / f"mismatch_iter{i}.csv").write_text(metrics.mismatch_csv(t, pw, mm))
        (out / "mismatch.csv").write_text(metrics.mismatch_csv(*res.mismatch[-1]))
    lines = [
        "[run]",
        "benchmark = quadrotor",
        f"strategy = {strategy}",
        f"seed = {cfg['seed']}",
        f"grid = {','.join(format(float(k), 'g') for k in cfg['sampler']['grid'])}",
        f"test_references = {len(res.refs)}",
        "",
        "[budget]",
        f"open_loop_solves = {run.budget}",
        f"expected = {res.expected_budget}",
        f"converged = {sum(r['converged'] for r in run.solve_log)}",
        f"kept_trajectories = {len(np.unique(run.dataset.traj_id))}",
        "solver_log = solves.csv",
        "",
    ]
    for it, tab in zip(run.iterations, res.tables):
        ds_name = f"datasets/iter{it.index}.csv"
        ct_name = f"controllers/iter{it.index}.json"
        (out / ds_name).write_text(_dataset_csv(it.dataset))
        it.controller.save(out / ct_name)
        sm = tab.summary()
        lines += [f"[iteration.{it.index}]", f"t_start = {it.t_start:g}",
                  f"dataset = {ds_name}", f"dataset_rows = {len(it.dataset)}",
                  f"controller = {ct_name}", f"converged_solves = {it.n_converged}",
                  f"mean_ratio = {metrics._num(sm['mean'])}",
                  f"median_ratio = {metrics._num(sm['median'])}", ""]
    lines += ["[files]", "ratios = ratios.csv", "summary = summary.csv", "cdf = cdf.csv"]
    if res.mismatch:
        lines.append("mismatch = mismatch.csv")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


# --- report ------------------------------------------------------------------------

def read_manifest(path: Path) -> dict:
    out, section = {}, ""
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            continue
        k, _, v = line.partition("=")
        out[f"{section}.{k.strip()}"] = v.strip()
    return out


def merge_reports(run_dirs) -> tuple:
    """Returns (summary_csv_text, plain_text) comparing the final rows of several runs."""
    entries = []
    for d in run_dirs:
        d = Path(d)
        man, summ = d / "manifest.txt", d / "summary.csv"
        if not man.is_file() or not summ.is_file():
            raise ConfigError(f"{d}: no manifest.txt/summary.csv (not a run directory)")
        meta = read_manifest(man)
        entries.append((meta.get("run.strategy", "?"), d.name, summ.read_text(), meta))
    entries.sort(key=lambda e: (e[0], e[1]))
    if len(entries) == 1:
        text = entries[0][2]
    else:
        header = None
        rows = []
        for strategy, name, text_i, _ in entries:
            lines = text_i.strip().splitlines()
            header = lines[0]
            for line in lines[1:]:
                label, rest = line.split(",", 1)
                if label == "final":
                    rows.append(f"{strategy}:{name},{rest}")
        text = header + "\n" + "\n".join(rows) + "\n"
    lines = text.strip().splitlines()
    cells = [l.split(",") for l in lines]
    widths = [max(len(c[i]) if i == 0 else min(len(c[i]), 10) for c in cells)
              for i in range(len(cells[0]))]
    plain = []
    for c in cells:
        parts = [c[0].ljust(widths[0])]
        for i, v in enumerate(c[1:], start=1):
            try:
                v = f"{float(v):.4g}" if c is not cells[0] else v
            except ValueError:
                pass
            parts.append(v.rjust(max(widths[i], 10)))
        plain.append("  ".join(parts))
    return text, "\n".join(plain) + "\n"
