import numpy as np
import pytest

from ivp_sampling import config, experiments as ex
from ivp_sampling.cli import main
from ivp_sampling.errors import ConfigError


def test_defaults_are_valid():
    cfg = config.load()
    assert cfg["sampler"]["grid"] == [0.0, 10.0, 14.0, 16.0]
    assert cfg["sampler"]["delta"] == 0.2
    assert cfg["nn"]["hidden"] == [128, 128]


def test_file_and_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('seed = 3\n[sampler]\nN = 7\n[nn]\nepochs = 5\n')
    cfg = config.load(p, {"sampler.N": 9, "seed": None})
    assert cfg["seed"] == 3 and cfg["sampler"]["N"] == 9 and cfg["nn"]["epochs"] == 5
    assert cfg["sampler"]["delta"] == 0.2


@pytest.mark.parametrize("text", ['nope = 1\n', '[sampler]\nnope = 1\n', 'sampler = 3\n'])
def test_unknown_keys_rejected(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        config.load(p)


@pytest.mark.parametrize("override", [
    {"sampler.grid": [0.0, 10.0]},
    {"sampler.grid": [1.0, 16.0]},
    {"sampler.delta": 0.07},
    {"strategy": "random"},
    {"seed": -1},
    {"sampler.N": 0},
    {"solver.cold_start": "guess"},
    {"bogus.key": 1},
])
def test_invalid_values_rejected(override):
    with pytest.raises(ConfigError):
        config.load(None, override)


def test_missing_and_broken_files(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "absent.toml")
    p = tmp_path / "bad.toml"
    p.write_text("seed = = 1")
    with pytest.raises(ConfigError):
        config.load(p)


def test_echo_is_sorted_and_parseable():
    lines = config.echo(config.load()).splitlines()
    keys = [ln.split(" = ")[0] for ln in lines]
    assert keys == sorted(keys)
    assert "sampler.grid = [0.0, 10.0, 14.0, 16.0]" in lines


def test_parse_grid():
    assert config.parse_grid("0,4,8,16") == [0.0, 4.0, 8.0, 16.0]
    with pytest.raises(ConfigError):
        config.parse_grid("0,a")


def test_streams_are_independent_and_reproducible():
    a = ex.stream(5, 0).random(3)
    np.testing.assert_array_equal(a, ex.stream(5, 0).random(3))
    assert not np.array_equal(a, ex.stream(5, 1).random(3))


def test_cli_config_error_exit_code(tmp_path, capsys):
    assert main(["lqr", "--config", str(tmp_path / "absent.toml")]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_lqr_small(tmp_path, capsys):
    p = tmp_path / "lqr.toml"
    p.write_text("[lqr]\nT = 4\nN = 20\nperf_repeats = 50\neval_points = 100\n"
                 "moment_times = [1.0, 2.0]\nmoment_repeats = 20\nsweep_T = [4, 8]\n"
                 "sweep_N = 20\nsweep_repeats = 2\nsweep_eval_points = 100\npaths = 2\n")
    out = tmp_path / "lqr"
    assert main(["lqr", "--config", str(p), "--out", str(out), "--seed", "1"]) == 0
    for name in ("theorem1.csv", "model2_gap_vs_T.csv", "paths.csv", "config.echo",
                 "manifest.txt"):
        assert (out / name).exists(), name
    assert "[checks]" in (out / "manifest.txt").read_text()
    assert "seed = 1" in (out / "config.echo").read_text()
    printed = capsys.readouterr().out
    assert "vanilla performance gap" in printed


TINY_QUAD = """
seed = 3
threads = 1
[quadrotor]
position_scale = 0.02
angle_scale = 0.05
[sampler]
grid = [0.0, 8.0, 16.0]
N = 2
n_test = 1
initial_batch = 2
increments = [1]
candidates_per_pick = 2
[solver]
march_steps = 2
[nn]
hidden = [8]
epochs = 2
[metrics]
disturbance_sigmas = [0.0, 0.1]
disturbance_trials = 1
"""


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("quad")
    p = root / "q.toml"
    p.write_text(TINY_QUAD)
    codes = {}
    for strategy in ("ivp", "as_bad_v"):
        codes[strategy] = main(["quadrotor", "--config", str(p), "--strategy", strategy,
                                "--out", str(root / strategy), "--check"])
    return root, codes


def test_cli_quadrotor_artifacts(tiny_runs):
    root, codes = tiny_runs
    assert codes == {"ivp": 0, "as_bad_v": 0}
    run = root / "ivp"
    for name in ("solves.csv", "ratios.csv", "cdf.csv", "summary.csv", "mismatch.csv",
                 "mismatch_iter0.csv", "datasets/iter0.csv", "datasets/iter1.csv",
                 "controllers/iter1.json", "manifest.txt", "config.echo"):
        assert (run / name).exists(), name
    solves = (run / "solves.csv").read_text().splitlines()
    assert solves[0] == "id,t0,converged,newton_iters,bc_residual,stationarity,cost"
    assert len(solves) == 1 + 2 * 2
    summary = (run / "summary.csv").read_text()
    assert summary.splitlines()[0] == "label,Mean,Std,Max,90%,75%,Median,Diverged"
    assert "disturbance_sigma=0.1" in summary
    manifest = (run / "manifest.txt").read_text()
    assert "[budget]" in manifest
    # as_bad_v solves every candidate: 2 + 1 * 2
    assert len((root / "as_bad_v" / "solves.csv").read_text().splitlines()) == 1 + 4


def test_cli_report_merges_runs(tiny_runs, capsys):
    root, _ = tiny_runs
    out = root / "report"
    assert main(["report", str(root / "ivp"), str(root / "as_bad_v"), "--out", str(out)]) == 0
    text = (out / "summary.csv").read_text()
    # one row per run: the final controller, labelled strategy:directory
    assert [ln.split(",")[0] for ln in text.splitlines()[1:]] == ["as_bad_v:as_bad_v", "ivp:ivp"]
    single, _ = ex.merge_reports([root / "ivp"])
    assert single == (root / "ivp" / "summary.csv").read_text()
    assert main(["report", str(root / "nothing")]) == 2


def test_controller_json_loads(tiny_runs):
    from ivp_sampling.nn import MlpController
    root, _ = tiny_runs
    ctrl = MlpController.load(root / "ivp" / "controllers" / "iter1.json")
    assert ctrl(0.0, np.zeros((1, 12))).shape == (1, 4)
