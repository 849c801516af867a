import json
import math

import numpy as np
import pytest

from superad import cli, harness
from superad.dynamics import ConfigurationError
from superad.harness import (
    ComparisonRecord,
    GateError,
    RunConfig,
    auto_grid,
    run_point,
    run_sweep,
    run_verify,
    sweep_config,
    sweep_configs,
)

TOML = """
experiment = "sweep"

[model]
c = -1.0471975511965976
alpha = 1.5707963267948966
delta = 0.5

[packet]
p0 = 2.0
sigma2 = 2.0

[run]
epsilon = 0.2
t0 = "auto"
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(TOML)
    return path


def test_config_round_trip(config_file):
    cfg = RunConfig.load(config_file)
    assert cfg.p0 == 2.0 and cfg.epsilon == 0.2 and cfg.t0 is None
    assert cfg.model.q_c == pytest.approx(1.0)
    assert cfg.digest() == RunConfig.load(config_file).digest()
    assert cfg.digest() != cfg.replace(p0=2.5).digest()


def test_config_requires_blocks():
    with pytest.raises(ConfigurationError):
        RunConfig.from_mapping({"model": {"c": 1, "alpha": 1, "delta": 1}, "run": {"epsilon": 0.1}})


@pytest.mark.parametrize("eps", [0.0, 1.0, -0.1, 2.0])
def test_epsilon_must_lie_in_unit_interval(eps):
    with pytest.raises(ConfigurationError):
        sweep_config(epsilon=eps)


def test_unknown_experiment_is_rejected():
    with pytest.raises(ConfigurationError):
        sweep_config(experiment="plot")


def test_sweep_block_expands_in_order():
    data = {
        "model": {"c": -1.0, "alpha": 1.5, "delta": 0.5},
        "packet": {"p0": 2.0},
        "run": {"epsilon": 0.1},
        "sweep": {"epsilon": [0.1, 0.05], "p0": [2.0, 5.0]},
    }
    pts = [(c.p0, c.epsilon) for c in sweep_configs(RunConfig.from_mapping(data))]
    assert pts == [(2.0, 0.1), (2.0, 0.05), (5.0, 0.1), (5.0, 0.05)]


def test_auto_grid_resolves_the_packet():
    cfg = sweep_config()
    g = auto_grid(cfg.packet, cfg.model, -3.0, 3.0)
    assert g.n_points & (g.n_points - 1) == 0
    assert g.k_max >= 1.5 * math.sqrt(25 + 2)
    assert g.x_max >= 5 * 3.0


@pytest.fixture(scope="module")
def cheap_record():
    return run_point(sweep_config(p0=2.0, epsilon=0.2))


def test_cheap_point_passes_the_gate(cheap_record):
    r = cheap_record
    assert r.solver_self_error <= r.rel_l2_error / 10
    assert r.rel_l2_error <= 0.05
    assert r.meta["unitarity_drift"] <= 1e-10
    assert len(r.row()) == len(ComparisonRecord.HEADER)


def test_rejected_points_are_reported(monkeypatch):
    def fail(config):
        raise GateError("no", {"history": []})

    monkeypatch.setattr(harness, "run_point", fail)
    rejected = []
    assert run_sweep([sweep_config()], rejected=rejected) == []
    assert rejected[0][1] == {"history": []}


def test_gate_stops_when_refinement_stalls(monkeypatch):
    calls = []

    def fake_spectrum(grid, spec, model, t0, t_end, dt, fixed, precision):
        calls.append(dt)
        return np.zeros(grid.n_points, complex), t_end, 0, 0.0

    monkeypatch.setattr(harness, "_numeric_spectrum", fake_spectrum)
    monkeypatch.setattr(harness, "relative_l2_error", lambda a, b, dk: 1e-3)
    with pytest.raises(GateError, match="roundoff") as info:
        run_point(sweep_config(p0=2.0, epsilon=0.2))
    assert len(info.value.diagnostics["history"]) == 2
    assert len(calls) == 4


def test_auto_precision_follows_the_predicted_norm():
    assert harness._precision_for(sweep_config(p0=5.0, epsilon=0.1)) == "double"
    assert harness._precision_for(sweep_config(p0=2.0, epsilon=0.02)) == "extended"
    assert harness._precision_for(sweep_config(p0=2.0, epsilon=0.02, precision="double")) == "double"
    with pytest.raises(ConfigurationError):
        sweep_config(precision="single")


def test_verify_report_structure():
    rep = run_verify(["model", "transition"])
    assert rep["passed"]
    assert [s["name"] for s in rep["suites"]] == ["model", "transition"]
    assert all(s["wall_time_s"] >= 0 for s in rep["suites"])


def test_mutation_fails_the_zero_pattern_suite():
    rep = run_verify(["zero_structure"], mutation=True)
    assert not rep["passed"]
    failed = [c["check"] for c in rep["suites"][0]["checks"] if not c["passed"]]
    assert failed == ["mod-4 zeros"]


def test_cli_optimal_n(capsys):
    assert cli.main(["optimal-n"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["n_star"] == pytest.approx(3.04, abs=0.01)


def test_cli_recursion_table(tmp_path):
    out = tmp_path / "table.csv"
    assert cli.main(["recursion-table", "--n-max", "3", "--samples", "5", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "n,m,q,re(x),im(x),re(y),im(y),re(z),im(z),re(w),im(w)"
    assert len(lines) == 1 + 5 * (2 + 3 + 4)


def test_cli_formula(tmp_path, config_file):
    out = tmp_path / "spectrum.csv"
    with pytest.warns(UserWarning):
        assert cli.main(["formula", "--config", str(config_file), "--out", str(out)]) == 0
    data = np.loadtxt(out, delimiter=",", skiprows=1)
    dk = data[1, 0] - data[0, 0]
    assert math.sqrt(dk * np.sum(data[:, 3] ** 2)) == pytest.approx(0.11575, rel=1e-3)


def test_cli_verify_mutation_exit_code(tmp_path):
    assert cli.main(["verify", "--mutation", "--out", str(tmp_path / "r.json")]) == 1


def test_cli_sweep_is_deterministic(tmp_path, config_file):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert cli.main(["sweep", "--config", str(config_file), "--out", str(d)]) == 0
        outs.append(d)
    for f in ("sweep.csv", "spectrum_p2_eps0.2.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    man = json.loads((outs[0] / "manifest.json").read_text())
    assert man["config_hash"] == RunConfig.load(config_file).digest()
    point = man["points"][0]
    assert {"grid", "dt", "solver_self_error"} <= set(point)
