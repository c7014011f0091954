import csv
import io

import numpy as np
import pytest

from weakbsde import cli
from weakbsde.config import (CHOICES, POSITIVE, SCHEMA, ConfigError, build_spec, load_config, parse_config,
                             preset_names, serialize_config)
from weakbsde.gexpect import gexp_linear
from weakbsde.simulate import generate_paths

MINIMAL = "problem.loss = indicator\nproblem.driver = linear\nproblem.a_z = -0.3\n"


def read_csv(path):
    lines = path.read_text().splitlines()
    header = [ln for ln in lines if ln.startswith("#")]
    rows = list(csv.DictReader(io.StringIO("\n".join(ln for ln in lines if not ln.startswith("#")))))
    return header, rows


def test_minimal_config_gets_defaults():
    cfg = parse_config(MINIMAL)
    for key, (_, default, _) in SCHEMA.items():
        if key not in ("problem.loss", "problem.driver", "problem.a_z"):
            assert cfg[key] == default
    assert cfg["problem.a_z"] == (-0.3,)


def test_negative_paths_rejected():
    with pytest.raises(ConfigError, match="n_paths must be ≥ 1"):
        parse_config(MINIMAL + "simulation.n_paths = -5\n")


@pytest.mark.parametrize("text, needle", [
    (MINIMAL + "simulation.bogus = 1\n", "line 4: unknown key 'simulation.bogus'"),
    (MINIMAL + "simulation.seed = abc\n", "line 4: simulation.seed expects int"),
    (MINIMAL + "solver.method = magic\n", "line 4: solver.method must be one of"),
    (MINIMAL + "no equals sign\n", "line 4"),
    ("problem.loss = linear\n", "missing required key problem.driver"),
])
def test_parse_errors_name_line_and_key(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def _random_config(rng):
    vals = {}
    for key, (kind, default, _) in SCHEMA.items():
        if key in CHOICES:
            vals[key] = str(rng.choice(CHOICES[key]))
        elif kind == "int":
            vals[key] = int(rng.integers(POSITIVE.get(key, -1000), 10 ** 6))
        elif kind == "float":
            vals[key] = float(rng.normal() * 10.0 ** rng.integers(-8, 8))
        elif kind == "floats":
            vals[key] = tuple(float(x) for x in rng.uniform(-1, 1, size=int(rng.integers(0, 6))))
        elif kind == "bool":
            vals[key] = bool(rng.integers(2))
        else:
            vals[key] = "out_" + str(rng.integers(10 ** 9)) + ".csv"
    if not vals["problem.a_z"]:
        vals["problem.a_z"] = (0.0,)
    return vals


def test_round_trip_randomized():
    rng = np.random.default_rng(50)
    for _ in range(50):
        vals = _random_config(rng)
        cfg = parse_config(MINIMAL).with_overrides(**vals)
        again = parse_config(serialize_config(cfg))
        assert again == cfg


def test_presets_parse_and_build():
    assert set(preset_names()) >= {"bsqh", "tree", "power"}
    for name in preset_names():
        cfg = load_config(name)
        assert parse_config(serialize_config(cfg)) == cfg
        build_spec(cfg)


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/nothing.cfg")


def _small_bsqh(tmp_path, extra=""):
    p = tmp_path / "run.cfg"
    p.write_text(MINIMAL + "simulation.n_paths = 20000\nsimulation.n_steps = 16\nsimulation.seed = 5\n" + extra)
    return p


def test_curve_three_rows_with_endpoints(tmp_path):
    cfg = _small_bsqh(tmp_path, "task.m_grid = 0, 0.5, 1\nsolver.method = profile\n")
    out = tmp_path / "curve.csv"
    assert cli.main(["curve", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    header, rows = read_csv(out)
    assert header[0].startswith("# weakbsde")
    assert "# seed = 5" in header
    assert any("simulation.n_paths = 20000" in h for h in header)
    assert list(rows[0]) == ["m", "Y0", "stderr", "method", "convexity_defect", "monotonicity_defect"]
    assert len(rows) == 3
    spec = build_spec(parse_config(cfg.read_text()))
    ens = generate_paths(spec, 20000, 16, 5)
    for row, phi in ((rows[0], 0.0), (rows[2], 1.0)):
        ref = gexp_linear(ens, np.full(ens.n_paths, phi), spec.driver)
        assert abs(float(row["Y0"]) - ref.Y0) <= 3 * max(float(row["stderr"]), ref.stderr) + 1e-9


def test_gap_small(tmp_path):
    cfg = _small_bsqh(tmp_path, "task.m_grid = 0.5\n")
    out = tmp_path / "gap.csv"
    assert cli.main(["gap", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    _, rows = read_csv(out)
    assert float(rows[0]["gap_rel"]) <= 0.015
    assert float(rows[0]["res_driver"]) == 0.0


def test_numbers_use_declared_precision(tmp_path):
    cfg = _small_bsqh(tmp_path, "task.m_grid = 0.3\noutput.precision = 4\n")
    out = tmp_path / "dual.csv"
    assert cli.main(["dual", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    _, rows = read_csv(out)
    digits = rows[0]["dual_value"].lstrip("-0.").replace(".", "").split("e")[0]
    assert len(digits) <= 4


def test_tree_backend_curve(tmp_path):
    out = tmp_path / "tree.csv"
    assert cli.main(["curve", "--config", "tree", "--out", str(out), "--quiet"]) == 0
    _, rows = read_csv(out)
    y = [float(r["Y0"]) for r in rows]
    assert np.all(np.diff(y) >= -1e-12)
    assert float(rows[0]["convexity_defect"]) <= 1e-12


def test_envelope_subcommand(tmp_path):
    out = tmp_path / "env.csv"
    assert cli.main(["envelope", "--config", "tree", "--out", str(out), "--quiet"]) == 0
    _, rows = read_csv(out)
    assert all(float(r["hat_phi"]) <= float(r["phi"]) + 1e-12 for r in rows)


def test_exit_code_for_bad_config(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text(MINIMAL + "simulation.n_paths = -5\n")
    assert cli.main(["curve", "--config", str(p), "--quiet"]) == 2


def test_exit_code_for_assumption_violation(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("problem.loss = knots\nproblem.phi_m = 0, 0.5, 1\nproblem.phi_v = 0, 0.8, 0.3\n"
                 "problem.driver = zero\n")
    assert cli.main(["curve", "--config", str(p), "--quiet"]) == 2


def test_exit_code_for_failed_selftest(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "selftest_checks", lambda cfg, threads: [["forced", 1.0, 0.0, 0.1, False]])
    out = tmp_path / "st.csv"
    assert cli.main(["selftest", "--config", "bsqh", "--out", str(out), "--quiet"]) == 3
    assert "forced" in out.read_text()


def test_env_threads_fallback(monkeypatch):
    from weakbsde.simulate import resolve_threads
    monkeypatch.setenv("WEAKBSDE_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
