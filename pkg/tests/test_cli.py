import json
import subprocess
import sys

import numpy as np
import pytest

from connwave.artifacts import mask_from_rle, read_container, write_fixture
from connwave.bundle import ConnectionData, PotentialData
from connwave.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main

HEAD = """schema_version = 1
name = "tiny"
seed = 5
[metric]
name = "minkowski"
n = 1
[chart]
T = 1.0
lengths = [1.0]
nx = 21
{extra}
"""

BUNDLE = """[bundle]
N = 2
connection = "smooth_random"
potential = "smooth_random"
"""


def _config(tmp_path, body: str, extra: str = BUNDLE, name="c.toml"):
    p = tmp_path / name
    p.write_text(HEAD.format(extra=extra) + body)
    return p


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_empty_experiment_list_writes_empty_manifest(tmp_path):
    out = tmp_path / "o"
    assert main(["--config", str(_config(tmp_path, "")), "--out", str(out)]) == EXIT_OK
    m = _manifest(out)
    assert m["files"] == [] and m["seed"] == 5 and m["scenario"] == "tiny"
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json"]


@pytest.mark.parametrize("body", [
    "bogus = 1\n",
    '[[experiments]]\nkind = "teleport"\n',
    '[[experiments]]\nkind = "beam-decay"\n[experiments.params]\nlambdas = [20, 40]\n',
])
def test_config_errors_exit_2_without_outputs(tmp_path, body, capsys):
    out = tmp_path / "o"
    code = main(["--config", str(_config(tmp_path, body)), "--out", str(out)])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    if "beam" not in body:  # schema problems are caught before anything is created
        assert not out.exists()


def test_missing_config_and_missing_fixture(tmp_path):
    assert main(["--config", str(tmp_path / "none.toml")]) == EXIT_CONFIG
    p = tmp_path / "m.toml"
    p.write_text(HEAD.format(extra="") +
                 "[bundle]\nconnection = \"fixture\"\nfixture = \"missing.json\"\n")
    assert main(["--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_unstable_time_step_is_a_numerical_failure(tmp_path, capsys):
    p = tmp_path / "c.toml"
    p.write_text(HEAD.format(extra=BUNDLE).replace("nx = 21", "nx = 41\nnt = 5") +
                 '[[experiments]]\nkind = "causal-map"\n[[experiments]]\nkind = "simulate"\n')
    out = tmp_path / "o"
    assert main(["--config", str(p), "--out", str(out)]) == EXIT_NUMERIC
    assert "numerical failure in simulate" in capsys.readouterr().err
    m = _manifest(out)
    assert m["failed"] == "simulate"
    assert any(f["path"] == "causal-map.json" for f in m["files"])


def test_tolerance_failure_exits_1(tmp_path):
    body = ('[tolerances]\ncontrol_residual = 1e-30\n'
            '[[experiments]]\nkind = "control"\n[experiments.params]\nbumps = 6\n')
    out = tmp_path / "o"
    assert main(["--config", str(_config(tmp_path, body)), "--out", str(out)]) == EXIT_CHECK
    s = json.loads((out / "summary.json").read_text())
    assert s["passed"] is False and "control residual" in s["tolerances"][0]


RUN = """
[tolerances]
identities = 1e-10
[[experiments]]
kind = "verify-identities"
[[experiments]]
kind = "simulate"
[[experiments]]
kind = "dtn"
[experiments.params]
bumps = 2
[[experiments]]
name = "cones"
kind = "causal-map"
[experiments.params]
point = [0.0, 0.5]
T0 = -0.5
"""


def test_scenario_outputs_are_reproducible(tmp_path):
    cfg = _config(tmp_path, RUN)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--config", str(cfg), "--out", str(a)]) == EXIT_OK
    assert main(["--config", str(cfg), "--out", str(b)]) == EXIT_OK
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    assert {"simulate.cwc", "dtn.cwc", "cones_future.json", "summary.json", "manifest.json"} <= set(names)
    for n in names:
        if not n.endswith(".cwc"):
            assert (a / n).read_bytes() == (b / n).read_bytes(), n
    listed = {f["path"] for f in _manifest(a)["files"]}
    assert listed == set(names) - {"manifest.json"}

    header, arrays = read_container(a / "simulate.cwc")
    assert arrays["u"].shape[-1] == 2 and header["meta"]["grid"]["seed"] == 5
    assert np.array_equal(arrays["t"], np.linspace(-1, 1, arrays["u"].shape[0]))
    future = mask_from_rle(json.loads((a / "cones_future.json").read_text()))
    assert future.shape == arrays["u"].shape[:2]
    E = np.loadtxt(a / "simulate_energy.csv", delimiter=",", skiprows=1)
    assert E.shape[1] == 2 and np.all(E[:, 1] > 0)


def test_seed_override_changes_coefficients(tmp_path):
    cfg = _config(tmp_path, '[[experiments]]\nkind = "simulate"\n')
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--config", str(cfg), "--out", str(a)]) == EXIT_OK
    assert main(["--config", str(cfg), "--out", str(b), "--seed", "6", "--threads", "1"]) == EXIT_OK
    assert _manifest(b)["seed"] == 6
    assert (a / "simulate.json").read_bytes() != (b / "simulate.json").read_bytes()


def test_fixture_coefficients(tmp_path):
    write_fixture(tmp_path / "pair.json", ConnectionData.smooth_random(2, 1, seed=2),
                  PotentialData.smooth_random(2, 1, seed=2))
    extra = '[bundle]\nN = 2\nconnection = "fixture"\npotential = "fixture"\nfixture = "pair.json"\n'
    body = '[tolerances]\nidentities = 1e-10\n[[experiments]]\nkind = "verify-identities"\n'
    out = tmp_path / "o"
    assert main(["--config", str(_config(tmp_path, body, extra)), "--out", str(out)]) == EXIT_OK
    extra3 = extra.replace("N = 2", "N = 3")
    assert main(["--config", str(_config(tmp_path, body, extra3, "d.toml")), "--out", str(out)]) == EXIT_CONFIG


def test_check_mode(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["--check", "1", "--out", str(out)]) == EXIT_OK
    assert "PASS [ 1] identities" in capsys.readouterr().out
    data = json.loads((out / "check_identities.json").read_text())
    assert data["passed"] and data["number"] == 1
    assert [f["path"] for f in _manifest(out)["files"]] == ["check_identities.json"]
    assert main(["--check", "list"]) == EXIT_OK
    assert "observability" in capsys.readouterr().out
    assert main(["--check", "nonsense"]) == EXIT_CONFIG


def test_argument_errors():
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2
    with pytest.raises(SystemExit):
        main(["--check", "1", "--config", "x.toml"])
    assert main(["--check", "1", "--threads", "0"]) == EXIT_CONFIG


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "connwave", "--check", "contraction", "--threads", "1"],
                       capture_output=True, text=True, timeout=120)
    assert r.returncode == 0, r.stderr
    assert "PASS [11] contraction" in r.stdout


def test_missing_metric_table_exits_2_without_outputs(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('schema_version = 1\n[chart]\nT = 1.0\nlengths = [1.0]\nnx = 11\n')
    out = tmp_path / "o"
    assert main(["--config", str(p), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


def test_zero_solution_energy_csv_is_zero(tmp_path):
    body = '[[experiments]]\nkind = "energy-audit"\n[experiments.params]\ninitial = "zero"\n'
    out = tmp_path / "o"
    assert main(["--config", str(_config(tmp_path, body)), "--out", str(out)]) == EXIT_OK
    E = np.loadtxt(out / "energy-audit.csv", delimiter=",", skiprows=1)
    assert E.shape[0] > 3 and np.all(E[:, 1:] == 0.0)
    assert np.all(np.loadtxt(out / "energy-audit.dat")[:, 1] == 0.0)


def test_gauge_invariance_on_minkowski_pair(tmp_path):
    body = '[[experiments]]\nkind = "gauge-invariance"\n[experiments.params]\nbumps = 2\n'
    dist = []
    for nx in (21, 41):
        p = tmp_path / f"c{nx}.toml"
        p.write_text(HEAD.format(extra=BUNDLE).replace("nx = 21", f"nx = {nx}") + body)
        out = tmp_path / f"o{nx}"
        assert main(["--config", str(p), "--out", str(out)]) == EXIT_OK
        assert [f["path"] for f in _manifest(out)["files"]] == ["gauge-invariance.json", "summary.json"]
        rep = json.loads((out / "gauge-invariance.json").read_text())
        assert rep["basis_size"] == 2 * 2 * 2
        dist.append(rep["dtn_distance"])
    # gauge-equivalent pair: only discretisation error remains, shrinking at second order
    assert dist[1] < dist[0] / 3


def test_beam_decay_rows_and_slope(tmp_path):
    body = '[[experiments]]\nkind = "beam-decay"\n[experiments.params]\nJ = 4\n'
    out = tmp_path / "o"
    affine = BUNDLE.replace("smooth_random", "affine_random")
    assert main(["--config", str(_config(tmp_path, body, affine)), "--out", str(out)]) == EXIT_OK
    rows = np.loadtxt(out / "beam-decay.csv", delimiter=",", skiprows=1)
    assert rows.shape == (6, 3) and np.array_equal(rows[:, 0], [20, 40, 80, 160, 320, 640])
    rep = json.loads((out / "beam-decay.json").read_text())
    assert rep["fitted_slope"] == rows[0, 2]
    assert rep["predicted_slope"] == -0.75 and rep["fitted_slope"] < rep["predicted_slope"]
    assert rep["exact_coefficient_jets"] is True
    smooth = tmp_path / "smooth"
    assert main(["--config", str(_config(tmp_path, body, name="s.toml")), "--out", str(smooth)]) == EXIT_OK
    assert json.loads((smooth / "beam-decay.json").read_text())["exact_coefficient_jets"] is False


def test_reconstruct_report_fields(tmp_path):
    extra = BUNDLE.replace("nx = 21", "")
    body = '[[experiments]]\nkind = "reconstruct"\n'
    p = tmp_path / "c.toml"
    p.write_text(HEAD.format(extra=extra).replace("T = 1.0", "T = 3.0").replace("nx = 21", "nx = 31") + body)
    out = tmp_path / "o"
    assert main(["--config", str(p), "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "reconstruct.json").read_text())
    assert set(rep) == {"dtn_distance", "cells_resolved_fraction", "max_connection_residual",
                        "max_potential_residual", "anchoring_defect", "unitary_defect"}
    _, arrays = read_container(out / "reconstruct.cwc")
    assert arrays["gauge"].shape[-2:] == (2, 2) and arrays["mask"].dtype == bool


def test_unknown_metric_parameter_is_a_config_error(tmp_path, capsys):
    p = tmp_path / "c.toml"
    p.write_text(HEAD.format(extra="").replace('[chart]', '[metric.params]\nepsilon = 0.1\n[chart]'))
    assert main(["--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "epsilon" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()
