from pathlib import Path

import pytest

from connwave.config import EXPERIMENT_KINDS, ConfigError, load_config, parse_config

BASE = {"schema_version": 1, "metric": {"name": "minkowski", "n": 1},
        "chart": {"T": 1.0, "lengths": [1.0], "nx": 11}}

REPO = Path(__file__).resolve().parents[1]


def _with(**changes):
    d = {k: (dict(v) if isinstance(v, dict) else v) for k, v in BASE.items()}
    d.update(changes)
    return d


def test_minimal_defaults():
    cfg = parse_config(_with())
    assert cfg.bundle.N == 1 and cfg.bundle.connection == "zero"
    assert cfg.experiments == [] and cfg.seed == 0 and cfg.chart.nx == (11,)


def test_scalar_nx_broadcasts_in_2d():
    cfg = parse_config(_with(metric={"name": "perturbed", "n": 2}, chart={"T": 1, "lengths": [1, 2], "nx": 9}))
    assert cfg.chart.nx == (9, 9) and cfg.chart.lengths == (1.0, 2.0)


@pytest.mark.parametrize("change, message", [
    ({"schema_version": 2}, "schema_version"),
    ({"bogus": 1}, "unknown key"),
    ({"metric": {"name": "flat"}}, "metric"),
    ({"metric": {"name": "minkowski", "n": 3}}, "n must be 1 or 2"),
    ({"metric": {"name": "minkowski", "colour": 1}}, "unknown key"),
    ({"chart": {"T": -1.0, "lengths": [1.0], "nx": 11}}, "positive"),
    ({"chart": {"T": 1.0, "lengths": [1.0, 1.0], "nx": 11}}, "lengths"),
    ({"chart": {"T": 1.0, "lengths": [1.0], "nx": 2}}, "at least 3"),
    ({"chart": {"T": 1.0, "lengths": [1.0], "nx": 10.5}}, "integer"),
    ({"chart": {"T": 1.0, "lengths": [1.0]}}, "missing nx"),
    ({"bundle": {"connection": "wild"}}, "connection"),
    ({"bundle": {"connection": "fixture"}}, "fixture path"),
    ({"bundle": {"group": "O"}}, "group"),
    ({"bundle": {"N": 0}}, "positive"),
    ({"tolerances": {"x": "small"}}, "number"),
    ({"experiments": [{"kind": "teleport"}]}, "kind"),
    ({"experiments": [{"kind": "dtn"}, {"kind": "dtn"}]}, "duplicate"),
    ({"experiments": [{"kind": "dtn", "extra": 1}]}, "unknown key"),
    ({"seed": "zero"}, "seed"),
])
def test_schema_violations(change, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(_with(**change))


def test_missing_metric_table():
    d = _with()
    del d["metric"]
    with pytest.raises(ConfigError, match=r"\[metric\]"):
        parse_config(d)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="no such file"):
        load_config(tmp_path / "nope.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("schema_version = = 1\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_fixture_path_resolves_next_to_config(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text('schema_version = 1\n[metric]\nname = "minkowski"\n[chart]\nT = 1.0\nlengths = [1.0]\nnx = 5\n'
                 '[bundle]\nconnection = "fixture"\nfixture = "pair.json"\n')
    cfg = load_config(f)
    assert Path(cfg.bundle.fixture) == (tmp_path / "pair.json").resolve()
    assert cfg.name == "c"


def test_shipped_scenarios_parse():
    files = sorted((REPO / "configs").glob("*.toml"))
    assert files
    kinds = set()
    for f in files:
        kinds |= {e.kind for e in load_config(f).experiments}
    assert kinds == set(EXPERIMENT_KINDS)
