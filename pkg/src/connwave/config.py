"""Scenario configuration files (TOML).

A scenario file looks like::

    schema_version = 1
    name = "gauge-demo"
    seed = 0
    out = "runs/gauge-demo"

    [metric]
    name = "minkowski"          # minkowski | conformal | perturbed | violating | custom-fixture
    n = 1
    [metric.params]             # forwarded to the metric factory
    eps = 0.2

    [chart]
    T = 1.0
    lengths = [1.0]
    nx = 81                     # nodes per spatial axis (int or list)

    [bundle]
    N = 2
    connection = "smooth_random"    # zero | smooth_random | affine_random | fixture
    potential = "smooth_random"     # zero | smooth_random | affine_random | fixture
    amplitude = 0.5
    fixture = "pair.json"           # required when either kind is "fixture"

    [tolerances]
    dtn_distance = 5e-3

    [[experiments]]
    kind = "gauge-invariance"
    [experiments.params]
    gauge_amplitude = 2.0

Everything is validated before any computation; unknown keys are errors.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

SCHEMA_VERSION = 1

EXPERIMENT_KINDS = ("verify-identities", "simulate", "dtn", "gauge-invariance", "energy-audit",
                    "beam-decay", "causal-map", "hypotheses", "control", "reconstruct")
METRIC_NAMES = ("minkowski", "conformal", "perturbed", "violating", "custom-fixture")
FIELD_KINDS = ("zero", "smooth_random", "affine_random", "fixture")

_TOP = {"schema_version", "name", "seed", "out", "metric", "chart", "bundle", "tolerances", "experiments"}
_METRIC = {"name", "n", "params"}
_CHART = {"T", "lengths", "nx", "nt"}
_BUNDLE = {"N", "connection", "potential", "amplitude", "fixture", "group"}
_EXPERIMENT = {"kind", "name", "params"}


class ConfigError(ValueError):
    """Schema violation in a scenario file."""


@dataclass
class MetricSpec:
    name: str
    n: int = 1
    params: dict = field(default_factory=dict)


@dataclass
class ChartSpec:
    T: float
    lengths: tuple[float, ...]
    nx: tuple[int, ...]
    nt: Optional[int] = None


@dataclass
class BundleSpec:
    N: int = 1
    connection: str = "zero"
    potential: str = "zero"
    amplitude: float = 0.5
    fixture: Optional[str] = None
    group: str = "U"


@dataclass
class ExperimentSpec:
    kind: str
    name: str
    params: dict = field(default_factory=dict)


@dataclass
class ScenarioConfig:
    name: str
    metric: MetricSpec
    chart: ChartSpec
    bundle: BundleSpec
    experiments: list[ExperimentSpec]
    seed: int = 0
    out: Optional[str] = None
    tolerances: dict = field(default_factory=dict)
    source: Optional[Path] = None
    schema_version: int = SCHEMA_VERSION


def _unknown(table: dict, allowed: set, where: str) -> None:
    extra = sorted(set(table) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(extra)}")


def _table(data: dict, key: str, required: bool = True) -> dict:
    if key not in data:
        if required:
            raise ConfigError(f"missing required table [{key}]")
        return {}
    val = data[key]
    if not isinstance(val, dict):
        raise ConfigError(f"[{key}] must be a table")
    return val


def _num(val: Any, where: str, kind=float, positive: bool = False):
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{where} must be a number")
    if kind is int and not float(val).is_integer():
        raise ConfigError(f"{where} must be an integer")
    out = kind(val)
    if positive and out <= 0:
        raise ConfigError(f"{where} must be positive")
    return out


def parse_config(data: dict, source: Optional[Path] = None) -> ScenarioConfig:
    """Validate a decoded TOML document."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a table")
    _unknown(data, _TOP, "top level")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")

    m = _table(data, "metric")
    _unknown(m, _METRIC, "[metric]")
    if m.get("name") not in METRIC_NAMES:
        raise ConfigError(f"[metric] name must be one of {', '.join(METRIC_NAMES)}")
    n = _num(m.get("n", 1), "[metric] n", int)
    if n not in (1, 2):
        raise ConfigError("[metric] n must be 1 or 2")
    params = m.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("[metric.params] must be a table")
    metric = MetricSpec(m["name"], n, dict(params))

    c = _table(data, "chart")
    _unknown(c, _CHART, "[chart]")
    for key in ("T", "lengths", "nx"):
        if key not in c:
            raise ConfigError(f"[chart] missing {key}")
    T = _num(c["T"], "[chart] T", positive=True)
    lengths = c["lengths"] if isinstance(c["lengths"], list) else [c["lengths"]]
    lengths = tuple(_num(v, "[chart] lengths", positive=True) for v in lengths)
    if len(lengths) != n:
        raise ConfigError(f"[chart] lengths needs {n} entr{'y' if n == 1 else 'ies'}")
    nx = c["nx"] if isinstance(c["nx"], list) else [c["nx"]] * n
    nx = tuple(_num(v, "[chart] nx", int) for v in nx)
    if len(nx) != n or min(nx) < 3:
        raise ConfigError("[chart] nx must give at least 3 nodes per spatial axis")
    nt = _num(c["nt"], "[chart] nt", int) if "nt" in c else None
    if nt is not None and nt < 3:
        raise ConfigError("[chart] nt must be at least 3")
    chart = ChartSpec(T, lengths, nx, nt)

    b = _table(data, "bundle", required=False)
    _unknown(b, _BUNDLE, "[bundle]")
    bundle = BundleSpec(N=_num(b.get("N", 1), "[bundle] N", int, positive=True),
                        connection=b.get("connection", "zero"), potential=b.get("potential", "zero"),
                        amplitude=_num(b.get("amplitude", 0.5), "[bundle] amplitude"),
                        fixture=b.get("fixture"), group=b.get("group", "U"))
    for key in ("connection", "potential"):
        if getattr(bundle, key) not in FIELD_KINDS:
            raise ConfigError(f"[bundle] {key} must be one of {', '.join(FIELD_KINDS)}")
    if "fixture" in (bundle.connection, bundle.potential) and not bundle.fixture:
        raise ConfigError("[bundle] fixture path required for fixture coefficients")
    if bundle.group not in ("U", "SU"):
        raise ConfigError("[bundle] group must be U or SU")
    if bundle.fixture and source is not None and not Path(bundle.fixture).is_absolute():
        bundle.fixture = str((source.parent / bundle.fixture).resolve())

    tol = _table(data, "tolerances", required=False)
    tolerances = {k: _num(v, f"[tolerances] {k}") for k, v in tol.items()}

    exps = data.get("experiments", [])
    if not isinstance(exps, list):
        raise ConfigError("experiments must be an array of tables")
    experiments = []
    seen = set()
    for i, e in enumerate(exps):
        if not isinstance(e, dict):
            raise ConfigError(f"experiments[{i}] must be a table")
        _unknown(e, _EXPERIMENT, f"experiments[{i}]")
        if e.get("kind") not in EXPERIMENT_KINDS:
            raise ConfigError(f"experiments[{i}] kind must be one of {', '.join(EXPERIMENT_KINDS)}")
        name = str(e.get("name", e["kind"]))
        if name in seen:
            raise ConfigError(f"experiments[{i}]: duplicate name {name!r}")
        seen.add(name)
        p = e.get("params", {})
        if not isinstance(p, dict):
            raise ConfigError(f"experiments[{i}] params must be a table")
        experiments.append(ExperimentSpec(e["kind"], name, dict(p)))

    seed = _num(data.get("seed", 0), "seed", int)
    out = data.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError("out must be a string path")
    return ScenarioConfig(name=str(data.get("name", source.stem if source else "scenario")), metric=metric,
                          chart=chart, bundle=bundle, experiments=experiments, seed=seed, out=out,
                          tolerances=tolerances, source=source)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, path)
