"""Experiment runners behind the configuration file's ``[[experiments]]`` entries.

Each runner receives a :class:`RunContext` and the experiment's parameter
table, writes its files through the context and returns a JSON-ready summary.
Tolerances from the ``[tolerances]`` table become :class:`CheckLine` entries.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import artifacts
from .bundle import (AnalyticTestField, ConnectionData, PotentialData, ScalarProfile,
                     boundary_identity_gauge, gauge_transform, identity_residuals)
from .causal import causal_mask, exterior_mask, hypothesis_report, recovery_domain
from .checks import CheckLine
from .config import ConfigError, ScenarioConfig
from .geometry import CoordinateChart, MetricClosure
from .metrics import make_metric
from .wave_solver import (BoundaryBasis, BoundarySource, CauchyData, cauchy_at, control_solve,
                          dtn_matrix, energy_history, scheme_hash, solve_forward, stable_chart)

log = logging.getLogger("connwave")


@dataclass
class RunContext:
    config: ScenarioConfig
    metric: MetricClosure
    chart: CoordinateChart
    B: ConnectionData
    V: PotentialData
    seed: int
    out: Path
    files: list = field(default_factory=list)
    lines: list = field(default_factory=list)

    def path(self, exp: str, suffix: str) -> Path:
        return self.out / f"{exp}{suffix}"

    def json(self, exp: str, suffix: str, data) -> Path:
        p = artifacts.write_json(self.path(exp, suffix), data)
        self.files.append(p)
        return p

    def csv(self, exp: str, suffix: str, rows, columns=None) -> Path:
        p = artifacts.write_csv(self.path(exp, suffix), rows, columns)
        self.files.append(p)
        return p

    def plot(self, exp: str, suffix: str, x, y, comment: str = "") -> Path:
        p = artifacts.write_plot_data(self.path(exp, suffix), x, y, comment)
        self.files.append(p)
        return p

    def container(self, exp: str, arrays: dict, meta: dict) -> Path:
        p = artifacts.write_container(self.path(exp, ".cwc"), arrays, meta)
        self.files.append(p)
        return p

    def tolerance(self, key: str, label: str, value: float, op: str = "<=") -> None:
        if key in self.config.tolerances:
            self.lines.append(CheckLine(label, float(value), op, self.config.tolerances[key]))


# ---------------------------------------------------------------------------
# context construction
# ---------------------------------------------------------------------------


def _field_pair(cfg: ScenarioConfig, n: int, seed: int):
    b = cfg.bundle
    fixture = artifacts.read_fixture(b.fixture) if b.fixture else None
    if fixture is not None and fixture[0].N != b.N:
        raise ConfigError(f"fixture has N={fixture[0].N} but [bundle] N={b.N}")
    if fixture is not None and fixture[0].n != n:
        raise ConfigError("fixture dimension does not match the metric")
    builders = {
        "zero": (lambda: ConnectionData.zero(b.N, n, b.group), lambda: PotentialData.zero(b.N)),
        "smooth_random": (lambda: ConnectionData.smooth_random(b.N, n, seed=seed, amplitude=b.amplitude,
                                                               kind=b.group),
                          lambda: PotentialData.smooth_random(b.N, n, seed=seed, amplitude=b.amplitude)),
        "affine_random": (lambda: ConnectionData.affine_random(b.N, n, seed=seed, amplitude=b.amplitude,
                                                               kind=b.group),
                          lambda: PotentialData.affine_random(b.N, n, seed=seed, amplitude=b.amplitude)),
        "fixture": (lambda: fixture[0], lambda: fixture[1]),
    }
    return builders[b.connection][0](), builders[b.potential][1]()


def build_context(cfg: ScenarioConfig, out: Path, seed: int) -> RunContext:
    try:
        metric = make_metric(cfg.metric.name, cfg.metric.n, **cfg.metric.params)
    except TypeError as exc:
        raise ConfigError(f"[metric.params]: {exc}") from None
    c = cfg.chart
    if c.nt is None:
        chart = stable_chart(metric, c.T, c.lengths, c.nx)
    else:
        chart = CoordinateChart(c.T, c.lengths, (c.nt,) + c.nx)
    B, V = _field_pair(cfg, cfg.metric.n, seed)
    return RunContext(cfg, metric, chart, B, V, seed, out)


def _p(params: dict, key: str, default):
    return params.get(key, default)


def _grid_meta(ctx: RunContext) -> dict:
    ch = ctx.chart
    return {"T": ch.T, "lengths": list(ch.lengths), "shape": list(ch.shape), "h_t": ch.h_t,
            "h_x": list(ch.h_x), "metric": ctx.metric.name, "N": ctx.B.N, "seed": ctx.seed}


def _bump_data(ctx: RunContext, params: dict) -> CauchyData:
    initial = _p(params, "initial", "bump")
    if initial == "zero":
        return CauchyData.zero(ctx.chart, ctx.B.N)
    if initial != "bump":
        raise ConfigError(f"initial must be 'bump' or 'zero', got {initial!r}")
    n = ctx.chart.n
    center = [float(v) for v in _p(params, "center", [0.5 * L for L in ctx.chart.lengths])]
    radius = float(_p(params, "radius", 0.2))
    amp = np.zeros(ctx.B.N, complex)
    amp[0] = 1.0
    if ctx.B.N > 1:
        amp[1] = 0.5j
    if len(center) != n:
        raise ConfigError("bump center needs one coordinate per spatial axis")
    bump = AnalyticTestField.from_scalar(ScalarProfile.bump([-ctx.chart.T] + center, radius), amp)
    return CauchyData.from_field(ctx.chart, ctx.B, bump, -ctx.chart.T)


def _basis(ctx: RunContext, params: dict, window=None) -> BoundaryBasis:
    lo, hi = window if window is not None else (-ctx.chart.T, ctx.chart.T)
    count = int(_p(params, "bumps", 5))
    width = float(_p(params, "width", (hi - lo) / (count + 1)))
    centers = np.linspace(lo + width, hi - width, count) if count else np.zeros(0)
    return BoundaryBasis(ctx.chart, centers, width, ctx.B.N)


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------


def run_verify_identities(ctx: RunContext, name: str, params: dict) -> dict:
    m = ctx.chart.dim
    N = ctx.B.N
    rng = np.random.default_rng(ctx.seed)
    count = int(_p(params, "points", 64))
    lo = np.array([-ctx.chart.T] + [0.0] * ctx.chart.n)
    hi = np.array([ctx.chart.T] + list(ctx.chart.lengths))
    X = lo + (hi - lo) * rng.random((count, m))
    u = AnalyticTestField.random_section(N, m, seed=ctx.seed + 1)
    v = AnalyticTestField.random_section(N, m, seed=ctx.seed + 2)
    A = AnalyticTestField.random_endomorphism(N, m, seed=ctx.seed + 3)
    res = identity_residuals(ctx.metric, ctx.B, ctx.V, u, v, A, X)
    ctx.json(name, ".json", {"residuals": res, "points": count})
    ctx.tolerance("identities", f"{name}: max identity residual", max(res.values()))
    return {"max_residual": max(res.values())}


def run_simulate(ctx: RunContext, name: str, params: dict) -> dict:
    cauchy = _bump_data(ctx, params)
    sol = solve_forward(ctx.metric, ctx.B, ctx.V, ctx.chart, cauchy=cauchy)
    E = energy_history(ctx.metric, ctx.B, sol)
    meta = {"grid": _grid_meta(ctx), "scheme": scheme_hash(), "params": params}
    ctx.container(name, {"t": ctx.chart.t, "u": sol.values}, meta)
    ctx.csv(name, "_energy.csv", [{"t": t, "E": e} for t, e in zip(E.t, E.total)])
    ctx.plot(name, "_energy.dat", E.t, E.total, "t  E(t)")
    peak = float(np.abs(sol.values).max())
    ctx.json(name, ".json", {"max_abs_u": peak, "E0": float(E.total[0]), "Emax": float(E.total.max())})
    return {"max_abs_u": peak}


def run_dtn(ctx: RunContext, name: str, params: dict) -> dict:
    basis = _basis(ctx, params)
    L = dtn_matrix(ctx.metric, ctx.B, ctx.V, basis)
    meta = {"grid": _grid_meta(ctx), "basis": basis.describe(), "provenance": L.provenance,
            "scheme": scheme_hash()}
    ctx.container(name, {"matrix": L.matrix}, meta)
    s = np.linalg.svd(L.matrix, compute_uv=False) if L.matrix.size else np.zeros(0)
    ctx.csv(name, "_singular_values.csv", [{"index": i, "sigma": v} for i, v in enumerate(s)])
    ctx.plot(name, "_singular_values.dat", np.arange(s.size), s, "index  singular value")
    summary = {"shape": list(L.matrix.shape), "spectral_norm": float(s[0]) if s.size else 0.0}
    ctx.json(name, ".json", summary)
    return summary


def run_gauge_invariance(ctx: RunContext, name: str, params: dict) -> dict:
    from .reconstruct import dtn_distance

    A0 = boundary_identity_gauge(ctx.chart.n, ctx.B.N, seed=int(_p(params, "gauge_seed", ctx.seed + 3)),
                                 amplitude=float(_p(params, "gauge_amplitude", 2.0)),
                                 lengths=ctx.chart.lengths, kind=ctx.config.bundle.group)
    gt = gauge_transform(ctx.B, ctx.V, A0)
    basis = _basis(ctx, params)
    d = dtn_distance(dtn_matrix(ctx.metric, ctx.B, ctx.V, basis),
                     dtn_matrix(ctx.metric, gt.connection, gt.potential, basis))
    out = {"dtn_distance": d["relative"], "spectral": d["spectral"], "worst_column": d["worst_column"],
           "worst_column_norm": d["worst_column_norm"], "basis_size": basis.size}
    ctx.json(name, ".json", out)
    ctx.tolerance("dtn_distance", f"{name}: relative DtN distance", d["relative"])
    return out


def run_energy_audit(ctx: RunContext, name: str, params: dict) -> dict:
    cauchy = _bump_data(ctx, params)
    sol = solve_forward(ctx.metric, ctx.B, ctx.V, ctx.chart, cauchy=cauchy, record=True)
    E = energy_history(ctx.metric, ctx.B, sol)
    C = float(E.total.max() / E.total[0]) if E.total[0] > 0 else 0.0
    ctx.csv(name, ".csv", [{"t": t, "E": e, "E_wave": w} for t, e, w in zip(E.t, E.total, E.wave)])
    ctx.plot(name, ".dat", E.t, E.total, "t  E(t)")
    ctx.json(name, ".json", {"gronwall_constant": C, "E0": float(E.total[0])})
    ctx.tolerance("gronwall", f"{name}: max E(t)/E(0)", C)
    return {"gronwall_constant": C}


def run_beam_decay(ctx: RunContext, name: str, params: dict) -> dict:
    from .gaussian_beam import (BeamConfig, beam_geodesic, beam_invariants, build_fermi_chart,
                                residual_decay, solve_amplitude_jets, solve_phase_jets)

    n = ctx.chart.n
    J = int(_p(params, "J", 4 if n == 1 else 6))
    delta = float(_p(params, "delta", 0.5 if n == 1 else 1.0))
    k = int(_p(params, "k", 0))
    lambdas = tuple(float(v) for v in _p(params, "lambdas", (20, 40, 80, 160, 320, 640)))
    if len(lambdas) < 3 or lambdas[0] <= 0 or np.log10(lambdas[-1] / lambdas[0]) < 1.5:
        raise ConfigError(f"{name}: lambdas need at least 3 positive values spanning 1.5 decades")
    p = _p(params, "point", [0.0] + [0.5 * L for L in ctx.chart.lengths])
    direction = _p(params, "direction", [1.0] + [0.0] * (n - 1))
    path = beam_geodesic(ctx.metric, p, direction, ctx.chart)
    fc = build_fermi_chart(ctx.metric, path, delta)
    ph = solve_phase_jets(fc, J)
    am = solve_amplitude_jets(fc, ph, ctx.B, ctx.V)
    rd = residual_decay(ctx.metric, ctx.B, ctx.V, fc, ph, am, BeamConfig(J=J, lambdas=lambdas, delta=delta),
                        ctx.chart, k=k)
    inv = beam_invariants(fc, ph, am, ctx.B, ctx.V)
    ctx.csv(name, ".csv", rd.rows())
    ctx.plot(name, ".dat", np.log(rd.lambdas), np.log(rd.norms), "log(lambda)  log(residual)")
    # transport uses first-order jets of B and V, exact only for affine coefficients
    exact = {ctx.config.bundle.connection, ctx.config.bundle.potential} <= {"zero", "affine_random", "fixture"}
    if not exact:
        log.warning("%s: coefficients are not affine; the predicted slope is not expected to hold", name)
    out = {"fitted_slope": rd.slope, "predicted_slope": rd.theory, "J": J, "n": n, "k": k,
           "invariants": inv, "exact_coefficient_jets": exact}
    ctx.json(name, ".json", out)
    ctx.tolerance("beam_slope_margin", f"{name}: fitted minus predicted slope", rd.slope - rd.theory)
    return {"fitted_slope": rd.slope, "predicted_slope": rd.theory}


def run_causal_map(ctx: RunContext, name: str, params: dict) -> dict:
    p = [float(v) for v in _p(params, "point", [0.0] + [0.5 * L for L in ctx.chart.lengths])]
    masks = {"future": causal_mask(ctx.metric, ctx.chart, p, 1).mask,
             "past": causal_mask(ctx.metric, ctx.chart, p, -1).mask,
             "exterior": exterior_mask(ctx.metric, ctx.chart, p).mask}
    out = {"point": p}
    if "T0" in params:
        D = recovery_domain(ctx.metric, ctx.chart, float(params["T0"]))
        masks["recovery_domain"] = D.mask
        out["recovery_domain"] = D.info
    for key, m in masks.items():
        ctx.json(name, f"_{key}.json", artifacts.mask_to_rle(m, {"tag": key}))
        out[f"{key}_cells"] = int(m.sum())
    ctx.json(name, ".json", out)
    return out


def run_hypotheses(ctx: RunContext, name: str, params: dict) -> dict:
    T0 = float(_p(params, "T0", -ctx.chart.T / 2))
    p0 = _p(params, "p0", [-0.75 * ctx.chart.T] + [0.5 * L for L in ctx.chart.lengths])
    T1 = float(_p(params, "T1", 0.75 * ctx.chart.T))
    rep = hypothesis_report(ctx.metric, ctx.chart, T0, p0, T1, h1_samples=int(_p(params, "h1_samples", 2000)),
                            h2_samples=int(_p(params, "h2_samples", 4)), seed=ctx.seed)
    p = ctx.path(name, ".json")
    p.write_text(rep.to_json() + "\n")
    ctx.files.append(p)
    for key, ok in rep.passed.items():
        ctx.tolerance(f"require_{key.lower()}", f"{name}: {key} holds", float(ok), ">=")
    return {"passed": rep.passed}


def run_control(ctx: RunContext, name: str, params: dict) -> dict:
    t1 = float(_p(params, "t1", 0.0))
    window = tuple(float(v) for v in _p(params, "window", (-ctx.chart.T, t1)))
    # reachable target: state produced by smooth boundary data inside the window
    t = ctx.chart.t
    mid, half = 0.5 * (window[0] + window[1]), 0.45 * (window[1] - window[0])
    prof = np.where(np.abs(t - mid) < half, np.cos(np.pi * (t - mid) / (2 * half)) ** 6, 0.0)
    nb = ctx.chart.boundary_indices().size
    f = np.zeros((t.size, nb, ctx.B.N), complex)
    f[:, 0, 0] = prof
    sol = solve_forward(ctx.metric, ctx.B, ctx.V, ctx.chart, f=BoundarySource(f))
    target = cauchy_at(ctx.metric, ctx.B, sol, t1)
    res = control_solve(ctx.metric, ctx.B, ctx.V, ctx.chart, target, window,
                        n_bumps=int(_p(params, "bumps", 10)), noise_level=params.get("noise_level"))
    s = res.singular_values
    ctx.csv(name, "_singular_values.csv", [{"index": i, "sigma": v} for i, v in enumerate(s)])
    ctx.plot(name, "_singular_values.dat", np.arange(s.size), s, "index  singular value")
    out = {"sigma_min": res.sigma_min, "residual": res.residual, "flagged": res.flagged,
           "epsilon": res.epsilon}
    ctx.json(name, ".json", out)
    ctx.tolerance("control_residual", f"{name}: control residual", res.residual)
    return out


def run_reconstruct(ctx: RunContext, name: str, params: dict) -> dict:
    from .reconstruct import reconstruct

    A0 = boundary_identity_gauge(ctx.chart.n, ctx.B.N, seed=int(_p(params, "gauge_seed", ctx.seed + 3)),
                                 amplitude=float(_p(params, "gauge_amplitude", 2.0)),
                                 lengths=ctx.chart.lengths, kind=ctx.config.bundle.group)
    gt = gauge_transform(ctx.B, ctx.V, A0)
    rec = reconstruct(ctx.metric, (ctx.B, ctx.V), (gt.connection, gt.potential), ctx.chart,
                      float(_p(params, "T0", 0.0)), probes=int(_p(params, "probes", 2 * ctx.B.N)),
                      seed=ctx.seed)
    report = rec.report.to_dict()
    ctx.json(name, ".json", report)
    est = rec.estimate
    ctx.container(name, {"gauge": est.values, "mask": est.mask, "resolved": est.resolved},
                  {"grid": _grid_meta(ctx), "kind": "gauge-estimate"})
    ctx.tolerance("connection_residual", f"{name}: connection residual", report["max_connection_residual"])
    ctx.tolerance("potential_residual", f"{name}: potential residual", report["max_potential_residual"])
    ctx.tolerance("anchoring_defect", f"{name}: anchoring defect", report["anchoring_defect"])
    return report


RUNNERS: dict[str, Callable[[RunContext, str, dict], dict]] = {
    "verify-identities": run_verify_identities,
    "simulate": run_simulate,
    "dtn": run_dtn,
    "gauge-invariance": run_gauge_invariance,
    "energy-audit": run_energy_audit,
    "beam-decay": run_beam_decay,
    "causal-map": run_causal_map,
    "hypotheses": run_hypotheses,
    "control": run_control,
    "reconstruct": run_reconstruct,
}
