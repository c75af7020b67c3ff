"""Null geodesics, causal cones, exteriors of double cones and the recovery domain.

For ``g = c (-dt^2 + g0)`` the causal relation ignores ``c``: a point ``q`` lies
in ``J+(p)`` exactly when ``q`` can be reached from ``p`` by a curve whose
spatial ``g0``-speed never exceeds one.  When ``g0`` does not depend on ``t``
this reduces to ``d_{g0}(x_p, x_q) <= t_q - t_p``; otherwise the earliest
arrival time is found by a label-setting sweep that evaluates ``g0`` at the
current arrival time.

Masks are conservative: cones are dilated by one cell, the exterior and the
recovery domain are eroded by one cell.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage, optimize
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .geometry import (CoordinateChart, GeometryError, MetricClosure, NULL_TOL, h1_scan,
                       metric_data)

STENCIL_RADIUS = 4


# ---------------------------------------------------------------------------
# geodesics
# ---------------------------------------------------------------------------


@dataclass
class GeodesicPath:
    s: np.ndarray
    points: np.ndarray
    velocities: np.ndarray
    causal_type: str
    exited: bool
    exit_point: Optional[np.ndarray] = None
    exit_face: Optional[tuple[int, int]] = None  # (axis, 0 for lower / 1 for upper)
    tangency_order: Optional[float] = None
    norm_drift: float = 0.0  # max |g(v,v) - g(v0,v0)| / |v|^2_euclid
    warnings: list = field(default_factory=list)


def _geodesic_rhs(metric: MetricClosure, y: np.ndarray) -> np.ndarray:
    m = y.size // 2
    x, v = y[:m], y[m:]
    gam = metric_data(metric, x[None], order=1)["christoffel"][0]
    return np.concatenate([v, -np.einsum("kij,i,j->k", gam, v, v)])


def _rk4(metric, y, h):
    k1 = _geodesic_rhs(metric, y)
    k2 = _geodesic_rhs(metric, y + 0.5 * h * k1)
    k3 = _geodesic_rhs(metric, y + 0.5 * h * k2)
    k4 = _geodesic_rhs(metric, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _norm(metric, x, v):
    g = metric_data(metric, x[None], order=0)["g"][0]
    return float(v @ g @ v)


def _box(chart: CoordinateChart):
    lo = np.concatenate([[-chart.T], np.zeros(chart.n)])
    hi = np.concatenate([[chart.T], np.asarray(chart.lengths, float)])
    return lo, hi


def _wall_distance(x, lo, hi):
    return np.minimum(x - lo, hi - x)


def trace_geodesic(metric: MetricClosure, p, v, chart: CoordinateChart, step: float = 1e-3,
                   max_length: float = 100.0) -> GeodesicPath:
    """RK4 integration of ``x'' = -Gamma(x', x')`` until the path leaves the chart box."""
    p = np.asarray(p, float)
    v = np.asarray(v, float)
    lo, hi = _box(chart)
    if np.any(p < lo - 1e-12) or np.any(p > hi + 1e-12):
        raise GeometryError("starting point outside the chart")
    q0 = _norm(metric, p, v)
    scale = float(v @ v)
    tag = "lightlike" if abs(q0) <= NULL_TOL * scale else ("spacelike" if q0 > 0 else "timelike")
    y = np.concatenate([p, v])
    m = p.size
    ss, xs, vs = [0.0], [p.copy()], [v.copy()]
    drift = 0.0
    s = 0.0
    exited = False
    exit_point = exit_face = None
    while s < max_length:
        y_new = _rk4(metric, y, step)
        x_new = y_new[:m]
        if np.any(x_new < lo) or np.any(x_new > hi):
            # locate the crossing by bisection on the sub-step length
            a, b = 0.0, step
            for _ in range(60):
                mid = 0.5 * (a + b)
                xm = _rk4(metric, y, mid)[:m]
                if np.any(xm < lo) or np.any(xm > hi):
                    b = mid
                else:
                    a = mid
            y_exit = _rk4(metric, y, a)
            s += a
            ss.append(s)
            xs.append(y_exit[:m])
            vs.append(y_exit[m:])
            exited = True
            exit_point = y_exit[:m].copy()
            d = np.stack([exit_point - lo, hi - exit_point])
            side, axis = np.unravel_index(np.argmin(d), d.shape)
            exit_face = (int(axis), int(side))
            break
        y = y_new
        s += step
        ss.append(s)
        xs.append(y[:m].copy())
        vs.append(y[m:].copy())
        drift = max(drift, abs(_norm(metric, y[:m], y[m:]) - q0) / float(y[m:] @ y[m:]))
    path = GeodesicPath(np.array(ss), np.array(xs), np.array(vs), tag, exited, exit_point,
                        exit_face, None, drift)
    if exited:
        path.tangency_order = _contact_order(path, lo, hi)
        if path.tangency_order is not None and path.tangency_order > 4:
            path.warnings.append(f"high-order boundary contact ({path.tangency_order:.2f})")
    return path


def _contact_order(path: GeodesicPath, lo, hi) -> Optional[float]:
    """Slope of ``log(distance to the exit face)`` against ``log(s_exit - s)``."""
    axis, side = path.exit_face
    wall = hi[axis] if side else lo[axis]
    dist = np.abs(path.points[:-1, axis] - wall)
    gap = path.s[-1] - path.s[:-1]
    keep = (gap > 0) & (dist > 0)
    dist, gap = dist[keep][-6:], gap[keep][-6:]
    if dist.size < 3:
        return None
    return float(np.polyfit(np.log(gap), np.log(dist), 1)[0])


def trace_null_geodesic(metric: MetricClosure, p, v_null, chart: CoordinateChart,
                        step: float = 1e-3) -> GeodesicPath:
    """Null geodesic from ``p``; ``v_null`` must be lightlike to ``1e-10``."""
    p = np.asarray(p, float)
    v = np.asarray(v_null, float)
    q = _norm(metric, p, v)
    if abs(q) > NULL_TOL * float(v @ v):
        raise GeometryError(f"initial vector is not lightlike: g(v,v) = {q:.3e}")
    return trace_geodesic(metric, p, v, chart, step)


def exp_map(metric: MetricClosure, p, w, steps: int = 200) -> np.ndarray:
    """Endpoint at parameter 1 of the geodesic with initial velocity ``w``."""
    y = np.concatenate([np.asarray(p, float), np.asarray(w, float)])
    h = 1.0 / steps
    for _ in range(steps):
        y = _rk4(metric, y, h)
    return y[:y.size // 2]


# ---------------------------------------------------------------------------
# distances and arrival times
# ---------------------------------------------------------------------------


def _stencil(n: int, radius: int) -> np.ndarray:
    """Primitive integer offsets with entries in ``[-radius, radius]``."""
    rng = range(-radius, radius + 1)
    offs = np.array(np.meshgrid(*([list(rng)] * n), indexing="ij")).reshape(n, -1).T
    keep = [o for o in offs if np.any(o) and np.gcd.reduce(np.abs(o)) == 1]
    return np.array(keep, int)


def _edge_lengths(metric: MetricClosure, x0: np.ndarray, d: np.ndarray, t) -> np.ndarray:
    """Simpson estimate of the ``g0`` length of straight segments ``x0 -> x0 + d`` at time ``t``."""
    t = np.broadcast_to(np.asarray(t, float), x0.shape[:-1])
    total = 0.0
    for w, frac in ((1 / 6, 0.0), (4 / 6, 0.5), (1 / 6, 1.0)):
        X = np.concatenate([t[..., None], x0 + frac * d], axis=-1)
        g0 = metric.spatial(X)[0]
        total = total + w * np.sqrt(np.einsum("...a,...ab,...b->...", d, g0, d))
    return total


class _SpatialGraph:
    """Grid graph over the spatial nodes with long-range primitive edges."""

    def __init__(self, metric: MetricClosure, chart: CoordinateChart, radius: int = STENCIL_RADIUS):
        self.metric, self.chart = metric, chart
        shape = chart.spatial_shape
        n = chart.n
        self.offsets = _stencil(n, radius)
        self.nodes = chart.spatial_nodes().reshape(-1, n)
        self.size = self.nodes.shape[0]
        idx = np.arange(self.size).reshape(shape)
        src, dst, disp = [], [], []
        h = np.asarray(chart.h_x)
        for o in self.offsets:
            sl_from = tuple(slice(max(0, -k), s - max(0, k)) for k, s in zip(o, shape))
            sl_to = tuple(slice(max(0, k), s - max(0, -k)) for k, s in zip(o, shape))
            a = idx[sl_from].ravel()
            b = idx[sl_to].ravel()
            src.append(a)
            dst.append(b)
            disp.append(np.broadcast_to(o * h, (a.size, n)))
        self.src = np.concatenate(src)
        self.dst = np.concatenate(dst)
        self.disp = np.concatenate(disp)

    def static_distances(self, sources: Sequence[np.ndarray]) -> np.ndarray:
        """``g0``-distances (time-independent ``g0``) from each source point to every node."""
        w = _edge_lengths(self.metric, self.nodes[self.src], self.disp, 0.0)
        graph = csr_matrix((w, (self.src, self.dst)), shape=(self.size, self.size))
        out = []
        for p in sources:
            corners, lens = self._attach(np.asarray(p, float), 0.0)
            d = dijkstra(graph, indices=corners)
            out.append(np.min(d + lens[:, None], axis=0))
        return np.array(out)

    def _attach(self, x: np.ndarray, t):
        """Nodes of the cell containing ``x`` with their straight-segment lengths."""
        chart = self.chart
        h = np.asarray(chart.h_x)
        base = np.clip(np.floor(x / h + 1e-12).astype(int), 0, np.array(chart.spatial_shape) - 2)
        cells = []
        for corner in np.ndindex(*([2] * chart.n)):
            cells.append(np.ravel_multi_index(tuple(base + np.array(corner)), chart.spatial_shape))
        cells = np.unique(cells)
        d = self.nodes[cells] - x
        lens = _edge_lengths(self.metric, np.broadcast_to(x, d.shape), d, t)
        return cells, lens

    def arrival_times(self, p: np.ndarray, direction: int = 1) -> np.ndarray:
        """Earliest (``direction=1``) or latest (``-1``) time a causal curve from ``p`` reaches each node.

        Label setting in the time-ordered sense; each edge is crossed at ``g0``
        frozen at the departure time plus half the crossing time (two fixed-point
        iterations).
        """
        p = np.asarray(p, float)
        t0, x0 = p[0], p[1:]
        T = self.chart.T
        order = np.argsort(self.src, kind="stable")
        src, dst, disp = self.src[order], self.dst[order], self.disp[order]
        starts = np.searchsorted(src, np.arange(self.size + 1))
        best = np.full(self.size, np.inf)
        cells, lens = self._attach(x0, t0)
        heap = []
        for c, L in zip(cells, lens):
            tau = self._cross(x0[None], self.nodes[c][None] - x0, t0, direction)[0]
            if tau < best[c]:
                best[c] = tau
                heapq.heappush(heap, (tau, int(c)))
        done = np.zeros(self.size, bool)
        while heap:
            tau, i = heapq.heappop(heap)
            if done[i] or tau > best[i]:
                continue
            done[i] = True
            if tau > 2 * T:
                continue
            sl = slice(starts[i], starts[i + 1])
            js = dst[sl]
            new = tau + self._cross(self.nodes[i][None], disp[sl], t0 + direction * tau, direction)
            better = new < best[js]
            for j, val in zip(js[better], new[better]):
                best[j] = val
                heapq.heappush(heap, (float(val), int(j)))
        return t0 + direction * best

    def _cross(self, x, d, t, direction):
        dt = _edge_lengths(self.metric, np.broadcast_to(x, d.shape), d, t)
        for _ in range(2):
            dt = _edge_lengths(self.metric, np.broadcast_to(x, d.shape), d, t + direction * dt / 2)
        return dt


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


@dataclass
class RegionMask:
    mask: np.ndarray  # boolean over chart.shape
    tag: str  # "J+", "J-", "E", "D"
    dilation: int  # +k dilated, -k eroded, in cells
    chart: CoordinateChart
    info: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def _full_structure(dim: int):
    return ndimage.generate_binary_structure(dim, dim)


def _dilate(mask: np.ndarray, cells: int) -> np.ndarray:
    if cells <= 0:
        return mask
    return ndimage.binary_dilation(mask, _full_structure(mask.ndim), iterations=cells)


def _erode(mask: np.ndarray, cells: int) -> np.ndarray:
    if cells <= 0:
        return mask
    return ndimage.binary_erosion(mask, _full_structure(mask.ndim), iterations=cells, border_value=1)


_LAST_GRAPH: list = []


def _graph(metric, chart) -> _SpatialGraph:
    """Reuse the most recent graph when both the metric object and the chart match."""
    if _LAST_GRAPH and _LAST_GRAPH[0].metric is metric and _LAST_GRAPH[0].chart == chart:
        return _LAST_GRAPH[0]
    _LAST_GRAPH[:] = [_SpatialGraph(metric, chart)]
    return _LAST_GRAPH[0]


def _raw_cone(metric: MetricClosure, chart: CoordinateChart, p, orientation: int) -> np.ndarray:
    p = np.asarray(p, float)
    G = _graph(metric, chart)
    t = chart.t.reshape((-1,) + (1,) * chart.n)
    tol = 1e-12 * max(1.0, chart.T)
    if metric.time_independent_g0:
        d = G.static_distances([p[1:]])[0].reshape(chart.spatial_shape)
        gap = orientation * (t - p[0])
        raw = gap >= d[None] - tol
    else:
        tau = G.arrival_times(p, orientation).reshape(chart.spatial_shape)
        raw = orientation * (t - tau[None]) >= -tol
    return raw


def causal_mask(metric: MetricClosure, chart: CoordinateChart, p, orientation: int = 1,
                dilation: int = 1) -> RegionMask:
    """``J+(p)`` (``orientation=1``) or ``J-(p)`` (``-1``), dilated by ``dilation`` cells."""
    if orientation not in (1, -1):
        raise ValueError("orientation must be +1 or -1")
    if not chart.contains(p):
        raise GeometryError("point outside the chart")
    raw = _raw_cone(metric, chart, p, orientation)
    return RegionMask(_dilate(raw, dilation), "J+" if orientation > 0 else "J-", dilation, chart,
                      {"point": list(map(float, p)),
                       "method": "distance" if metric.time_independent_g0 else "arrival-time"})


def exterior_mask(metric: MetricClosure, chart: CoordinateChart, p, erosion: int = 1) -> RegionMask:
    """Exterior of the double cone at ``p``; ``erosion=0`` gives the raw complement."""
    if not chart.contains(p):
        raise GeometryError("point outside the chart")
    cones = _raw_cone(metric, chart, p, 1) | _raw_cone(metric, chart, p, -1)
    ext = ~_dilate(cones, erosion)
    return RegionMask(ext, "E", -erosion, chart, {"point": list(map(float, p))})


def _max_boundary_distance(metric: MetricClosure, chart: CoordinateChart):
    """``max_z d(z, x)`` over boundary nodes ``z`` and the maximising node."""
    G = _graph(metric, chart)
    bidx = chart.boundary_indices()
    zs = G.nodes[bidx]
    d = G.static_distances(list(zs))
    arg = np.argmax(d, axis=0)
    return d.max(axis=0).reshape(chart.spatial_shape), bidx[arg].reshape(chart.spatial_shape)


def domain_bounds(metric: MetricClosure, chart: CoordinateChart, T0: float):
    r"""Per spatial node, the open time interval ``(lower, upper)`` occupied by the recovery domain.

    ``lower`` is the latest arrival from ``{T0} x boundary`` and ``upper`` the
    earliest departure towards ``{T} x boundary``; with time-independent
    ``g0`` these are ``T0 + max_z d(z, x)`` and ``T - max_z d(z, x)``.
    Returns ``(lower, upper, witness)`` where ``witness`` holds the boundary
    node realising the maximum (fast path only).
    """
    T = chart.T
    if not -T < T0 < T:
        raise GeometryError("T0 must lie in (-T, T)")
    if metric.time_independent_g0:
        D, witness = _max_boundary_distance(metric, chart)
        return T0 + D, T - D, witness
    G = _graph(metric, chart)
    late = np.full(chart.spatial_shape, -np.inf)
    early = np.full(chart.spatial_shape, np.inf)
    for z in G.nodes[chart.boundary_indices()]:
        late = np.maximum(late, G.arrival_times(np.concatenate([[T0], z]), 1).reshape(late.shape))
        early = np.minimum(early, G.arrival_times(np.concatenate([[T], z]), -1).reshape(late.shape))
    return late, early, None


def recovery_domain(metric: MetricClosure, chart: CoordinateChart, T0: float,
                    erosion: int = 1) -> RegionMask:
    r"""Points ``p`` with ``(T0, z) < p < (T, z)`` strictly for every boundary node ``z``.

    With time-independent ``g0`` this is ``max_z d(z, x) < min(t - T0, T - t)``.
    """
    lower, upper, witness = domain_bounds(metric, chart, T0)
    t = chart.t.reshape((-1,) + (1,) * chart.n)
    tol = 1e-12 * max(1.0, chart.T)
    margin = np.minimum(t - lower[None], upper[None] - t)
    raw = margin > tol
    mask = _erode(raw, erosion) & raw
    _, count = ndimage.label(mask, _full_structure(mask.ndim))
    info = {"T0": float(T0), "components": int(count), "empty": not mask.any(),
            "best_margin": float(margin.max())}
    if not mask.any():
        k = np.unravel_index(np.argmax(margin), margin.shape)
        info["closest_point"] = [float(chart.t[k[0]])] + [float(chart.axis(a)[k[a + 1]])
                                                         for a in range(chart.n)]
        if witness is not None:
            z = chart.spatial_nodes().reshape(-1, chart.n)[witness[k[1:]]]
            info["violated_boundary_node"] = z.tolist()
    return RegionMask(mask, "D", -erosion, chart, info)


# ---------------------------------------------------------------------------
# hypotheses
# ---------------------------------------------------------------------------


@dataclass
class HypothesisReport:
    h1: dict
    h2_samples: dict
    h3: dict
    h5: dict
    witnesses: dict

    @property
    def passed(self) -> dict:
        return {"H1": self.h1["passed"], "H2": self.h2_samples["passed"],
                "H3": self.h3["passed"], "H5": self.h5["passed"]}

    def to_json(self) -> str:
        return json.dumps({"h1": self.h1, "h2_samples": self.h2_samples, "h3": self.h3,
                           "h5": self.h5, "witnesses": self.witnesses}, indent=2, sort_keys=True)


def _boundary_exterior_times(metric, chart, p0) -> tuple[np.ndarray, np.ndarray]:
    """Times at which the raw exterior of the double cone meets the boundary of ``M``."""
    ext = exterior_mask(metric, chart, p0, erosion=0).mask
    lateral = ext[:, chart.boundary_mask()]
    t_lat = np.broadcast_to(chart.t[:, None], lateral.shape)[lateral]
    caps = np.concatenate([ext[0].ravel(), ext[-1].ravel()])
    return t_lat, caps


def h2_sample(metric: MetricClosure, chart: CoordinateChart, p, count: int = 8, seed: int = 0,
              starts: int = 4, steps: int = 64) -> dict:
    """Shoot spacelike geodesics from ``p`` to random points of its exterior.

    Each target is solved for ``exp_p(w) = q`` from several starting guesses;
    the sample passes when every converged solution is spacelike and they all
    coincide.
    """
    p = np.asarray(p, float)
    rng = np.random.default_rng(seed)
    ext = exterior_mask(metric, chart, p, erosion=1).mask
    cand = np.argwhere(ext)
    if cand.size == 0:
        return {"passed": True, "samples": 0, "note": "empty exterior", "failures": []}
    pick = cand[rng.choice(len(cand), size=min(count, len(cand)), replace=False)]
    nodes = chart.nodes()
    failures, solved = [], 0
    for idx in pick:
        q = nodes[tuple(idx)]
        sols = []
        for k in range(starts):
            w0 = (q - p) * rng.uniform(0.8, 1.2) + rng.normal(scale=0.05, size=p.size) * (k > 0)
            r = optimize.root(lambda w: exp_map(metric, p, w, steps) - q, w0, method="hybr",
                              options={"xtol": 1e-12})
            if r.success and np.abs(exp_map(metric, p, r.x, steps) - q).max() < 1e-8:
                sols.append(r.x)
        if not sols:
            failures.append({"target": q.tolist(), "reason": "no convergence"})
            continue
        solved += 1
        sols = np.array(sols)
        spread = float(np.abs(sols - sols[0]).max())
        g = metric_data(metric, p[None], order=0)["g"][0]
        norms = np.einsum("ki,ij,kj->k", sols, g, sols)
        if spread > 1e-6 or np.any(norms <= 0):
            failures.append({"target": q.tolist(), "reason": "non-unique or non-spacelike",
                             "spread": spread, "norms": norms.tolist()})
    return {"passed": not failures, "samples": int(len(pick)), "solved": solved,
            "failures": failures}


def hypothesis_report(metric: MetricClosure, chart: CoordinateChart, T0: float, p0, T1: float,
                      h1_samples: int = 2000, h2_samples: int = 4, seed: int = 0) -> HypothesisReport:
    """Sampled H1/H2 and mask-based H3/H5 checks."""
    p0 = np.asarray(p0, float)
    h1 = h1_scan(metric, chart, h1_samples, seed=seed)
    h1d = {"passed": bool(h1.passed), "max_value": float(h1.max_value), "vacuous": bool(h1.vacuous)}
    witnesses: dict = {}
    if not h1.passed:
        witnesses["h1"] = json.loads(h1.to_json())

    interior = bool(np.all(p0[1:] > 0) and np.all(p0[1:] < np.asarray(chart.lengths)))
    t_lat, caps = _boundary_exterior_times(metric, chart, p0)
    bad = t_lat[(t_lat <= -chart.T) | (t_lat >= T0)]
    h3_pass = interior and bad.size == 0 and not caps.any()
    h3 = {"passed": bool(h3_pass), "p0": p0.tolist(), "T0": float(T0), "interior": interior,
          "latest_boundary_contact": float(t_lat.max()) if t_lat.size else None}
    if bad.size:
        witnesses["h3"] = {"times_outside_gamma": sorted(set(map(float, bad)))[:10]}

    lower, upper, _ = domain_bounds(metric, chart, T0)
    missing = ~((lower < T1) & (T1 < upper))
    D = recovery_domain(metric, chart, T0)
    h5 = {"passed": bool(-chart.T <= T1 <= chart.T and not missing.any()), "T1": float(T1),
          "slice_margin": float(np.min(np.minimum(T1 - lower, upper - T1))),
          "domain_cells": D.count, "components": D.info["components"]}
    if missing.any():
        witnesses["h5"] = {"missing_nodes": int(missing.sum())}

    h2 = h2_sample(metric, chart, p0, h2_samples, seed) if h2_samples else {"passed": True, "samples": 0}
    if h2.get("failures"):
        witnesses["h2"] = h2["failures"]
    return HypothesisReport(h1d, h2, h3, h5, witnesses)
