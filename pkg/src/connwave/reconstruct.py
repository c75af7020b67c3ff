"""Gauge recovery from boundary probes.

Two coefficient pairs driven by the same early boundary sources are
compared on the recovery domain: wherever the probe solutions of the second
pair span the fibre, ``A = M1 M2^+`` maps them onto those of the first.  On
the lateral boundary the solutions vanish after the source window, so there
the gauge is read from covariant normal derivatives instead.  The estimate
is checked by transporting ``dA = A B2 - B1 A`` along curves inside the
domain and by conjugating the first pair into the second.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .bundle import ConnectionData, PotentialData
from .causal import RegionMask, recovery_domain
from .geometry import CoordinateChart, MetricClosure
from .wave_solver import (BoundaryBasis, BoundarySource, DtNMatrix, NeumannTrace, dtn_matrix,
                          smooth_bump, solve_forward)


class ReconstructionError(RuntimeError):
    """Raised when probes cannot resolve the gauge or inputs are inconsistent."""


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


def random_bump_sources(chart: CoordinateChart, N: int, T0: float, count: int, seed: int = 0,
                        width: Optional[float] = None) -> BoundarySource:
    """``count`` sources supported in ``(-T, T0)``: one smooth time bump per boundary node,
    each with its own random centre and random complex fibre vector."""
    rng = np.random.default_rng(seed)
    lo, hi = -chart.T, T0
    if hi - lo <= 0:
        raise ReconstructionError("empty source window")
    width = 0.25 * (hi - lo) if width is None else float(width)
    if 2 * width >= hi - lo:
        raise ReconstructionError("source bumps do not fit inside the window")
    nb = chart.boundary_indices().size
    t = chart.t
    vals = np.zeros((count, t.size, nb, N), complex)
    for q in range(count):
        centers = rng.uniform(lo + width, hi - width, nb)
        vecs = rng.normal(size=(nb, N)) + 1j * rng.normal(size=(nb, N))
        vals[q] = smooth_bump((t[:, None] - centers[None]) / width)[..., None] * vecs[None]
    return BoundarySource(vals, (lo, hi))


@dataclass
class ProbeSet:
    """Probe solutions of both pairs and the per-cell solution matrices on the mask."""

    chart: CoordinateChart
    mask: np.ndarray
    sources: BoundarySource
    u1: np.ndarray  # (m, nt, *nx, N)
    u2: np.ndarray
    traces1: np.ndarray  # (m, nt, nb, N) covariant normal derivatives
    traces2: np.ndarray
    cond: np.ndarray = field(init=False)

    def __post_init__(self):
        self.cond = np.full(self.mask.shape, np.nan)
        M2 = self.matrices(2)
        s = np.linalg.svd(M2, compute_uv=False)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.cond[self.mask] = np.where(s[:, -1] > 0, s[:, 0] / s[:, -1], np.inf)

    @property
    def count(self) -> int:
        return self.u1.shape[0]

    def matrices(self, which: int) -> np.ndarray:
        """``M^(k)`` on mask cells, shape ``(cells, N, m)``; columns are probe values."""
        u = self.u1 if which == 1 else self.u2
        return np.moveaxis(u[:, self.mask], 0, -1)


def probe_solutions(metric: MetricClosure, pair1: tuple[ConnectionData, PotentialData],
                    pair2: tuple[ConnectionData, PotentialData], chart: CoordinateChart,
                    sources: BoundarySource, mask: np.ndarray) -> ProbeSet:
    """Forward solves of both pairs for every source, with covariant normal traces."""
    (B1, V1), (B2, V2) = pair1, pair2
    if B1.N != B2.N:
        raise ReconstructionError("pairs act on bundles of different rank")
    vals = np.asarray(sources.values)
    if vals.ndim != 4 or vals.shape[0] < B1.N:
        raise ReconstructionError(f"need at least N={B1.N} sources, got "
                                  f"{vals.shape[0] if vals.ndim == 4 else 1}")
    if mask.shape != chart.shape:
        raise ReconstructionError("mask does not match the chart")
    out = []
    for B, V in ((B1, V1), (B2, V2)):
        sol = solve_forward(metric, B, V, chart, f=sources)
        u = sol.values
        tracer = NeumannTrace(metric, B, chart)
        tr = np.stack([tracer.level(u[:, k], chart.t[k]) for k in range(chart.shape[0])], axis=1)
        out.append((u, tr))
    return ProbeSet(chart, mask, sources, out[0][0], out[1][0], out[0][1], out[1][1])


# ---------------------------------------------------------------------------
# pointwise gauge
# ---------------------------------------------------------------------------


def _polar(A: np.ndarray) -> np.ndarray:
    U, _, Vh = np.linalg.svd(A)
    return U @ Vh


def _ratio(M1: np.ndarray, M2: np.ndarray) -> np.ndarray:
    """Least-squares ``A`` with ``A M2 = M1`` per cell."""
    return M1 @ np.linalg.pinv(M2)


@dataclass
class GaugeEstimate:
    """Recovered gauge on the chart grid (identity outside the mask)."""

    chart: CoordinateChart
    mask: np.ndarray
    values: np.ndarray  # (nt, *nx, N, N), group-retracted
    resolved: np.ndarray  # cells estimated directly
    boundary: np.ndarray  # mask cells on the lateral boundary (read from normal traces)
    unitary_defect: np.ndarray  # pre-retraction ||A^H A - I|| per cell (NaN off the mask)

    @property
    def resolved_fraction(self) -> float:
        return float(self.resolved[self.mask].mean()) if self.mask.any() else 0.0

    def anchoring_defect(self) -> float:
        """``max ||A - Id||`` over mask cells on the lateral boundary."""
        cells = self.boundary & self.resolved
        if not cells.any():
            return float("nan")
        N = self.values.shape[-1]
        return float(np.linalg.norm(self.values[cells] - np.eye(N), ord=2, axis=(-2, -1)).max())


def _boundary_cells(chart: CoordinateChart) -> np.ndarray:
    return np.broadcast_to(chart.boundary_mask(), chart.shape)


def gauge_from_solutions(probe: ProbeSet, cond_max: float = 1e6, floor: float = 1e-6,
                         group=None, min_resolved: float = 0.0) -> GaugeEstimate:
    """``A = M1 M2^+`` per mask cell, retracted to the group.

    Interior cells whose ``M2`` has condition number above ``cond_max`` or
    largest singular value below ``floor`` times the global maximum are
    unresolved and filled from the nearest resolved cell.  Boundary cells use
    the normal traces of the two pairs in place of values.  If fewer than
    ``min_resolved`` of the mask cells are resolved the probes are rejected.
    """
    chart, mask = probe.chart, probe.mask
    N = probe.u1.shape[-1]
    shape = chart.shape
    values = np.broadcast_to(np.eye(N, dtype=complex), shape + (N, N)).copy()
    resolved = np.zeros(shape, bool)
    defect = np.full(shape, np.nan)
    on_sigma = _boundary_cells(chart) & mask
    interior = mask & ~on_sigma

    def estimate(M1, M2, cells):
        s = np.linalg.svd(M2, compute_uv=False)
        top = s[:, 0].max(initial=0.0)
        ok = (s[:, -1] * cond_max >= s[:, 0]) & (s[:, 0] >= floor * top) & (s[:, 0] > 0)
        A = _ratio(M1, M2)
        d = np.linalg.norm(np.swapaxes(A.conj(), -1, -2) @ A - np.eye(N), ord=2, axis=(-2, -1))
        R = _polar(A) if group is None else group.retract(A)
        idx = tuple(np.array(np.nonzero(cells)))
        values[idx] = np.where(ok[:, None, None], R, values[idx])
        defect[idx] = d
        resolved[idx] = ok

    M1 = np.moveaxis(probe.u1[:, interior], 0, -1)
    M2 = np.moveaxis(probe.u2[:, interior], 0, -1)
    estimate(M1, M2, interior)
    if on_sigma.any():
        bpos = np.full(chart.spatial_shape, -1, int)
        bpos.ravel()[chart.boundary_indices()] = np.arange(chart.boundary_indices().size)
        k, *sp = np.nonzero(on_sigma)
        j = bpos[tuple(sp)]
        T1 = np.moveaxis(probe.traces1[:, k, j], 0, -1)
        T2 = np.moveaxis(probe.traces2[:, k, j], 0, -1)
        estimate(T1, T2, on_sigma)
    frac = float(resolved[mask].mean()) if mask.any() else 0.0
    if frac < min_resolved or (mask.any() and not resolved.any()):
        raise ReconstructionError(f"only {frac:.1%} of domain cells are resolved; "
                                  "use more or different sources")
    todo = mask & ~resolved
    if todo.any():
        _, nearest = ndimage.distance_transform_edt(~resolved, return_indices=True)
        idx = tuple(np.array(np.nonzero(todo)))
        src = tuple(n[idx] for n in nearest)
        values[idx] = values[src]
    return GaugeEstimate(chart, mask, values, resolved, on_sigma, defect)


# ---------------------------------------------------------------------------
# transport along curves
# ---------------------------------------------------------------------------


def bfs_curve(mask: np.ndarray, start, end) -> np.ndarray:
    """Shortest grid path (face and diagonal moves) from ``start`` to ``end`` inside ``mask``."""
    start, end = tuple(int(i) for i in start), tuple(int(i) for i in end)
    if not (mask[start] and mask[end]):
        raise ReconstructionError("curve endpoints must lie in the domain")
    offsets = [o for o in np.ndindex(*(3,) * mask.ndim) if any(v != 1 for v in o)]
    offsets = [tuple(v - 1 for v in o) for o in offsets]
    prev = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        if cur == end:
            break
        for o in offsets:
            nxt = tuple(c + d for c, d in zip(cur, o))
            if all(0 <= v < s for v, s in zip(nxt, mask.shape)) and mask[nxt] and nxt not in prev:
                prev[nxt] = cur
                queue.append(nxt)
    if end not in prev:
        raise ReconstructionError("endpoints are not connected inside the domain")
    path = [end]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    return np.array(path[::-1])


@dataclass
class TransportResult:
    cells: np.ndarray  # grid indices along the curve
    points: np.ndarray  # chart coordinates
    values: np.ndarray  # transported gauge at each curve node
    consistency: Optional[float] = None  # max ||A_transport - A_estimate|| along the curve

    @property
    def endpoint(self) -> np.ndarray:
        return self.values[-1]


def transport_gauge(B1: ConnectionData, B2: ConnectionData, points: np.ndarray, start=None,
                    substeps: int = 4, group=None) -> np.ndarray:
    """Integrate ``A' = A S1 + S2 A`` with ``S1 = B2(c')``, ``S2 = -B1(c')`` along a polyline.

    RK4 on each segment followed by retraction to the group.  Returns the
    gauge at every vertex.
    """
    pts = np.asarray(points, float)
    N = B1.N
    A = np.eye(N, dtype=complex) if start is None else np.asarray(start, complex)
    out = [A]
    retract = _polar if group is None else group.retract

    def rhs(x, d, A):
        b1 = np.einsum("i,iab->ab", d, B1(x[None])[0])
        b2 = np.einsum("i,iab->ab", d, B2(x[None])[0])
        return A @ b2 - b1 @ A

    for p, q in zip(pts[:-1], pts[1:]):
        d = q - p
        h = 1.0 / substeps
        for j in range(substeps):
            x = p + j * h * d
            k1 = rhs(x, d, A)
            k2 = rhs(x + 0.5 * h * d, d, A + 0.5 * h * k1)
            k3 = rhs(x + 0.5 * h * d, d, A + 0.5 * h * k2)
            k4 = rhs(x + h * d, d, A + h * k3)
            A = retract(A + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4))
        out.append(A)
    return np.array(out)


def transport_along(estimate: GaugeEstimate, B1: ConnectionData, B2: ConnectionData, start=None,
                    end=None, cells=None, substeps: int = 4) -> TransportResult:
    """Transport from a boundary anchor (``A = Id``) along a grid curve inside the mask.

    Either give ``cells`` (consecutive grid indices, neighbours in the
    8/26-connectivity sense) or ``start``/``end`` for a BFS curve.
    """
    chart = estimate.chart
    if cells is None:
        if start is None or end is None:
            raise ReconstructionError("need either a cell path or both endpoints")
        cells = bfs_curve(estimate.mask, start, end)
    cells = np.asarray(cells, int)
    inside = np.all((cells >= 0) & (cells < np.array(chart.shape)), axis=1)
    if not inside.all() or not estimate.mask[tuple(cells.T)].all():
        raise ReconstructionError("curve leaves the recovery domain")
    if np.abs(np.diff(cells, axis=0)).max(initial=0) > 1:
        raise ReconstructionError("curve cells must be grid neighbours")
    if not _boundary_cells(chart)[tuple(cells[0])]:
        raise ReconstructionError("transport must start on the lateral boundary")
    nodes = chart.nodes()
    pts = nodes[tuple(cells.T)]
    vals = transport_gauge(B1, B2, pts, substeps=substeps)
    est = estimate.values[tuple(cells.T)]
    ok = estimate.resolved[tuple(cells.T)]
    gap = np.linalg.norm(vals - est, ord=2, axis=(-2, -1))
    return TransportResult(cells, pts, vals, float(gap[ok].max()) if ok.any() else None)


# ---------------------------------------------------------------------------
# equivalence and DtN comparisons
# ---------------------------------------------------------------------------


def _grid_derivatives(values: np.ndarray, chart: CoordinateChart) -> np.ndarray:
    """Second-order central differences of a gridded field along every chart axis."""
    return np.stack([np.gradient(values, h, axis=a) for a, h in enumerate(chart.steps)], axis=chart.dim)


def equivalence_residuals(pair1: tuple[ConnectionData, PotentialData],
                          pair2: tuple[ConnectionData, PotentialData], estimate: GaugeEstimate,
                          erosion: int = 2) -> dict:
    """Distance between ``A^{-1} (d + B1) A, A^{-1} V1 A`` and the second pair on the eroded mask.

    Absolute maxima and maxima relative to the second pair's largest entry.
    """
    (B1, V1), (B2, V2) = pair1, pair2
    chart = estimate.chart
    cells = ndimage.binary_erosion(estimate.mask, ndimage.generate_binary_structure(chart.dim, chart.dim),
                                   iterations=erosion, border_value=0) if erosion else estimate.mask
    if not cells.any():
        return {"connection": float("nan"), "potential": float("nan"),
                "connection_relative": float("nan"), "potential_relative": float("nan"), "cells": 0}
    A = estimate.values
    dA = _grid_derivatives(A, chart)[cells]  # (c, m, N, N)
    Ac = A[cells]
    Ai = np.swapaxes(Ac.conj(), -1, -2)
    X = chart.nodes()[cells]
    b1, b2 = B1(X), B2(X)
    B3 = Ai[:, None] @ b1 @ Ac[:, None] + Ai[:, None] @ dA
    V3 = Ai @ V1(X) @ Ac
    v2 = V2(X)
    cb = float(np.abs(B3 - b2).max())
    cv = float(np.abs(V3 - v2).max())
    return {"connection": cb, "potential": cv,
            "connection_relative": cb / max(float(np.abs(b2).max()), 1e-300),
            "potential_relative": cv / max(float(np.abs(v2).max()), 1e-300),
            "cells": int(cells.sum())}


def dtn_distance(L1: DtNMatrix, L2: DtNMatrix) -> dict:
    """Spectral norm of ``L1 - L2`` (absolute and relative to ``L1``) and the worst column."""
    if L1.basis.describe() != L2.basis.describe() or L1.matrix.shape != L2.matrix.shape:
        raise ReconstructionError("DtN matrices were assembled on different bases")
    D = L1.matrix - L2.matrix
    spec = float(np.linalg.norm(D, 2)) if D.size else 0.0
    ref = float(np.linalg.norm(L1.matrix, 2)) if D.size else 0.0
    cols = np.linalg.norm(D, axis=0) if D.size else np.zeros(0)
    return {"spectral": spec, "relative": spec / ref if ref > 0 else 0.0,
            "worst_column": int(np.argmax(cols)) if cols.size else -1,
            "worst_column_norm": float(cols.max()) if cols.size else 0.0}


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class ReconstructionReport:
    dtn_distance: float
    cells_resolved_fraction: float
    max_connection_residual: float
    max_potential_residual: float
    anchoring_defect: float
    unitary_defect: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class Reconstruction:
    domain: RegionMask
    probe: ProbeSet
    estimate: GaugeEstimate
    residuals: dict
    dtn: dict
    report: ReconstructionReport


def reconstruct(metric: MetricClosure, pair1: tuple[ConnectionData, PotentialData],
                pair2: tuple[ConnectionData, PotentialData], chart: CoordinateChart, T0: float,
                sources: Optional[BoundarySource] = None, probes: Optional[int] = None, seed: int = 0,
                dtn_centers: Optional[Sequence[float]] = None, dtn_width: Optional[float] = None,
                cond_max: float = 1e6, erosion: int = 2, min_resolved: float = 0.5) -> Reconstruction:
    """Full comparison of two pairs: recovery domain, probes, gauge, residuals, DtN distance."""
    N = pair1[0].N
    dom = recovery_domain(metric, chart, T0, erosion=1)
    if dom.info["empty"]:
        raise ReconstructionError("recovery domain is empty for this window")
    if sources is None:
        sources = random_bump_sources(chart, N, T0, 2 * N if probes is None else probes, seed)
    probe = probe_solutions(metric, pair1, pair2, chart, sources, dom.mask)
    est = gauge_from_solutions(probe, cond_max, min_resolved=min_resolved)
    res = equivalence_residuals(pair1, pair2, est, erosion)
    lo, hi = -chart.T, T0
    width = 0.2 * (hi - lo) if dtn_width is None else dtn_width
    centers = np.linspace(lo + width, hi - width, 5) if dtn_centers is None else dtn_centers
    basis = BoundaryBasis(chart, centers, width, N)
    dtn = dtn_distance(dtn_matrix(metric, *pair1, basis), dtn_matrix(metric, *pair2, basis))
    ud = est.unitary_defect[est.mask & est.resolved]
    report = ReconstructionReport(dtn["relative"], est.resolved_fraction, res["connection_relative"],
                                  res["potential_relative"], est.anchoring_defect(),
                                  float(ud.max()) if ud.size else float("nan"))
    return Reconstruction(dom, probe, est, res, dtn, report)
