r"""Explicit covariant leapfrog solver for ``P u = F`` with Dirichlet data.

Multiplying ``P u = F`` by the density ``G`` gives, for ``g = c(-dt^2 + g_0)``,

.. math::

    \nabla_t (w \nabla_t u) - \nabla_a (K^{ab} \nabla_b u) + G V u = G F,
    \qquad w = G / c,\quad K^{ab} = G g_0^{ab} / c .

Covariant differences use parallel-transport links ``exp(h B_i)`` evaluated at
cell midpoints (the lattice-gauge construction), so the discrete operator is
exactly gauge covariant and the time stepping is reversible:

.. math::

    w^{+}(E_+ u^{n+1} - u^n) - w^{-}(u^n - E_- u^{n-1}) = h_t^2 R^n,

with ``E_\pm = exp(\pm h_t B_0(t_{n\pm 1/2}))``, ``w^\pm = w(t_{n\pm1/2})`` and
``R^n = S(u^n) - G V u^n + G F`` where ``S`` is the divergence-form spatial
stencil.  All arrays carry a leading batch axis so that many boundary sources
are solved at once.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq

from .bundle import AnalyticTestField, ConnectionData, PotentialData, ScalarProfile, apply_P
from .geometry import CoordinateChart, GeometryError, MetricClosure, metric_data

SCHEME = "covariant-leapfrog-v1"


class SolverError(RuntimeError):
    """CFL violation, incompatible data or a non-finite state."""


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass
class CauchyData:
    """``(u, nabla_t u)`` on the slice ``t = t0``.

    ``previous`` optionally holds the exact neighbouring level on the side
    opposite to the marching direction, which restarts the two-level
    recurrence without the Taylor start-up step.
    """

    u0: np.ndarray
    u1: Optional[np.ndarray]
    t0: float
    previous: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.u1 is None:
            self.u1 = np.zeros_like(np.asarray(self.u0, complex))

    @classmethod
    def zero(cls, chart: CoordinateChart, N: int, t0: Optional[float] = None) -> "CauchyData":
        z = np.zeros(chart.spatial_shape + (N,), complex)
        return cls(z, z.copy(), -chart.T if t0 is None else t0)

    @classmethod
    def from_field(cls, chart: CoordinateChart, B: ConnectionData, u: AnalyticTestField,
                   t0: float) -> "CauchyData":
        X = chart.slice_points(t0)
        val, d1, _ = u(X)
        ut = d1[..., 0, :] + np.einsum("...ab,...b->...a", B(X)[..., 0, :, :], val)
        return cls(val, ut, t0)


@dataclass
class BoundarySource:
    """Dirichlet data on the lateral boundary: ``values[..., k, j, :]`` at time index ``k`` and
    boundary node ``j`` (ordering of :meth:`CoordinateChart.boundary_indices`)."""

    values: np.ndarray
    window: tuple[float, float] = (-np.inf, np.inf)

    @classmethod
    def zero(cls, chart: CoordinateChart, N: int) -> "BoundarySource":
        nb = chart.boundary_indices().size
        return cls(np.zeros((chart.shape[0], nb, N), complex))

    @classmethod
    def from_function(cls, chart: CoordinateChart, fn: Callable, window=(-np.inf, np.inf)):
        """``fn(X)`` with ``X`` of shape ``(nt, nb, n+1)`` returns ``(nt, nb, N)``."""
        xb = chart.spatial_nodes().reshape(-1, chart.n)[chart.boundary_indices()]
        t = chart.t
        X = np.concatenate([np.broadcast_to(t[:, None, None], (t.size, xb.shape[0], 1)),
                            np.broadcast_to(xb[None], (t.size,) + xb.shape)], axis=-1)
        vals = np.asarray(fn(X), complex)
        lo, hi = window
        mask = (t >= lo) & (t <= hi)
        vals = vals * mask[:, None, None]
        return cls(vals, window)

    @classmethod
    def from_field(cls, chart: CoordinateChart, u: AnalyticTestField) -> "BoundarySource":
        return cls.from_function(chart, lambda X: u(X)[0])


@dataclass
class SpaceTimeSolution:
    chart: CoordinateChart
    values: np.ndarray  # ([batch,] nt, *nx, N)
    metadata: dict = field(default_factory=dict)

    def level(self, k: int) -> np.ndarray:
        """Values on time level ``k`` (batch axis kept if present)."""
        return np.take(self.values, k, axis=self.values.ndim - self.chart.n - 2)


# ---------------------------------------------------------------------------
# coefficient evaluation
# ---------------------------------------------------------------------------


def exp_link(M: np.ndarray, h: float) -> np.ndarray:
    """``exp(h M)`` for a stack of small matrices; skew-Hermitian input uses ``eigh``."""
    N = M.shape[-1]
    if N == 1:
        return np.exp(h * M)
    herm = 1j * M
    if np.max(np.abs(herm - np.conj(np.swapaxes(herm, -1, -2))), initial=0.0) <= 1e-13 * max(
            1.0, np.max(np.abs(M), initial=0.0)):
        lam, U = np.linalg.eigh(0.5 * (herm + np.conj(np.swapaxes(herm, -1, -2))))
        ph = np.exp(-1j * h * lam)
        return (U * ph[..., None, :]) @ np.conj(np.swapaxes(U, -1, -2))
    return expm(h * M)


def _mv(M, u):
    return (M @ u[..., None])[..., 0]


def coordinate_speed(metric: MetricClosure, chart: CoordinateChart, samples: int = 5) -> float:
    """Largest coordinate light speed ``1/sqrt(lambda_min(g_0))`` over sampled slices."""
    best = 0.0
    for t in np.linspace(-chart.T, chart.T, samples):
        g0 = metric.spatial(chart.slice_points(t))[0]
        lam = np.linalg.eigvalsh(g0).min()
        best = max(best, 1.0 / np.sqrt(lam))
    return best


def stable_chart(metric: MetricClosure, T: float, lengths, n_x, cfl: float = 0.9) -> CoordinateChart:
    probe = CoordinateChart.uniform(T, lengths, n_x)
    return CoordinateChart.uniform(T, lengths, n_x, cfl=cfl, speed=coordinate_speed(metric, probe))


class _Coefficients:
    """Per-time evaluation of the discrete operator coefficients."""

    def __init__(self, metric: MetricClosure, B: ConnectionData, V: PotentialData,
                 chart: CoordinateChart):
        self.metric, self.B, self.V, self.chart = metric, B, V, chart
        self.xs = chart.spatial_nodes()
        self.n = chart.n
        self.mids = []
        for a in range(self.n):
            lo = [slice(None)] * self.n
            hi = [slice(None)] * self.n
            lo[a] = slice(0, -1)
            hi[a] = slice(1, None)
            self.mids.append(0.5 * (self.xs[tuple(lo)] + self.xs[tuple(hi)]))
        self._cross = None

    def _pts(self, t, xs):
        tt = np.full(xs.shape[:-1] + (1,), float(t))
        return np.concatenate([tt, xs], axis=-1)

    def weight(self, t):
        """``w = G / c`` at nodes."""
        X = self._pts(t, self.xs)
        md = metric_data(self.metric, X)
        return -md["ginv"][..., 0, 0] * md["G"]

    def time_link(self, t_mid, h):
        B0 = self.B(self._pts(t_mid, self.xs))[..., 0, :, :]
        return exp_link(B0, h)

    def slice_terms(self, t):
        """Nodal ``G``, ``V``, and per-axis midpoint stiffness and links at time ``t``."""
        X = self._pts(t, self.xs)
        md = metric_data(self.metric, X)
        G = md["G"]
        Vn = self.V(X)
        axes = []
        for a in range(self.n):
            Xm = self._pts(t, self.mids[a])
            mdm = metric_data(self.metric, Xm)
            K = mdm["G"] * mdm["ginv"][..., a + 1, a + 1]
            Bm = self.B(Xm)[..., a + 1, :, :]
            h = self.chart.h_x[a]
            axes.append((K, exp_link(Bm, h), exp_link(Bm, -h)))
        cross = None
        if self.n == 2:
            Kx = md["G"] * md["ginv"][..., 1, 2]
            if np.max(np.abs(Kx)) > 0:
                cross = Kx
        return G, Vn, axes, cross


def _shift_slices(n, a, lo, hi):
    idx = [slice(None)] * n
    idx[a] = slice(lo, hi)
    return (slice(None),) + tuple(idx)


def _spatial_operator(u, axes, cross, chart):
    """Divergence-form covariant stencil ``S(u)``; zero on boundary nodes."""
    n = chart.n
    S = np.zeros_like(u)
    for a in range(n):
        K, Xp, Xm = axes[a]
        h = chart.h_x[a]
        right = u[_shift_slices(n, a, 1, None)]
        left = u[_shift_slices(n, a, 0, -1)]
        flux = K[..., None] * (_mv(Xp, right) - left)  # at midpoint, in the left node's frame
        # S_i = flux_{i+1/2} - Xm_{i-1/2} flux_{i-1/2} for interior i
        inner = flux[_shift_slices(n, a, 1, None)] - _mv(Xm[_shift_slices(n, a, 0, -1)[1:]],
                                                          flux[_shift_slices(n, a, 0, -1)])
        S[_shift_slices(n, a, 1, -1)] += inner / (h * h)
    if cross is not None:
        for a, b in ((0, 1), (1, 0)):
            Db = _central(u, axes[b], chart.h_x[b], b, n)
            W = cross[..., None] * Db
            S += _central(W, axes[a], chart.h_x[a], a, n)
    # boundary nodes are pinned; keep them zero
    mask = chart.boundary_mask()
    S[:, mask] = 0.0
    return S


def _central(u, ax, h, a, n):
    """Covariant centred difference along spatial axis ``a`` (zero at its ends)."""
    _, Xp, Xm = ax
    out = np.zeros_like(u)
    right = u[_shift_slices(n, a, 2, None)]
    left = u[_shift_slices(n, a, 0, -2)]
    Xp_i = Xp[_shift_slices(n, a, 1, None)[1:]]
    Xm_i = Xm[_shift_slices(n, a, 0, -1)[1:]]
    out[_shift_slices(n, a, 1, -1)] = (_mv(Xp_i, right) - _mv(Xm_i, left)) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# forward solver
# ---------------------------------------------------------------------------


def _source_on_slice(F, chart, t, k):
    if F is None:
        return None
    if isinstance(F, AnalyticTestField):
        return F(chart.slice_points(t))[0]
    if callable(F):
        return np.asarray(F(chart.slice_points(t)), complex)
    F = np.asarray(F)
    return np.take(F, k, axis=F.ndim - chart.n - 2)


def solve_forward(metric: MetricClosure, B: ConnectionData, V: PotentialData,
                  chart: CoordinateChart, F=None, f: Optional[BoundarySource] = None,
                  cauchy: Optional[CauchyData] = None, direction: int = 1,
                  record: bool = True, monitor: Optional[Callable] = None,
                  stop_index: Optional[int] = None, cfl: float = 0.9,
                  compat_tol: float = 1e-8) -> SpaceTimeSolution:
    """March the covariant leapfrog scheme from the Cauchy slice.

    ``F`` is ``None``, a callable ``F(X) -> (..., N)`` or an array on the full
    grid.  ``f`` and the Cauchy data may carry a leading batch axis.  With
    ``direction=-1`` the march runs towards ``t = -T``.  ``monitor(k, u_k)`` is
    called on every computed level (``u_k`` has the batch axis).  With
    ``record=False`` only the last two levels are kept.
    """
    N = B.N
    nt = chart.shape[0]
    h = chart.h_t * (1 if direction > 0 else -1)
    speed = coordinate_speed(metric, chart)
    limit = cfl * min(chart.h_x) / (speed * np.sqrt(chart.n))
    if chart.h_t > limit * (1 + 1e-9):
        raise SolverError(f"CFL violated: h_t={chart.h_t:.4g} > {limit:.4g}")
    if cauchy is None:
        cauchy = CauchyData.zero(chart, N, -chart.T if direction > 0 else chart.T)
    try:
        k0 = chart.level_index(cauchy.t0)
    except GeometryError:
        raise SolverError("Cauchy slice is not a grid level") from None
    if f is None:
        f = BoundarySource.zero(chart, N)
    fv = np.asarray(f.values, complex)
    u0 = np.asarray(cauchy.u0, complex)
    u1 = np.asarray(cauchy.u1, complex)
    sp_nd = chart.n + 1  # spatial axes + fibre
    batched = fv.ndim == 4 or u0.ndim == sp_nd + 1
    batch = fv.shape[0] if fv.ndim == 4 else (u0.shape[0] if u0.ndim == sp_nd + 1 else 1)
    if fv.ndim == 3:
        fv = np.broadcast_to(fv, (batch,) + fv.shape)
    u0 = np.broadcast_to(u0, (batch,) + chart.spatial_shape + (N,)).astype(complex)
    u1 = np.broadcast_to(u1, (batch,) + chart.spatial_shape + (N,)).astype(complex)
    bidx = chart.boundary_indices()
    mask = chart.boundary_mask()
    flat = (batch, -1, N)

    mismatch = np.max(np.abs(u0.reshape(flat)[:, bidx] - fv[:, k0]), initial=0.0)
    scale = max(1.0, np.max(np.abs(fv), initial=0.0), np.max(np.abs(u0), initial=0.0))
    if mismatch > compat_tol * scale:
        raise SolverError(f"corner incompatibility {mismatch:.3e} between Cauchy and boundary data")

    coef = _Coefficients(metric, B, V, chart)
    end = (nt - 1 if direction > 0 else 0) if stop_index is None else int(stop_index)
    steps = abs(end - k0)
    out = None
    if record:
        out = np.full((batch, nt) + chart.spatial_shape + (N,), np.nan + 0j)
        out[:, k0] = u0

    def pin(u, k):
        u.reshape(flat)[:, bidx] = fv[:, k]
        return u

    t = chart.t
    cur = u0.copy()
    if monitor is not None:
        monitor(k0, cur)

    def rhs(u, k):
        G, Vn, axes, cross = coef.slice_terms(t[k])
        R = _spatial_operator(u, axes, cross, chart) - G[..., None] * _mv(Vn, u)
        Fk = _source_on_slice(F, chart, t[k], k)
        if Fk is not None:
            R = R + G[..., None] * Fk
        return R

    w_minus = coef.weight(t[k0] - h / 2)
    w_plus = coef.weight(t[k0] + h / 2)
    Ep = coef.time_link(t[k0] + h / 2, h)
    Em = coef.time_link(t[k0] - h / 2, -h)
    Ep_inv = coef.time_link(t[k0] + h / 2, -h)
    prev = None
    last_residual = 0.0
    if steps > 0:
        R = rhs(cur, k0)
        if cauchy.previous is not None:
            prev = np.broadcast_to(np.asarray(cauchy.previous, complex), cur.shape)
            y = (h * h * R + (w_plus + w_minus)[..., None] * cur
                 - w_minus[..., None] * _mv(Em, prev)) / w_plus[..., None]
        else:
            y = (h * h * R + (w_plus + w_minus)[..., None] * cur
                 + 2 * h * w_minus[..., None] * u1) / (w_plus + w_minus)[..., None]
        nxt = pin(_mv(Ep_inv, y), k0 + direction)
        prev, cur = cur, nxt
        k = k0 + direction
        if record:
            out[:, k] = cur
        if monitor is not None:
            monitor(k, cur)
        for step in range(1, steps):
            w_minus, Em = w_plus, coef.time_link(t[k] - h / 2, -h)
            w_plus = coef.weight(t[k] + h / 2)
            Ep_inv = coef.time_link(t[k] + h / 2, -h)
            R = rhs(cur, k)
            y = (h * h * R + (w_plus + w_minus)[..., None] * cur
                 - w_minus[..., None] * _mv(Em, prev)) / w_plus[..., None]
            nxt = pin(_mv(Ep_inv, y), k + direction)
            if step == steps - 1:
                Ep = coef.time_link(t[k] + h / 2, h)
                lhs = w_plus[..., None] * (_mv(Ep, nxt) - cur) - w_minus[..., None] * (cur - _mv(Em, prev))
                resid = (lhs - h * h * R)[:, ~mask]
                last_residual = float(np.max(np.abs(resid), initial=0.0))
            prev, cur = cur, nxt
            k += direction
            if record:
                out[:, k] = cur
            if monitor is not None:
                monitor(k, cur)
            if step % 64 == 0 and not np.all(np.isfinite(cur)):
                raise SolverError(f"non-finite state at t={t[k]:.4g} (step {step})")
    if not np.all(np.isfinite(cur)):
        raise SolverError("non-finite state at the final level")
    meta = {
        "scheme": SCHEME,
        "cfl": chart.cfl_ratio,
        "cfl_limit": limit / min(chart.h_x),
        "residual": last_residual,
        "direction": int(direction),
        "start_index": k0,
        "end_index": k0 + direction * steps,
        "batch": batch,
    }
    if record:
        vals = out if batched else out[0]
    else:
        vals = np.stack([prev, cur], axis=1) if prev is not None else cur[:, None]
        vals = vals if batched else vals[0]
    return SpaceTimeSolution(chart, vals, meta)


def scheme_hash() -> str:
    return hashlib.sha256(SCHEME.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# boundary traces
# ---------------------------------------------------------------------------


class NeumannTrace:
    r"""``nabla_nu u = nu^a (\partial_a u + B_a u)`` at boundary nodes.

    ``nu`` is the ``g``-unit outward normal; derivatives along the normal axis
    use three-point one-sided differences and tangential ones centred
    differences.
    """

    def __init__(self, metric: MetricClosure, B: ConnectionData, chart: CoordinateChart):
        self.metric, self.B, self.chart = metric, B, chart
        n = chart.n
        bidx = chart.boundary_indices()
        self.bidx = bidx
        shape = chart.spatial_shape
        multi = np.array(np.unravel_index(bidx, shape)).T  # (nb, n)
        self.normals = chart.boundary_normals()
        self.xb = chart.spatial_nodes().reshape(-1, n)[bidx]
        stencils = []
        for a in range(n):
            idx = np.zeros((bidx.size, 3), int)
            wts = np.zeros((bidx.size, 3))
            h = chart.h_x[a]
            for j, mi in enumerate(multi):
                i = mi[a]
                m = shape[a]
                if i == 0:
                    offs, w = (0, 1, 2), (-1.5, 2.0, -0.5)
                elif i == m - 1:
                    offs, w = (0, -1, -2), (1.5, -2.0, 0.5)
                else:
                    offs, w = (-1, 0, 1), (-0.5, 0.0, 0.5)
                for q, (o, ww) in enumerate(zip(offs, w)):
                    mm = mi.copy()
                    mm[a] = i + o
                    idx[j, q] = np.ravel_multi_index(tuple(mm), shape)
                    wts[j, q] = ww / h
            stencils.append((idx, wts))
        self.stencils = stencils

    def level(self, u_level: np.ndarray, t: float) -> np.ndarray:
        """Trace of one level ``(batch, *nx, N)`` -> ``(batch, nb, N)``."""
        n = self.chart.n
        b = u_level.shape[0]
        uf = u_level.reshape(b, -1, u_level.shape[-1])
        X = np.concatenate([np.full((self.xb.shape[0], 1), t), self.xb], axis=-1)
        md = metric_data(self.metric, X)
        gs = md["ginv"][:, 1:, 1:]
        nu = np.einsum("jab,jb->ja", gs, self.normals)
        nu = nu / np.sqrt(np.einsum("ja,ja->j", nu, self.normals))[:, None]
        Bv = self.B(X)[:, 1:, :, :]
        ub = uf[:, self.bidx]
        out = np.zeros_like(ub)
        for a in range(n):
            idx, wts = self.stencils[a]
            da = np.einsum("jq,bjqn->bjn", wts, uf[:, idx])
            cov = da + _mv(Bv[:, a], ub)
            out += nu[None, :, a, None] * cov
        return out


def neumann_trace(metric: MetricClosure, B: ConnectionData, u: SpaceTimeSolution) -> np.ndarray:
    """Neumann trace on every stored level: ``([batch,] nt, nb, N)``."""
    tr = NeumannTrace(metric, B, u.chart)
    vals = u.values
    batched = vals.ndim == u.chart.n + 3
    if not batched:
        vals = vals[None]
    out = np.stack([tr.level(vals[:, k], u.chart.t[k]) for k in range(vals.shape[1])], axis=1)
    return out if batched else out[0]


@dataclass
class DualityDefect:
    volume: complex  # int <u, H> dV_g
    boundary: complex  # int_Sigma G |n|_g <f, nabla_nu v> dS
    relative: float


def _boundary_weights(chart: CoordinateChart) -> np.ndarray:
    """Trapezoid weights on the boundary node list; corners keep their assigned face."""
    n = chart.n
    if n == 1:
        return np.ones(2)
    bidx = chart.boundary_indices()
    multi = np.array(np.unravel_index(bidx, chart.spatial_shape)).T
    normals = chart.boundary_normals()
    w = np.ones(bidx.size)
    for j, (mi, nrm) in enumerate(zip(multi, normals)):
        face = int(np.argmax(np.abs(nrm)))
        for a in range(n):
            if a == face:
                continue
            edge = mi[a] in (0, chart.shape[a + 1] - 1)
            w[j] *= chart.h_x[a] * (0.5 if edge else 1.0)
    return w


def duality_defect(metric: MetricClosure, B: ConnectionData, V: PotentialData,
                   chart: CoordinateChart, f: BoundarySource, H) -> DualityDefect:
    r"""Green pairing between a boundary-driven and a source-driven solution.

    ``u`` solves ``Pu = 0``, ``u|_Sigma = f`` from rest at ``t = -T``; ``v`` solves
    ``Pv = H``, ``v|_Sigma = 0`` backward from rest at ``t = T``.  Integrating by
    parts leaves ``int <u, H> dV_g + int_Sigma G |n|_g <f, nabla_nu v> dS = 0``.
    """
    N = B.N
    u = solve_forward(metric, B, V, chart, f=f)
    v = solve_forward(metric, B, V, chart, F=H, direction=-1)
    wt = np.full(chart.shape[0], chart.h_t)
    wt[0] = wt[-1] = chart.h_t / 2
    wq = _space_weights(chart)
    G = metric_data(metric, chart.nodes())["G"]
    Hv = np.asarray(H(chart.nodes()), complex) if callable(H) and not isinstance(H, AnalyticTestField) \
        else H(chart.nodes())[0]
    dens = np.sum(np.conj(Hv) * u.values, -1)
    volume = complex(np.sum(wt.reshape((-1,) + (1,) * chart.n) * wq * G * dens))
    trace = neumann_trace(metric, B, v)
    xb = chart.spatial_nodes().reshape(-1, chart.n)[chart.boundary_indices()]
    nrm = chart.boundary_normals()
    X = np.concatenate([np.broadcast_to(chart.t[:, None, None], (chart.shape[0], xb.shape[0], 1)),
                        np.broadcast_to(xb, (chart.shape[0],) + xb.shape)], axis=-1)
    md = metric_data(metric, X)
    nlen = np.sqrt(np.einsum("...a,...ab,...b->...", nrm, md["ginv"][..., 1:, 1:], nrm))
    fv = np.asarray(f.values, complex).reshape(chart.shape[0], -1, N)
    pair = np.sum(np.conj(trace) * fv, -1)
    boundary = complex(np.sum(wt[:, None] * _boundary_weights(chart) * md["G"] * nlen * pair))
    scale = max(abs(volume), abs(boundary), 1e-300)
    return DualityDefect(volume, boundary, abs(volume + boundary) / scale)


# ---------------------------------------------------------------------------
# DtN assembly
# ---------------------------------------------------------------------------


def smooth_bump(r: np.ndarray) -> np.ndarray:
    """``exp(1 - 1/(1 - r^2))`` on ``|r| < 1``, zero elsewhere (``C^infinity``, value 1 at 0)."""
    r = np.asarray(r, float)
    inside = np.abs(r) < 1
    q = np.where(inside, 1 - r * r, 1.0)
    return np.where(inside, np.exp(1 - 1 / q), 0.0)


def cubic_bspline(r: np.ndarray) -> np.ndarray:
    """Cardinal cubic B-spline on ``|r| < 2`` scaled to value 1 at 0 (``C^2``)."""
    a = np.abs(np.asarray(r, float))
    inner = 2 / 3 - a * a + a ** 3 / 2
    outer = (2 - np.minimum(a, 2)) ** 3 / 6
    return np.where(a < 1, inner, outer) * 1.5


TIME_PROFILES = {
    "bspline": lambda t, c, w: cubic_bspline(2 * (t - c) / w),
    "smooth": lambda t, c, w: smooth_bump((t - c) / w),
}


@dataclass
class BoundaryBasis:
    """Time bumps x boundary nodes x fibre vectors.

    ``width`` is the half-length of each bump's support. The ``bspline``
    profile is a cubic B-spline whose knot spacing is ``width / 2``, so
    neighbouring centres ``width / 2`` apart reproduce cubic polynomials.
    """

    chart: CoordinateChart
    centers: np.ndarray
    width: float
    N: int
    nodes: Optional[np.ndarray] = None  # positions into the boundary-node list
    profile: str = "bspline"

    def __post_init__(self):
        if self.profile not in TIME_PROFILES:
            raise SolverError(f"unknown time profile {self.profile!r}")
        self.centers = np.atleast_1d(np.asarray(self.centers, float))
        nb = self.chart.boundary_indices().size
        self.nodes = np.arange(nb) if self.nodes is None else np.asarray(self.nodes, int)
        if self.centers.size and np.min(self.centers) - self.width < -self.chart.T - 1e-12:
            raise SolverError("basis bumps must vanish near t = -T")

    @property
    def size(self) -> int:
        return self.centers.size * self.nodes.size * self.N

    def labels(self):
        return [(c, j, e) for c in self.centers for j in self.nodes for e in range(self.N)]

    def sources(self, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """Boundary values for elements ``start:stop``: ``(count, nt, nb, N)``."""
        stop = self.size if stop is None else min(stop, self.size)
        nb = self.chart.boundary_indices().size
        out = np.zeros((stop - start, self.chart.shape[0], nb, self.N), complex)
        t = self.chart.t
        shape = TIME_PROFILES[self.profile]
        for q, (c, j, e) in enumerate(self.labels()[start:stop]):
            out[q, :, j, e] = shape(t, c, self.width)
        return out

    def describe(self) -> dict:
        return {"centers": self.centers.tolist(), "width": self.width, "N": self.N,
                "nodes": self.nodes.tolist(), "profile": self.profile}


@dataclass
class DtNMatrix:
    matrix: np.ndarray  # (rows, size): quadrature-weighted Neumann traces
    basis: BoundaryBasis
    provenance: dict

    def galerkin(self) -> np.ndarray:
        """Projection ``F^H W Lambda F`` onto the span of the basis (weighted)."""
        src = self.basis.sources().reshape(self.basis.size, -1).T
        w = np.sqrt(self.basis.chart.h_t)
        return (w * src).conj().T @ self.matrix


def dtn_matrix(metric: MetricClosure, B: ConnectionData, V: PotentialData, basis: BoundaryBasis,
               chunk: int = 64) -> DtNMatrix:
    """Columns are ``sqrt(h_t)``-weighted Neumann traces of zero-data solutions."""
    chart = basis.chart
    nb = chart.boundary_indices().size
    rows = chart.shape[0] * nb * basis.N
    M = np.zeros((rows, basis.size), complex)
    tracer = NeumannTrace(metric, B, chart)
    for start in range(0, basis.size, chunk):
        src = basis.sources(start, start + chunk)
        traces = np.zeros((src.shape[0], chart.shape[0], nb, basis.N), complex)

        def mon(k, u):
            traces[:, k] = tracer.level(u, chart.t[k])

        solve_forward(metric, B, V, chart, f=BoundarySource(src), record=False, monitor=mon)
        M[:, start:start + src.shape[0]] = traces.reshape(src.shape[0], -1).T
    M *= np.sqrt(chart.h_t)
    prov = {"chart": {"T": chart.T, "lengths": chart.lengths, "shape": chart.shape},
            "basis": basis.describe(), "scheme": SCHEME, "connection": B.name, "potential": V.name}
    return DtNMatrix(M, basis, prov)


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------


@dataclass
class EnergyHistory:
    t: np.ndarray
    total: np.ndarray  # 1/2 (||u||^2 + || |g^00|^1/2 nabla_t u ||^2 + ||nabla_x u||^2)
    wave: np.ndarray  # same without the ||u||^2 term
    higher: dict  # k -> E_k(t)
    weights: np.ndarray  # spatial trapezoid weights


def _space_weights(chart):
    w = 1.0
    for a in range(chart.n):
        wa = np.full(chart.shape[a + 1], chart.h_x[a])
        wa[0] = wa[-1] = chart.h_x[a] / 2
        w = wa if a == 0 else np.multiply.outer(w, wa)
    return w


def _spatial_gradient(u, axes, chart):
    """Covariant second-order differences along each spatial axis, one-sided at the ends."""
    n = chart.n
    grads = []
    for a in range(n):
        g = _central(u, axes[a], chart.h_x[a], a, n)
        K, Xp, Xm = axes[a]
        h = chart.h_x[a]
        # ends: three-point one-sided with transported neighbours
        s0, s1, s2 = (_shift_slices(n, a, i, i + 1) for i in (0, 1, 2))
        X01 = Xp[_shift_slices(n, a, 0, 1)[1:]]
        X12 = Xp[_shift_slices(n, a, 1, 2)[1:]]
        g[s0] = (-3 * u[s0] + 4 * _mv(X01, u[s1]) - _mv(X01, _mv(X12, u[s2]))) / (2 * h)
        e0, e1, e2 = (_shift_slices(n, a, -1 - i, (-i) or None) for i in (0, 1, 2))
        Y01 = Xm[_shift_slices(n, a, -1, None)[1:]]
        Y12 = Xm[_shift_slices(n, a, -2, -1)[1:]]
        g[e0] = (3 * u[e0] - 4 * _mv(Y01, u[e1]) + _mv(Y01, _mv(Y12, u[e2]))) / (2 * h)
        grads.append(g)
    return grads


def energy_history(metric: MetricClosure, B: ConnectionData, u: SpaceTimeSolution,
                   orders: Sequence[int] = ()) -> EnergyHistory:
    r"""Discrete energy per level.

    Norms use the density ``G`` restricted to slices; ``|\nabla_x u|^2`` is
    ``g^{ab} <nabla_a u, nabla_b u>``.  ``orders`` lists ``k`` in ``{0,1,2}`` for
    ``E_k = ||nabla_t u||_{H^k}^2 + ||u||_{H^{k+1}}^2``.
    """
    chart = u.chart
    vals = u.values
    if vals.ndim == chart.n + 2:
        vals = vals[None]
    nt = chart.shape[0]
    coef = _Coefficients(metric, B, PotentialData.zero(B.N), chart)
    wq = _space_weights(chart)
    h = chart.h_t
    total = np.zeros(nt)
    wave = np.zeros(nt)
    higher = {k: np.zeros(nt) for k in orders}
    for k in range(nt):
        t = chart.t[k]
        cur = vals[:, k]
        if 0 < k < nt - 1:
            Ep = coef.time_link(t + h / 2, h)
            Em = coef.time_link(t - h / 2, -h)
            ut = (_mv(Ep, vals[:, k + 1]) - _mv(Em, vals[:, k - 1])) / (2 * h)
        elif k == 0:
            E1 = coef.time_link(t + h / 2, h)
            E2 = coef.time_link(t + 3 * h / 2, h)
            ut = (-3 * cur + 4 * _mv(E1, vals[:, 1]) - _mv(E1, _mv(E2, vals[:, 2]))) / (2 * h)
        else:
            E1 = coef.time_link(t - h / 2, -h)
            E2 = coef.time_link(t - 3 * h / 2, -h)
            ut = (3 * cur - 4 * _mv(E1, vals[:, k - 1]) + _mv(E1, _mv(E2, vals[:, k - 2]))) / (2 * h)
        X = chart.slice_points(t)
        md = metric_data(metric, X)
        G = md["G"]
        _, _, axes, _ = coef.slice_terms(t)
        grads = _spatial_gradient(cur, axes, chart)
        dens_u = np.sum(np.abs(cur) ** 2, -1)
        dens_t = -md["ginv"][..., 0, 0] * np.sum(np.abs(ut) ** 2, -1)
        dens_x = 0.0
        for a in range(chart.n):
            for b in range(chart.n):
                dens_x = dens_x + md["ginv"][..., a + 1, b + 1] * np.real(
                    np.sum(grads[a] * np.conj(grads[b]), -1))
        W = wq * G
        total[k] = 0.5 * np.sum(W * (dens_u + dens_t + dens_x))
        wave[k] = 0.5 * np.sum(W * (dens_t + dens_x))
        for order in orders:
            higher[order][k] = _sobolev_sq(ut, axes, chart, W, order) + \
                _sobolev_sq(cur, axes, chart, W, order + 1)
    return EnergyHistory(chart.t.copy(), total, wave, higher, wq)


def _sobolev_sq(v, axes, chart, W, k):
    """``sum_{|alpha| <= k} ||nabla_x^alpha v||^2`` with iterated covariant differences."""
    total = np.sum(W * np.sum(np.abs(v) ** 2, -1))
    layer = [v]
    for _ in range(k):
        nxt = []
        for w in layer:
            nxt.extend(_spatial_gradient(w, axes, chart))
        layer = nxt
        total += sum(np.sum(W * np.sum(np.abs(w) ** 2, -1)) for w in layer)
    return float(total)


# ---------------------------------------------------------------------------
# control
# ---------------------------------------------------------------------------


@dataclass
class ControlResult:
    source: BoundarySource
    coefficients: np.ndarray
    residual: float  # relative, in the weighted (u, nabla_t u) norm
    sigma_min: float
    singular_values: np.ndarray
    flagged: bool
    misfit: np.ndarray  # u-part of T c - target on the slice
    epsilon: float


def _slice_state(u_prev, u_cur, u_next, coef, t, h, wq):
    Ep = coef.time_link(t + h / 2, h)
    Em = coef.time_link(t - h / 2, -h)
    ut = (_mv(Ep, u_next) - _mv(Em, u_prev)) / (2 * h)
    sw = np.sqrt(wq)[..., None]
    return u_cur * sw, ut * sw


def cauchy_at(metric: MetricClosure, B: ConnectionData, u: SpaceTimeSolution, t: float) -> CauchyData:
    """``(u, nabla_t u)`` on an interior level of a recorded solution (centred in time)."""
    chart = u.chart
    k = chart.level_index(t)
    if not 0 < k < chart.shape[0] - 1:
        raise SolverError("cauchy_at needs an interior time level")
    coef = _Coefficients(metric, B, PotentialData.zero(B.N), chart)
    h = chart.h_t
    Ep = coef.time_link(t + h / 2, h)
    Em = coef.time_link(t - h / 2, -h)
    ut = (_mv(Ep, u.level(k + 1)) - _mv(Em, u.level(k - 1))) / (2 * h)
    return CauchyData(u.level(k).copy(), ut, chart.t[k])


def control_map(metric, B, V, chart: CoordinateChart, basis: BoundaryBasis, t1: float,
                chunk: int = 64):
    """Matrix from basis coefficients to weighted ``(u, nabla_t u)`` on the slice ``t1``."""
    try:
        k1 = chart.level_index(t1)
    except GeometryError as exc:
        raise SolverError(str(exc)) from None
    if not 0 < k1 < chart.shape[0] - 1:
        raise SolverError("target slice must be an interior grid level")
    coef = _Coefficients(metric, B, V, chart)
    wq = _space_weights(chart)
    cols = []
    for start in range(0, basis.size, chunk):
        src = basis.sources(start, start + chunk)
        keep = {}

        def mon(k, u):
            if k1 - 1 <= k <= k1 + 1:
                keep[k] = u.copy()

        solve_forward(metric, B, V, chart, f=BoundarySource(src), record=False, monitor=mon,
                      stop_index=k1 + 1)
        a, b = _slice_state(keep[k1 - 1], keep[k1], keep[k1 + 1], coef, chart.t[k1], chart.h_t, wq)
        cols.append(np.concatenate([a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)], axis=1))
    return np.concatenate(cols, axis=0).T, k1


def _discrepancy_epsilon(U: np.ndarray, s: np.ndarray, y: np.ndarray, target: float) -> float:
    """``eps`` with relative Tikhonov residual equal to ``target`` (monotone in ``eps``)."""
    beta = np.abs(U.conj().T @ y) ** 2
    ynorm2 = float(np.vdot(y, y).real)
    perp = max(ynorm2 - beta.sum(), 0.0)

    def excess(log_eps):
        e = np.exp(log_eps)
        return np.sqrt((np.sum((e / (s * s + e)) ** 2 * beta) + perp) / ynorm2) - target

    lo, hi = np.log(1e-16 * s[0] ** 2), np.log(1e4 * s[0] ** 2)
    if excess(lo) >= 0:
        return float(np.exp(lo))
    if excess(hi) <= 0:
        return float(np.exp(hi))
    return float(np.exp(brentq(excess, lo, hi, xtol=1e-10)))


def control_solve(metric: MetricClosure, B: ConnectionData, V: PotentialData,
                  chart: CoordinateChart, target: CauchyData, window: tuple[float, float],
                  n_bumps: int = 8, width: Optional[float] = None,
                  epsilon: Optional[float] = None, basis: Optional[BoundaryBasis] = None,
                  noise_level: Optional[float] = None, tau: float = 1.1) -> ControlResult:
    r"""Tikhonov least squares ``min |T c - y|^2 + eps |c|^2`` over window bumps.

    The default basis is ``n_bumps`` cubic B-splines on a uniform knot grid
    whose supports lie inside ``window``.  ``eps`` defaults to ``1e-8 |T|_2^2``.
    Given a relative ``noise_level`` delta instead, ``eps`` follows the
    discrepancy principle ``|T c - y| = tau * delta * |y|``.
    """
    if epsilon is not None and noise_level is not None:
        raise SolverError("give either epsilon or noise_level, not both")
    ta, tb = window
    if basis is None:
        if width is None:
            width = 2 * (tb - ta) / (n_bumps + 3)
        centers = np.linspace(ta + width, tb - width, n_bumps)
        basis = BoundaryBasis(chart, centers, width, B.N)
    Tm, k1 = control_map(metric, B, V, chart, basis, target.t0)
    wq = _space_weights(chart)
    sw = np.sqrt(wq)[..., None]
    y = np.concatenate([(np.asarray(target.u0) * sw).ravel(), (np.asarray(target.u1) * sw).ravel()])
    U, s, Vh = np.linalg.svd(Tm, full_matrices=False)
    eps = 1e-8 * s[0] ** 2 if epsilon is None else float(epsilon)
    if noise_level is not None and s[0] > 0 and np.any(y):
        eps = _discrepancy_epsilon(U, s, y, tau * float(noise_level))
    if s[0] == 0 or not np.any(y):
        c = np.zeros(basis.size, complex)
    else:
        c = Vh.conj().T @ ((s / (s * s + eps)) * (U.conj().T @ y))
    fit = Tm @ c
    ynorm = np.linalg.norm(y)
    res = float(np.linalg.norm(fit - y) / ynorm) if ynorm > 0 else float(np.linalg.norm(fit))
    half = fit.size // 2
    misfit = ((fit - y)[:half].reshape(chart.spatial_shape + (B.N,))) / sw
    src = np.tensordot(c, basis.sources(), axes=(0, 0))
    smin = float(s[-1]) if s.size else 0.0
    return ControlResult(BoundarySource(src, (ta, tb)), c, res, smin, s, smin < 1e-12, misfit, eps)


# ---------------------------------------------------------------------------
# finite speed audit
# ---------------------------------------------------------------------------


@dataclass
class LeakageReport:
    t: np.ndarray
    leakage: np.ndarray  # mass outside the inflated cone / total mass
    mass: np.ndarray

    @property
    def max_leakage(self) -> float:
        return float(np.max(self.leakage, initial=0.0))


def speed_audit(metric: MetricClosure, B: ConnectionData, V: PotentialData, chart: CoordinateChart,
                cauchy: CauchyData, center: Sequence[float], radius: float,
                inflate_cells: int = 3) -> LeakageReport:
    """Mass fraction outside ``|x - center| <= radius + speed (t - t0) + inflate * h``."""
    speed = coordinate_speed(metric, chart)
    xs = chart.spatial_nodes()
    dist = np.linalg.norm(xs - np.asarray(center, float), axis=-1)
    wq = _space_weights(chart)
    hmax = max(chart.h_x)
    ts, leak, mass = [], [], []

    def mon(k, u):
        t = chart.t[k]
        md = metric_data(metric, chart.slice_points(t))
        dens = wq * md["G"] * np.sum(np.abs(u[0]) ** 2, -1)
        tot = float(np.sum(dens))
        cone = dist <= radius + speed * abs(t - cauchy.t0) + inflate_cells * hmax
        out = float(np.sum(dens[~cone]))
        ts.append(t)
        mass.append(tot)
        leak.append(out / tot if tot > 0 else 0.0)

    solve_forward(metric, B, V, chart, cauchy=cauchy, record=False, monitor=mon)
    return LeakageReport(np.array(ts), np.array(leak), np.array(mass))


def manufactured_problem(metric, B, V, chart, u: AnalyticTestField, t0: Optional[float] = None):
    """Source, boundary data and Cauchy data reproducing the analytic field ``u``."""
    t0 = -chart.T if t0 is None else t0

    def F(X):
        return apply_P(metric, B, V, u, X)

    return F, BoundarySource.from_field(chart, u), CauchyData.from_field(chart, B, u, t0)


def standing_wave(chart: CoordinateChart, N: int = 1) -> AnalyticTestField:
    """``cos(pi t) sin(pi x) e_1`` on ``[0, 1]``."""
    amp = np.zeros(N)
    amp[0] = 1.0
    s = _sine_x()
    c = _cosine_t()
    return AnalyticTestField.from_scalar(s * c, amp)


def _sine_x():
    def fn(X):
        x = X[..., 1]
        v = np.sin(np.pi * x)
        d1 = np.zeros(X.shape[:-1] + (2,))
        d1[..., 1] = np.pi * np.cos(np.pi * x)
        d2 = np.zeros(X.shape[:-1] + (2, 2))
        d2[..., 1, 1] = -np.pi ** 2 * v
        return v.astype(complex), d1.astype(complex), d2.astype(complex)

    return ScalarProfile(fn, 2)


def _cosine_t():
    def fn(X):
        t = X[..., 0]
        v = np.cos(np.pi * t)
        d1 = np.zeros(X.shape[:-1] + (2,))
        d1[..., 0] = -np.pi * np.sin(np.pi * t)
        d2 = np.zeros(X.shape[:-1] + (2, 2))
        d2[..., 0, 0] = -np.pi ** 2 * v
        return v.astype(complex), d1.astype(complex), d2.astype(complex)

    return ScalarProfile(fn, 2)
