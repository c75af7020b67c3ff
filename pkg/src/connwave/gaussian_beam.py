"""Gaussian beams ``v = chi(y') exp(i lam phi) a`` concentrated on null geodesics.

The beam lives in Fermi coordinates ``(s, y_1, ..., y_n)`` along a null
geodesic, where the metric takes the normal form ``2 ds dy_1 + sum_j dy_j^2``
on the curve.  Two modes are supported:

``flat``
    Minkowski background.  Fermi coordinates are affine, every metric jet is
    exact, and phase and amplitude jets of any order ``J`` are integrated as
    truncated polynomials in ``y'``.
``general``
    Any closure with second derivatives.  The frame is parallel transported,
    the quadratic phase solves the curvature Riccati equation and only the
    leading amplitude ``a_{0,0}`` is carried (``J = 2``).

Amplitude transport uses the full first-order balance
``2 C(dphi, nabla a_k) - (Box phi) a_k = -i P a_{k-1}``, which follows from
expanding ``P(e^{i lam phi} a)`` in powers of ``lam``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bundle import AnalyticTestField, ConnectionData, PotentialData, apply_P
from .causal import GeodesicPath, trace_null_geodesic
from .geometry import CoordinateChart, GeometryError, MetricClosure, metric_data, riemann_batch
from .jets import JetSpace, jet_space
from .metrics import Minkowski
from .wave_solver import BoundarySource, solve_forward


class BeamError(RuntimeError):
    """Beam construction or evaluation failed (carries a witness in the message)."""


def normal_form(n: int) -> np.ndarray:
    """Matrix of ``2 ds dy_1 + sum_{j>=2} dy_j^2`` in the order ``(s, y_1, ..., y_n)``."""
    eta = np.zeros((n + 1, n + 1))
    eta[0, 1] = eta[1, 0] = 1.0
    for j in range(2, n + 1):
        eta[j, j] = 1.0
    return eta


def _transverse_projector(n: int) -> np.ndarray:
    P = np.eye(n)
    P[0, 0] = 0.0
    return P


# ---------------------------------------------------------------------------
# sampled curves
# ---------------------------------------------------------------------------


def _hermite(grid: np.ndarray, F: np.ndarray, dF: np.ndarray, s, deriv: int = 0) -> np.ndarray:
    """Cubic Hermite interpolant of samples ``F`` with slopes ``dF`` on a uniform grid."""
    s = np.asarray(s, float)
    h = grid[1] - grid[0]
    idx = np.clip(np.floor((s - grid[0]) / h).astype(int), 0, grid.size - 2)
    tau = (s - grid[idx]) / h
    if deriv == 0:
        b = (2 * tau**3 - 3 * tau**2 + 1, h * (tau**3 - 2 * tau**2 + tau),
             -2 * tau**3 + 3 * tau**2, h * (tau**3 - tau**2))
    elif deriv == 1:
        b = ((6 * tau**2 - 6 * tau) / h, 3 * tau**2 - 4 * tau + 1,
             (-6 * tau**2 + 6 * tau) / h, 3 * tau**2 - 2 * tau)
    else:
        b = ((12 * tau - 6) / h**2, (6 * tau - 4) / h, (-12 * tau + 6) / h**2, (6 * tau - 2) / h)
    extra = (1,) * (F.ndim - 1)
    b = [c.reshape(c.shape + extra) for c in b]
    return b[0] * F[idx] + b[1] * dF[idx] + b[2] * F[idx + 1] + b[3] * dF[idx + 1]


def _fd_derivative(F: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order central differences along axis 0 (one-sided rows left as NaN)."""
    out = np.full_like(F, np.nan)
    out[2:-2] = (F[:-4] - 8 * F[1:-3] + 8 * F[3:-1] - F[4:]) / (12 * h)
    return out


def _local_samples(rhs, s: float, y, eta: float, count: int = 2):
    """States at ``s + j eta`` for ``|j| <= count`` by short RK4 runs from ``(s, y)``."""
    out = {0: y}
    for direction in (1, -1):
        cur, h = y, direction * eta
        for j in range(1, count + 1):
            t = s + (j - 1) * h
            k1 = rhs(t, cur)
            k2 = rhs(t + h / 2, cur + h / 2 * k1)
            k3 = rhs(t + h / 2, cur + h / 2 * k2)
            k4 = rhs(t + h, cur + h * k3)
            cur = cur + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            out[direction * j] = cur
    return out


def _local_slope(rhs, s: float, y, eta: float = 1e-3):
    """Fourth-order central difference of the flow through ``(s, y)``."""
    q = _local_samples(rhs, s, y, eta)
    return (q[-2] - 8 * q[-1] + 8 * q[1] - q[2]) / (12 * eta)


def _rk4_march(rhs, y0, grid: np.ndarray, k0: int, monitor=None):
    """Integrate ``y' = rhs(s, y)`` from ``grid[k0]`` to both ends; returns samples and slopes."""
    ns = grid.size
    ys = [None] * ns
    ds = [None] * ns
    ys[k0] = y0
    ds[k0] = rhs(grid[k0], y0)
    if monitor is not None:
        monitor(grid[k0], y0)
    for direction in (1, -1):
        k = k0
        y = y0
        while 0 <= k + direction < ns:
            s, h = grid[k], grid[k + direction] - grid[k]
            k1 = ds[k] if ds[k] is not None else rhs(s, y)
            k2 = rhs(s + h / 2, y + h / 2 * k1)
            k3 = rhs(s + h / 2, y + h / 2 * k2)
            k4 = rhs(s + h, y + h * k3)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            k += direction
            ys[k] = y
            ds[k] = rhs(grid[k], y)
            if monitor is not None:
                monitor(grid[k], y)
    return np.array(ys), np.array(ds)


def beam_geodesic(metric: MetricClosure, p, direction, chart: CoordinateChart,
                  step: float = 1e-3) -> GeodesicPath:
    """Future-directed null geodesic through ``p`` with spatial direction ``direction``,
    traced both ways to the chart boundary; ``s = 0`` at ``p``."""
    p = np.asarray(p, float)
    d = np.asarray(direction, float)
    g = metric_data(metric, p[None])["g"][0]
    # solve g(v, v) = 0 for the time component
    a, b, c = g[0, 0], 2 * g[0, 1:] @ d, d @ g[1:, 1:] @ d
    disc = b * b - 4 * a * c
    if disc < 0 or a >= 0:
        raise BeamError("no null vector with the requested spatial direction")
    roots = [(-b + sgn * math.sqrt(disc)) / (2 * a) for sgn in (1, -1)]
    vt = max(roots)
    if vt <= 0:
        raise BeamError("no future-directed null vector with the requested spatial direction")
    v = np.concatenate([[vt], d])
    fwd = trace_null_geodesic(metric, p, v, chart, step)
    back = trace_null_geodesic(metric, p, -v, chart, step)
    s = np.concatenate([-back.s[:0:-1], fwd.s])
    pts = np.concatenate([back.points[:0:-1], fwd.points])
    vel = np.concatenate([-back.velocities[:0:-1], fwd.velocities])
    return GeodesicPath(s, pts, vel, "lightlike", True, fwd.exit_point, fwd.exit_face,
                        fwd.tangency_order, max(fwd.norm_drift, back.norm_drift),
                        fwd.warnings + back.warnings)


# ---------------------------------------------------------------------------
# Fermi charts
# ---------------------------------------------------------------------------


def _adapted_frame(g: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Columns ``(v, E_1, ..., E_n)`` with Gram matrix :func:`normal_form`."""
    m = v.size
    n = m - 1
    ip = lambda x, y: x @ g @ y  # noqa: E731
    u = np.zeros(m)
    u[0] = 1.0
    u = u / math.sqrt(-ip(u, u))
    alpha = -ip(v, u)
    if alpha <= 0:
        raise BeamError("geodesic is not future-directed")
    e = v / alpha - u
    E1 = (e - u) / (2 * alpha)
    cols = [v, E1]
    rest = []
    for k in range(1, m):
        w = np.zeros(m)
        w[k] = 1.0
        w = w + ip(w, u) * u - ip(w, e) * e
        for q in rest:
            w = w - ip(w, q) * q
        nrm = ip(w, w)
        if nrm > 1e-10 and len(rest) < n - 1:
            rest.append(w / math.sqrt(nrm))
    return np.stack(cols + rest, axis=1)


def _christoffel_batch(metric, X):
    return metric_data(metric, X, order=1)["christoffel"]


def _exp_with_jacobian(metric: MetricClosure, X0, V0, JX0, JV0, steps: int = 40):
    """Geodesic flow to parameter 1 together with its variational (Jacobi) fields."""
    def rhs(X, V, JX, JV):
        d = metric_data(metric, X, order=2)
        G, dG = d["christoffel"], d["dchristoffel"]
        A = -np.einsum("pkij,pi,pj->pk", G, V, V)
        JA = (-np.einsum("pmkij,pmq,pi,pj->pkq", dG, JX, V, V)
              - 2 * np.einsum("pkij,pi,pjq->pkq", G, V, JV))
        return V, A, JV, JA

    state = [np.array(X0, float), np.array(V0, float), np.array(JX0, float), np.array(JV0, float)]
    h = 1.0 / steps
    for _ in range(steps):
        k1 = rhs(*state)
        k2 = rhs(*[y + h / 2 * k for y, k in zip(state, k1)])
        k3 = rhs(*[y + h / 2 * k for y, k in zip(state, k2)])
        k4 = rhs(*[y + h * k for y, k in zip(state, k3)])
        state = [y + h / 6 * (a + 2 * b + 2 * c + d) for y, a, b, c, d in zip(state, k1, k2, k3, k4)]
    return state[0], state[2]


@dataclass
class FermiChart:
    """Fermi coordinates along a sampled null geodesic.

    ``frames[k]`` has columns ``(gamma'(s_k), E_1, ..., E_n)``; ``dframes`` holds
    their ``s``-derivatives (``-Gamma(gamma', .)`` by parallel transport).
    """

    metric: MetricClosure
    path: GeodesicPath
    delta: float
    s: np.ndarray
    points: np.ndarray
    frames: np.ndarray
    dframes: np.ndarray
    s0: float
    mode: str
    defects: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.points.shape[1] - 1

    @property
    def h(self) -> float:
        return float(self.s[1] - self.s[0])

    @property
    def k0(self) -> int:
        return int(np.argmin(np.abs(self.s - self.s0)))

    def base(self, s, deriv: int = 0):
        """Point and frame at parameters ``s`` (Hermite interpolation between samples)."""
        if deriv == 0:
            x = _hermite(self.s, self.points, self.frames[:, :, 0], s)
        else:
            x = _hermite(self.s, self.points, self.frames[:, :, 0], s, 1)
        F = _hermite(self.s, self.frames, self.dframes, s, deriv)
        return x, F

    # flat coordinates ----------------------------------------------------
    def _affine(self):
        F = self.frames[self.k0]
        return self.points[self.k0], F, np.linalg.inv(F)

    def to_chart(self, s, y, jacobian: bool = False):
        """Chart points of Fermi coordinates ``(s, y)``; optionally ``d x / d(s, y)``."""
        s = np.asarray(s, float)
        y = np.asarray(y, float)
        if self.mode == "flat":
            x0, F, _ = self._affine()
            z = np.concatenate([(s - self.s[self.k0])[..., None], y], axis=-1)
            X = x0 + z @ F.T
            if jacobian:
                return X, np.broadcast_to(F, X.shape[:-1] + F.shape).copy()
            return X
        shape = s.shape
        s, y = s.reshape(-1), y.reshape(-1, self.n)
        x, F = self.base(s)
        _, dF = self.base(s, 1)
        V0 = np.einsum("pia,pa->pi", F[:, :, 1:], y)
        m = self.n + 1
        JX0 = np.zeros((s.size, m, m))
        JV0 = np.zeros((s.size, m, m))
        JX0[:, :, 0] = F[:, :, 0]
        JV0[:, :, 0] = np.einsum("pia,pa->pi", dF[:, :, 1:], y)
        JV0[:, :, 1:] = F[:, :, 1:]
        X, J = _exp_with_jacobian(self.metric, x, V0, JX0, JV0)
        X = X.reshape(shape + (m,))
        if jacobian:
            return X, J.reshape(shape + (m, m))
        return X

    def to_fermi(self, X, iterations: int = 8, tol: float = 1e-10):
        """Fermi coordinates ``(s, y)`` of chart points; ``ok`` flags converged nodes."""
        X = np.asarray(X, float)
        shape = X.shape[:-1]
        m = self.n + 1
        Xf = X.reshape(-1, m)
        if self.mode == "flat":
            x0, _, Finv = self._affine()
            z = (Xf - x0) @ Finv.T
            z[:, 0] += self.s[self.k0]
            return z[:, 0].reshape(shape), z[:, 1:].reshape(shape + (self.n,)), np.ones(shape, bool)
        # nearest sample, then Newton on the exponential map
        d = np.linalg.norm(Xf[:, None, :] - self.points[None, :, :], axis=-1)
        k = np.argmin(d, axis=1)
        z = np.einsum("pij,pj->pi", np.linalg.inv(self.frames[k]), Xf - self.points[k])
        s = self.s[k] + z[:, 0]
        y = z[:, 1:]
        err = np.full(len(Xf), np.inf)
        for _ in range(iterations):
            Xc, J = self.to_chart(s, y, jacobian=True)
            r = Xf - Xc
            err = np.linalg.norm(r, axis=-1)
            dz = np.linalg.solve(J, r[..., None])[..., 0]
            s = s + dz[:, 0]
            y = y + dz[:, 1:]
        ok = (err < tol) & (s >= self.s[0]) & (s <= self.s[-1])
        return s.reshape(shape), y.reshape(shape + (self.n,)), ok.reshape(shape)

    def inverse_metric(self, s, y) -> np.ndarray:
        """``g^{ab}`` in Fermi coordinates at ``(s, y)``."""
        X, J = self.to_chart(s, y, jacobian=True)
        g = metric_data(self.metric, X)["g"]
        return np.linalg.inv(np.einsum("...ia,...ij,...jb->...ab", J, g, J))


def _verify_chart(chart: FermiChart, probes: int = 5, h: float = 1e-2) -> dict:
    n = chart.n
    g = metric_data(chart.metric, chart.points)["g"]
    gram = np.einsum("kia,kij,kjb->kab", chart.frames, g, chart.frames)
    nf = float(np.max(np.abs(gram - normal_form(n))))
    lo, hi = chart.s[0] + 0.1 * (chart.s[-1] - chart.s[0]), chart.s[-1] - 0.1 * (chart.s[-1] - chart.s[0])
    ss = np.linspace(lo, hi, probes)
    first = 0.0
    jac_ratio = np.inf
    for s in ss:
        for a in range(n):
            e = np.zeros(n)
            e[a] = 1.0
            steps = np.array([-2, -1, 1, 2])[:, None] * h * e
            Ginv = chart.inverse_metric(np.full(4, s), steps)
            d = (Ginv[0] - 8 * Ginv[1] + 8 * Ginv[2] - Ginv[3]) / (12 * h)
            first = max(first, float(np.max(np.abs(d))))
            rim = np.array([-1.0, 1.0])[:, None] * chart.delta * e
            _, J = chart.to_chart(np.full(2, s), rim, jacobian=True)
            _, J0 = chart.to_chart(np.array([s]), np.zeros((1, n)), jacobian=True)
            jac_ratio = min(jac_ratio, float(np.min(np.linalg.det(J) / np.linalg.det(J0[0]))))
    return {"normal_form": nf, "first_derivative": first, "tube_jacobian_ratio": jac_ratio}


def build_fermi_chart(metric: MetricClosure, path: GeodesicPath, delta: float,
                      s0: float = 0.0, step: float = 1e-2, margin: Optional[float] = None,
                      mode: str = "auto") -> FermiChart:
    """Fermi chart along ``path``, sampled every ``step`` and extended ``margin`` past its ends.

    The frame is adapted at ``gamma(s0)`` and parallel transported; the
    normal form on the curve, the vanishing of first ``y``-derivatives of
    ``g^{ab}`` and the non-degeneracy of the map on the ``delta``-tube are
    checked and stored in ``defects``.
    """
    if path.causal_type != "lightlike":
        raise BeamError(f"base curve is {path.causal_type}, not null")
    if mode == "auto":
        mode = "flat" if isinstance(metric, Minkowski) else "general"
    if mode not in ("flat", "general"):
        raise BeamError(f"unknown chart mode {mode!r}")
    margin = 2 * delta if margin is None else margin
    a, b = path.s[0] - margin, path.s[-1] + margin
    k_lo, k_hi = int(math.floor((a - s0) / step)), int(math.ceil((b - s0) / step))
    grid = s0 + step * np.arange(k_lo, k_hi + 1)
    k0 = -k_lo
    i0 = int(np.argmin(np.abs(path.s - s0)))
    p, v = path.points[i0], path.velocities[i0]
    if abs(path.s[i0] - s0) > 1e-12:
        raise BeamError("s0 must be a sample of the base path")
    g = metric_data(metric, p[None])["g"][0]
    F0 = _adapted_frame(g, v)
    m = p.size
    if mode == "flat":
        pts = p + (grid - s0)[:, None] * v
        frames = np.broadcast_to(F0, (grid.size, m, m)).copy()
        dframes = np.zeros_like(frames)
    else:
        def rhs(s, y):
            x, F = y[:m], y[m:].reshape(m, m)
            G = _christoffel_batch(metric, x[None])[0]
            dF = -np.einsum("kij,i,ja->ka", G, F[:, 0], F)
            return np.concatenate([F[:, 0], dF.ravel()])

        ys, ds = _rk4_march(rhs, np.concatenate([p, F0.ravel()]), grid, k0)
        pts = ys[:, :m]
        frames = ys[:, m:].reshape(-1, m, m)
        dframes = ds[:, m:].reshape(-1, m, m)
    chart = FermiChart(metric, path, float(delta), grid, pts, frames, dframes, float(s0), mode)
    chart.defects = _verify_chart(chart)
    if chart.defects["tube_jacobian_ratio"] < 0.1:
        raise BeamError(f"Fermi map degenerates inside the delta-tube "
                        f"(jacobian ratio {chart.defects['tube_jacobian_ratio']:.3g}); reduce delta")
    return chart


# ---------------------------------------------------------------------------
# phase
# ---------------------------------------------------------------------------


@dataclass
class PhaseJet:
    """``phi = y_1 + psi(s, y')`` with ``psi`` of degrees ``2..J`` sampled on the chart grid."""

    J: int
    space: JetSpace
    s: np.ndarray
    psi: np.ndarray
    dpsi: np.ndarray
    H: np.ndarray
    min_imag_eig: np.ndarray
    mode: str
    rhs: Optional[object] = field(default=None, repr=False)

    def coefficients(self, s, deriv: int = 0) -> np.ndarray:
        return _hermite(self.s, self.psi, self.dpsi, s, deriv)

    def restrict(self, J: int) -> "PhaseJet":
        """Truncation to order ``J`` (graded monomial order makes this a slice)."""
        if J == self.J:
            return self
        sp = jet_space(self.space.nvars, J)
        return PhaseJet(J, sp, self.s, self.psi[:, :sp.size], self.dpsi[:, :sp.size], self.H,
                        self.min_imag_eig, self.mode)

    def full(self, psi: np.ndarray) -> np.ndarray:
        return psi + self.space.variable(0)

    def evaluate(self, s, y) -> np.ndarray:
        c = self.coefficients(np.asarray(s, float))
        return np.einsum("...c,...c->...", self.space.monomials(np.asarray(y, float)), c) \
            + np.asarray(y)[..., 0]


def _phase_rhs_flat(sp: JetSpace, n: int):
    y1 = sp.variable(0)

    def rhs(psi):
        phi = psi + y1
        grads = [sp.diff(phi, v) for v in range(n)]
        Q = sp.zeros()
        for v in range(1, n):
            Q = Q + sp.mul(grads[v], grads[v])
        return -0.5 * sp.mul(Q, sp.reciprocal(grads[0]))
    return rhs


def solve_phase_jets(chart: FermiChart, J: int, c_min: float = 0.0) -> PhaseJet:
    """Eikonal jets up to order ``J`` with ``H(s0) = i Id``; aborts if ``Im H`` loses positivity."""
    if J < 2:
        raise BeamError("phase jets need J >= 2")
    n = chart.n
    if chart.mode == "general" and J != 2:
        raise BeamError("general metrics support J = 2 only")
    sp = jet_space(n, J)
    eigs = {}

    def monitor(s, psi):
        H = sp.hessian(psi)
        lam = float(np.linalg.eigvalsh(H.imag).min())
        eigs[s] = lam
        if not lam > c_min:
            raise BeamError(f"Im H lost positivity at s={s:.6g} (min eigenvalue {lam:.3g})")

    psi0 = sp.quadratic(1j * np.eye(n))
    if chart.mode == "flat":
        f = _phase_rhs_flat(sp, n)

        def rhs(s, psi):
            return f(psi)

        psi, dpsi = _rk4_march(rhs, psi0, chart.s, chart.k0, monitor)
    else:
        P = _transverse_projector(n)

        def curvature(s):
            x, F = chart.base(np.array([s]))
            R = riemann_batch(chart.metric, x)[0]
            v = F[0, :, 0]
            return np.einsum("ijkl,i,ja,k,lb->ab", R, v, F[0, :, 1:], v, F[0, :, 1:])

        def rhs(s, psi):
            H = sp.hessian(psi)
            return sp.quadratic(-H @ P @ H - curvature(s))

        psi, dpsi = _rk4_march(rhs, psi0, chart.s, chart.k0, monitor)
    H = np.array([sp.hessian(p) for p in psi])
    mins = np.array([eigs[s] for s in chart.s])
    return PhaseJet(J, sp, chart.s.copy(), psi, dpsi, H, mins, chart.mode, rhs)


def eikonal_defect(chart: FermiChart, phase: PhaseJet, samples: int = 7, radius: float = 4e-3) -> float:
    """Largest Taylor coefficient of ``<dphi, dphi>`` through order ``J`` along the curve.

    ``s``-derivatives come from finite differences of the stored samples.  In
    general mode the pulled-back metric is evaluated through the exponential
    map and the coefficients are read off by a least-squares fit on a small ball.
    """
    sp, n = phase.space, chart.n
    if chart.mode == "flat":
        worst = 0.0
        for k in np.unique(np.linspace(0, len(phase.s) - 1, 4 * samples).astype(int)):
            dpsi = _local_slope(phase.rhs, phase.s[k], phase.psi[k])
            phi = phase.full(phase.psi[k])
            grads = [sp.diff(phi, v) for v in range(n)]
            G = 2 * sp.mul(dpsi, grads[0])
            for v in range(1, n):
                G = G + sp.mul(grads[v], grads[v])
            worst = max(worst, float(np.max(np.abs(G))))
        return worst
    rng = np.random.default_rng(0)
    Y = rng.normal(size=(60, n))
    Y = radius * Y / np.linalg.norm(Y, axis=1, keepdims=True) * rng.uniform(0.2, 1, (60, 1))
    fit = jet_space(n, 4)
    M = fit.monomials(Y)
    worst = 0.0
    for k in np.linspace(3, len(phase.s) - 4, samples).astype(int):
        s = phase.s[k]
        dpsi_k = _local_slope(phase.rhs, s, phase.psi[k])
        ginv = chart.inverse_metric(np.full(len(Y), s), Y)
        dphi = np.zeros((len(Y), n + 1), complex)
        dphi[:, 0] = sp.monomials(Y) @ dpsi_k
        phi = phase.full(phase.psi[k])
        for v in range(n):
            dphi[:, v + 1] = sp.monomials(Y) @ sp.diff(phi, v)
        G = np.einsum("pab,pa,pb->p", ginv, dphi, dphi)
        coef, *_ = np.linalg.lstsq(M, G, rcond=None)
        worst = max(worst, float(np.max(np.abs(coef[fit.degrees <= 2]))))
    return worst


# ---------------------------------------------------------------------------
# amplitude
# ---------------------------------------------------------------------------


@dataclass
class AmplitudeJet:
    """``a = sum_k lam^{-k} a_k`` with ``a_k`` vector-valued jets of degree ``<= J``.

    ``scale`` is the scalar solution of ``rho' = (Box phi)|_gamma rho / 2``,
    so that ``a_{0,0} / rho`` is pure parallel transport.
    """

    J: int
    space: JetSpace
    s: np.ndarray
    coeffs: np.ndarray  # (ns, K+1, size, N)
    dcoeffs: np.ndarray
    w: np.ndarray
    scale: np.ndarray
    mode: str
    rhs: Optional[object] = field(default=None, repr=False)

    @property
    def orders(self) -> int:
        return self.coeffs.shape[1] - 1

    def combined(self, lam: float, s, deriv: int = 0) -> np.ndarray:
        """Coefficients of ``sum_k lam^{-k} a_k`` at parameters ``s``."""
        weights = lam ** -np.arange(self.orders + 1, dtype=float)
        c = np.einsum("k,skcn->scn", weights, self.coeffs)
        d = np.einsum("k,skcn->scn", weights, self.dcoeffs)
        return _hermite(self.s, c, d, s, deriv)

    def leading(self) -> np.ndarray:
        """``a_{0,0}(s)`` on the sample grid."""
        return self.coeffs[:, 0, 0, :]

    def state(self, k: int) -> np.ndarray:
        """Flattened integrator state at sample ``k``."""
        return np.concatenate([self.coeffs[k].transpose(1, 2, 0).ravel(), [self.scale[k]]])


class _FlatCoefficients:
    """Connection and potential jets (first order) along the flat base curve."""

    def __init__(self, chart: FermiChart, B: ConnectionData, V: PotentialData, sp: JetSpace):
        self.chart, self.B, self.V, self.sp = chart, B, V, sp
        self.x0, self.F, _ = chart._affine()
        self.sref = chart.s[chart.k0]

    def at(self, s: float):
        F, sp, n = self.F, self.sp, self.chart.n
        x = self.x0 + (s - self.sref) * F[:, 0]
        Bx, dB = self.B.evaluate(x[None])
        Bx, dB = Bx[0], dB[0]
        beta = np.einsum("ia,inm->anm", F, Bx)
        dbeta = np.einsum("ia,kb,kinm->abnm", F, F, dB)
        Bt = [sp.affine(beta[a], dbeta[a, 1:]) for a in range(n + 1)]
        dsBt = [sp.constant(dbeta[a, 0]) for a in range(n + 1)]
        Vx = self.V(x[None])[0]
        dV = np.einsum("kb,knm->bnm", F, self.V.gradient(x[None])[0])
        Vt = sp.affine(Vx, dV[1:])
        return Bt, dsBt, Vt


def _hermite_phase(phase: PhaseJet):
    def fn(s):
        return phase.coefficients(np.array([s]))[0], phase.coefficients(np.array([s]), 1)[0]
    return fn


def _amplitude_rhs_flat(sp: JetSpace, n: int, phase_fn, coef: _FlatCoefficients, K: int,
                        N: int):
    """Right-hand side on the stacked state ``(size*N, K+1)`` plus the scalar ``rho``.

    ``phase_fn(s)`` returns the phase jet and its ``s``-derivative.
    """
    y1 = sp.variable(0)
    Dy = [sp.diff_operator(v, N) for v in range(n)]
    size = sp.size * N

    def rhs(s, state):
        psi, psi_s = phase_fn(s)
        phi = psi + y1
        grads = [sp.diff(phi, v) for v in range(n)]
        box = -2 * sp.diff(psi_s, 0)
        for v in range(1, n):
            box = box - sp.diff(sp.diff(psi, v), v)
        Bt, dsBt, Vt = coef.at(s)
        MB = [sp.matrix_operator(b) for b in Bt]
        Dcov = [Dy[v] + MB[v + 1] for v in range(n)]
        inv1 = sp.scalar_operator(sp.reciprocal(grads[0]), N)
        C = 0.5 * sp.scalar_operator(box, N) - sp.scalar_operator(psi_s, N) @ Dcov[0]
        for v in range(1, n):
            C = C - sp.scalar_operator(grads[v], N) @ Dcov[v]
        L = inv1 @ C
        # g^{ab} nabla_a nabla_b with g^{s1} = g^{1s} = 1 and g^{jj} = 1, minus the a_s terms
        lap = sp.matrix_operator(dsBt[1]) + MB[0] @ Dcov[0]
        for v in range(1, n):
            lap = lap + (Dy[v] + MB[v + 1]) @ Dcov[v]
        S = sp.matrix_operator(Vt) - lap
        Q = Dy[0] + MB[1]
        X = state[:-1].reshape(size, K + 1)
        LX, SX, BX = L @ X, S @ X, MB[0] @ X
        out = np.empty_like(X)
        prev = None
        for k in range(K + 1):
            nab = LX[:, k] if prev is None else LX[:, k] - 0.5j * (inv1 @ prev)
            a_s = nab - BX[:, k]
            out[:, k] = a_s
            if k < K:
                prev = SX[:, k] - Q @ (a_s + nab)
        return np.concatenate([out.ravel(), [0.5 * box[0] * state[-1]]])
    return rhs


def solve_amplitude_jets(chart: FermiChart, phase: PhaseJet, B: ConnectionData, V: PotentialData,
                         J: Optional[int] = None, w=None, orders: Optional[int] = None) -> AmplitudeJet:
    """Transport jets ``a_k`` (``k <= orders``, default ``J``) with ``a_0(s0) = w``, ``a_k(s0) = 0``.

    General mode carries only ``a_{0,0}``.
    """
    J = phase.J if J is None else int(J)
    if J > phase.J:
        raise BeamError("phase must be built at order >= J")
    N = B.N
    w = np.eye(N)[0] if w is None else np.asarray(w, complex)
    n = chart.n
    sp = jet_space(n, J)
    if chart.mode == "flat":
        K = J if orders is None else int(orders)
        coef = _FlatCoefficients(chart, B, V, sp)
        rhs = _amplitude_rhs_flat(sp, n, _hermite_phase(phase.restrict(J)), coef, K, N)
    else:
        K = 0

        def rhs(s, state):
            x, F = chart.base(np.array([s]))
            Bg = np.einsum("i,inm->nm", F[0, :, 0], B(x)[0])
            H = phase.space.hessian(phase.coefficients(np.array([s]))[0])
            box = -np.trace(_transverse_projector(n) @ H)
            a = state[:-1].reshape(sp.size, N, 1)
            out = np.zeros_like(a)
            out[0, :, 0] = 0.5 * box * a[0, :, 0] - Bg @ a[0, :, 0]
            return np.concatenate([out.ravel(), [0.5 * box * state[-1]]])
    A0 = np.zeros((sp.size, N, K + 1), complex)
    A0[0, :, 0] = w
    ys, ds = _rk4_march(rhs, np.concatenate([A0.ravel(), [1.0 + 0j]]), chart.s, chart.k0)
    order = (0, 3, 1, 2)
    coeffs = ys[:, :-1].reshape(len(chart.s), sp.size, N, K + 1).transpose(order)
    dcoeffs = ds[:, :-1].reshape(len(chart.s), sp.size, N, K + 1).transpose(order)
    return AmplitudeJet(J, sp, chart.s.copy(), coeffs, dcoeffs, w, ys[:, -1], chart.mode, rhs)



def _transport_residual(sp: JetSpace, n: int, psi, psi_s, A, A_s, coef_at):
    """Largest coefficient of ``2C(dphi, nabla a_k) - (Box phi) a_k + i P a_{k-1}`` per order.

    Each order is scaled by the size of the amplitudes it involves, since the
    coefficients of ``a_k`` grow quickly with ``k``.
    """
    Bt, dsBt, Vt = coef_at
    phi = psi + sp.variable(0)
    grads = [sp.diff(phi, v) for v in range(n)]
    box = -2 * sp.diff(psi_s, 0)
    for v in range(1, n):
        box = box - sp.diff(sp.diff(psi, v), v)
    out = []
    Pprev = None
    for k in range(A.shape[-1]):
        a, a_s = A[..., k], A_s[..., k]
        Da = [sp.diff(a, v) + sp.mul(Bt[v + 1], a) for v in range(n)]
        nab_s = a_s + sp.mul(Bt[0], a)
        C = sp.mul(psi_s, Da[0]) + sp.mul(grads[0], nab_s)
        for v in range(1, n):
            C = C + sp.mul(grads[v], Da[v])
        R = 2 * C - sp.mul(box, a)
        if Pprev is not None:
            R = R + 1j * Pprev
        scale = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(A[..., k - 1]))) if k else 1.0)
        out.append(float(np.max(np.abs(R))) / scale)
        lap = (sp.diff(a_s, 0) + sp.mul(dsBt[1], a) + sp.mul(Bt[1], a_s) + sp.mul(Bt[0], Da[0])
               + sp.diff(nab_s, 0) + sp.mul(Bt[1], nab_s))
        for v in range(1, n):
            lap = lap + sp.diff(Da[v], v) + sp.mul(Bt[v + 1], Da[v])
        Pprev = -lap + sp.mul(Vt, a)
    return out


def transport_defect(chart: FermiChart, phase: PhaseJet, amplitude: AmplitudeJet,
                     B: ConnectionData, V: PotentialData, samples: int = 8,
                     eta: float = 5e-4) -> dict:
    """Taylor coefficients of the transport balance along the curve.

    ``s``-derivatives are finite differences of short re-integrations around
    each sample, and the balance is rebuilt by direct jet products.  Returns
    the worst leading-order (``k = 0``) and all-order values.
    """
    n, N = chart.n, amplitude.w.size
    idx = np.unique(np.linspace(0, len(chart.s) - 1, samples).astype(int))
    if chart.mode == "general":
        worst = 0.0
        for k in idx:
            s = chart.s[k]
            da = _local_slope(amplitude.rhs, s, amplitude.state(k), eta)
            x, F = chart.base(np.array([s]))
            H = phase.space.hessian(phase.coefficients(np.array([s]))[0])
            box = -np.trace(_transverse_projector(n) @ H)
            a = amplitude.coeffs[k, 0, 0]
            nab = da[:-1].reshape(-1, N, 1)[0, :, 0] + np.einsum("i,inm->nm", F[0, :, 0], B(x)[0]) @ a
            worst = max(worst, float(np.max(np.abs(2 * nab - box * a))))
        return {"leading": worst, "all_orders": worst}
    sp = amplitude.space
    ph = phase.restrict(amplitude.J)
    coef = _FlatCoefficients(chart, B, V, sp)
    K = amplitude.orders
    lead = worst = 0.0
    for k in idx:
        s = chart.s[k]
        q = _local_samples(ph.rhs, s, ph.psi[k], eta / 2, count=4)

        def phase_fn(t, q=q, s=s):
            p = q[int(round((t - s) / (eta / 2)))]
            return p, ph.rhs(t, p)

        rhs = _amplitude_rhs_flat(sp, n, phase_fn, coef, K, N)
        state = amplitude.state(k)
        ds = _local_slope(rhs, s, state, eta)
        A = state[:-1].reshape(sp.size, N, K + 1)
        A_s = ds[:-1].reshape(sp.size, N, K + 1)
        psi, psi_s = phase_fn(s)
        res = _transport_residual(sp, n, psi, psi_s, A, A_s, coef.at(s))
        lead, worst = max(lead, res[0]), max(worst, max(res))
    return {"leading": lead, "all_orders": worst}


def beam_invariants(chart: FermiChart, phase: PhaseJet, amplitude: AmplitudeJet,
                    B: ConnectionData, V: PotentialData) -> dict:
    """Defects of the chart, phase and amplitude invariants (JSON-ready)."""
    sp = phase.space
    low = sp.degrees <= 1
    lead = amplitude.leading()
    drift = np.abs(np.linalg.norm(lead, axis=1) / np.abs(amplitude.scale) - np.linalg.norm(amplitude.w))
    tr = transport_defect(chart, phase, amplitude, B, V)
    return {
        "mode": chart.mode,
        "J": phase.J,
        "normal_form": chart.defects["normal_form"],
        "first_derivative": chart.defects["first_derivative"],
        "phase_pinning": float(np.max(np.abs(phase.psi[:, low]))),
        "eikonal": eikonal_defect(chart, phase),
        "transport_leading": tr["leading"],
        "transport_all_orders": tr["all_orders"],
        "min_imag_eig": float(phase.min_imag_eig.min()),
        "unitarity_drift": float(drift.max()),
    }


# ---------------------------------------------------------------------------
# assembled beams
# ---------------------------------------------------------------------------


def cutoff(r, delta: float):
    """``chi(r) = exp(1 - 1/(1 - (2r/delta - 1)_+^2))`` for ``r < delta``, else 0; with r-derivatives.

    ``chi = 1`` on ``r <= delta/2``.  The profile is ``C^1`` with a bounded
    second-derivative jump at ``r = delta/2`` and flat to all orders at ``delta``.
    """
    r = np.asarray(r, float)
    raw = 2 * r / delta - 1
    q = np.clip(raw, 0.0, None)
    inside = q < 1
    qq = np.where(inside, q, 0.5)
    den = 1 - qq * qq
    chi = np.where(inside, np.exp(1 - 1 / den), 0.0)
    f1 = -2 * qq / den**2
    f2 = np.where(raw > 0, -2 / den**2 - 8 * qq * qq / den**3, 0.0)
    c = 2 / delta
    return chi, chi * f1 * c, chi * (f1 * f1 + f2) * c * c


def _monomial_derivatives(sp: JetSpace, Y: np.ndarray):
    """Monomials and their first and second ``y``-derivatives at points ``Y`` (P, n)."""
    e = sp.exponents
    n = sp.nvars
    powers = Y[:, :, None] ** np.arange(sp.degree + 1)  # (P, n, degree+1)

    def mono(shift, coef):
        ex = e - shift
        val = np.ones((Y.shape[0], sp.size), dtype=Y.dtype)
        for v in range(n):
            val *= powers[:, v, np.clip(ex[:, v], 0, None)]
        return val * coef

    eye = np.eye(n, dtype=int)
    M0 = mono(np.zeros(n, int), 1.0)
    M1 = np.stack([mono(eye[v], e[:, v]) for v in range(n)], axis=1)
    M2 = np.empty((Y.shape[0], n, n, sp.size), dtype=Y.dtype)
    for v in range(n):
        for w in range(v, n):
            M2[:, v, w] = mono(eye[v] + eye[w], e[:, v] * (e[:, w] - (v == w)))
            M2[:, w, v] = M2[:, v, w]
    return M0, M1, M2


def _contract(M: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Per-point contraction of monomial tables ``(P, ..., size)`` with jets ``(P, size, ...)``."""
    P, size = M.shape[0], M.shape[-1]
    lead = M.shape[1:-1]
    tail = c.shape[2:]
    out = np.matmul(M.reshape(P, -1, size), c.reshape(P, size, -1))
    return out.reshape((P,) + lead + tail)


@dataclass
class BeamField:
    """``v_lam = chi(|y'|) exp(i lam phi) a``, zero outside the tube."""

    chart: FermiChart
    phase: PhaseJet
    amplitude: AmplitudeJet
    lam: float
    delta: float
    chunk: int = 20000

    @property
    def N(self) -> int:
        return self.amplitude.w.size

    def _local(self, Z, Y, derivatives: bool):
        ph = self.phase.restrict(self.amplitude.J) if self.phase.J > self.amplitude.J else self.phase
        sp = self.amplitude.space
        lam = self.lam
        # many points share an s-value (quadrature grids); interpolate jets once per value
        us, inv = np.unique(Z, return_inverse=True)
        M0, M1, M2 = _monomial_derivatives(sp, Y)
        psi = ph.coefficients(us)[inv]
        a = self.amplitude.combined(lam, us)[inv]
        phi = Y[:, 0] + _contract(M0, psi)
        av = _contract(M0, a)
        r = np.linalg.norm(Y, axis=1)
        chi, c1, c2 = cutoff(r, self.delta)
        E = np.exp(1j * lam * phi)
        val = (chi * E)[:, None] * av
        if not derivatives:
            return val
        P, n, m = len(Z), sp.nvars, sp.nvars + 1
        dpsi, d2psi = ph.coefficients(us, 1)[inv], ph.coefficients(us, 2)[inv]
        da, d2a = self.amplitude.combined(lam, us, 1)[inv], self.amplitude.combined(lam, us, 2)[inv]
        Dphi = np.empty((P, m), complex)
        Dphi[:, 0] = _contract(M0, dpsi)
        Dphi[:, 1:] = _contract(M1, psi)
        Dphi[:, 1] += 1.0
        D2phi = np.empty((P, m, m), complex)
        D2phi[:, 0, 0] = _contract(M0, d2psi)
        D2phi[:, 0, 1:] = D2phi[:, 1:, 0] = _contract(M1, dpsi)
        D2phi[:, 1:, 1:] = _contract(M2, psi)
        Da = np.empty((P, m, self.N), complex)
        Da[:, 0] = _contract(M0, da)
        Da[:, 1:] = _contract(M1, a)
        D2a = np.empty((P, m, m, self.N), complex)
        D2a[:, 0, 0] = _contract(M0, d2a)
        D2a[:, 0, 1:] = D2a[:, 1:, 0] = _contract(M1, da)
        D2a[:, 1:, 1:] = _contract(M2, a)
        rs = np.where(r > 0, r, 1.0)
        yh = Y / rs[:, None]
        Dchi = np.zeros((P, m))
        Dchi[:, 1:] = c1[:, None] * yh
        D2chi = np.zeros((P, m, m))
        D2chi[:, 1:, 1:] = (c2[:, None, None] * yh[:, :, None] * yh[:, None, :]
                            + (c1 / rs)[:, None, None] * (np.eye(n) - yh[:, :, None] * yh[:, None, :]))
        f = chi * E
        DE = 1j * lam * Dphi * E[:, None]
        D2E = (1j * lam * D2phi - lam**2 * Dphi[:, :, None] * Dphi[:, None, :]) * E[:, None, None]
        Df = Dchi * E[:, None] + chi[:, None] * DE
        D2f = (D2chi * E[:, None, None] + Dchi[:, :, None] * DE[:, None, :]
               + DE[:, :, None] * Dchi[:, None, :] + chi[:, None, None] * D2E)
        d1 = Df[:, :, None] * av[:, None, :] + f[:, None, None] * Da
        d2 = (D2f[..., None] * av[:, None, None, :] + Df[:, :, None, None] * Da[:, None, :, :]
              + Da[:, :, None, :] * Df[:, None, :, None] + f[:, None, None, None] * D2a)
        return val, d1, d2

    def evaluate(self, X, derivatives: bool = False):
        """Values (and chart-coordinate partials in flat mode) at points ``X``."""
        X = np.asarray(X, float)
        shape = X.shape[:-1]
        m = X.shape[-1]
        Xf = X.reshape(-1, m)
        P = Xf.shape[0]
        val = np.zeros((P, self.N), complex)
        d1 = np.zeros((P, m, self.N), complex) if derivatives else None
        d2 = np.zeros((P, m, m, self.N), complex) if derivatives else None
        if derivatives and self.chart.mode != "flat":
            raise BeamError("closed-form partials need a flat chart")
        Finv = self.chart._affine()[2] if derivatives else None
        for lo in range(0, P, self.chunk):
            sl = slice(lo, min(P, lo + self.chunk))
            s, y, ok = self.chart.to_fermi(Xf[sl])
            live = ok & (np.linalg.norm(y, axis=1) < self.delta)
            live &= (s >= self.chart.s[0]) & (s <= self.chart.s[-1])
            if not np.any(live):
                continue
            rows = np.arange(sl.start, sl.stop)[live]
            out = self._local(s[live], y[live], derivatives)
            if not derivatives:
                val[rows] = out
                continue
            val[rows] = out[0]
            d1[rows] = np.einsum("ai,pan->pin", Finv, out[1])
            d2[rows] = np.einsum("ai,bj,pabn->pijn", Finv, Finv, out[2], optimize=True)
        if not derivatives:
            return val.reshape(shape + (self.N,))
        return (val.reshape(shape + (self.N,)), d1.reshape(shape + (m, self.N)),
                d2.reshape(shape + (m, m, self.N)))

    def __call__(self, X) -> np.ndarray:
        return self.evaluate(X)

    def field(self) -> AnalyticTestField:
        """The beam as an analytic field; repeated calls on the same points reuse the last result."""
        memo: dict = {}

        def fn(X):
            X = np.asarray(X, float)
            hit = memo.get("X")
            if hit is None or hit.shape != X.shape or not np.array_equal(hit, X):
                memo["X"], memo["out"] = X.copy(), self.evaluate(X, True)
            return memo["out"]

        return AnalyticTestField(fn, "section", self.N, self.chart.n + 1)


@dataclass
class BeamConfig:
    """Beam parameters: jet order, wavenumbers, tube radius and residual quadrature density."""

    J: int = 2
    lambdas: Sequence[float] = (20.0, 40.0, 80.0, 160.0, 320.0, 640.0)
    delta: float = 0.5
    orders: Optional[int] = None
    points_per_width: float = 4.0
    s_stride: int = 2

    def __post_init__(self):
        lam = np.asarray(self.lambdas, float)
        if lam.size == 0 or np.any(lam <= 0) or np.any(np.diff(lam) <= 0):
            raise BeamError("wavenumbers must be positive and increasing")
        if self.delta <= 0:
            raise BeamError("tube radius must be positive")


def assemble_beam(chart: FermiChart, phase: PhaseJet, amplitude: AmplitudeJet, config: BeamConfig,
                  grid: Optional[CoordinateChart] = None, lam: Optional[float] = None):
    """Beam at wavenumber ``lam`` (default the first configured); values on ``grid`` nodes if given."""
    if config.delta > chart.delta + 1e-12:
        raise BeamError("config delta exceeds the chart validity radius")
    beam = BeamField(chart, phase, amplitude, float(config.lambdas[0] if lam is None else lam),
                     config.delta)
    if grid is None:
        return beam
    return beam(grid.nodes())


# ---------------------------------------------------------------------------
# residual decay
# ---------------------------------------------------------------------------


def decay_exponent(J: int, n: int, k: int) -> float:
    """``K = (J+1)/2 + n/4 - k - 2``."""
    return (J + 1) / 2 + n / 4 - k - 2


@dataclass
class ResidualDecay:
    lambdas: np.ndarray
    norms: np.ndarray
    halved: np.ndarray
    slope: float
    theory: float
    J: int
    n: int
    k: int

    def rows(self) -> list[dict]:
        return [{"lambda": float(l), "residual": float(r), "fitted_slope": self.slope}
                for l, r in zip(self.lambdas, self.norms)]


def _trapezoid_weights(count: int, h: float) -> np.ndarray:
    w = np.full(count, h)
    w[[0, -1]] = h / 2
    return w


def _hat_weights(nodes: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Weights integrating the piecewise-linear interpolant on uniform ``nodes`` over ``[a, b]``.

    ``a`` and ``b`` are per-column limits; the result has shape ``(len(a), len(nodes))``.
    """
    h = nodes[1] - nodes[0]

    def ramp(u):
        u = np.clip(u, -1.0, 1.0)
        return np.where(u < 0, 0.5 * (u + 1) ** 2, 1 - 0.5 * (1 - u) ** 2)

    a = np.clip(a, nodes[0], nodes[-1])[:, None]
    b = np.clip(b, nodes[0], nodes[-1])[:, None]
    w = h * (ramp((b - nodes) / h) - ramp((a - nodes) / h))
    return np.where(b > a, w, 0.0)


def _box_interval(x0, F, Y, lo, hi):
    """For each transverse point, the ``s``-interval on which ``x0 + F (s, y)`` lies in the box."""
    base = x0 + Y @ F[:, 1:].T
    a = np.full(Y.shape[0], -np.inf)
    b = np.full(Y.shape[0], np.inf)
    for i, d in enumerate(F[:, 0]):
        if abs(d) < 1e-14:
            bad = (base[:, i] < lo[i]) | (base[:, i] > hi[i])
            a[bad], b[bad] = np.inf, -np.inf
            continue
        r1, r2 = (lo[i] - base[:, i]) / d, (hi[i] - base[:, i]) / d
        a = np.maximum(a, np.minimum(r1, r2))
        b = np.minimum(b, np.maximum(r1, r2))
    return a, b


def _radial_nodes(breaks: list[float], spacing: float):
    """Composite trapezoid nodes and weights on ``[breaks[0], breaks[-1]]`` with every break a node.

    Each segment gets an even number of cells, so every other node is again
    a composite rule with the same breaks.  Returns nodes, weights and the
    weights of that coarser rule (zero on dropped nodes).
    """
    nodes, w, wc = [], [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        m = max(2, 2 * int(math.ceil((b - a) / spacing / 2)))
        x = np.linspace(a, b, m + 1)
        fine = _trapezoid_weights(m + 1, (b - a) / m)
        coarse = np.zeros(m + 1)
        coarse[::2] = _trapezoid_weights(m // 2 + 1, 2 * (b - a) / m)
        if nodes:
            w[-1][-1] += fine[0]
            wc[-1][-1] += coarse[0]
            x, fine, coarse = x[1:], fine[1:], coarse[1:]
        nodes.append(x), w.append(fine), wc.append(coarse)
    return np.concatenate(nodes), np.concatenate(w), np.concatenate(wc)


def residual_norm(metric: MetricClosure, B: ConnectionData, V: PotentialData, beam: BeamField,
                  domain: CoordinateChart, k: int = 0, points_per_width: float = 4.0,
                  s_stride: int = 2) -> tuple[float, float]:
    """``||P v||_{H^k}`` over the box of ``domain`` on a Fermi-coordinate quadrature grid.

    Nodes in ``s`` are chart samples, where the jets carry exact values and
    slopes; along ``s`` the piecewise-linear interpolant is integrated over
    the exact interval inside the box.  Transverse nodes are polar with
    ``r = delta/2`` on the grid, where the cutoff has its second-derivative
    jump.  Returns the value on the full grid and on the grid with every
    other node, whose disagreement measures resolution.
    """
    chart, n = beam.chart, beam.chart.n
    if chart.mode != "flat":
        raise BeamError("residual quadrature needs a flat chart")
    if k not in (0, 1):
        raise BeamError("H^k norms are supported for k <= 1")
    if n > 2:
        raise BeamError("residual quadrature supports n <= 2")
    lo = np.concatenate([[-domain.T], np.zeros(n)])
    hi = np.concatenate([[domain.T], domain.lengths])
    x0, F, _ = chart._affine()
    J = beam.amplitude.J

    def layout(c):
        width = 1 / math.sqrt(beam.lam * c)
        Yr = min(beam.delta, (math.sqrt(J + 1) + 5) * width)
        breaks = [0.0, beam.delta / 2, Yr] if Yr > beam.delta / 2 + 1e-12 else [0.0, Yr]
        r, wr, wrc = _radial_nodes(breaks, width / points_per_width)
        if n == 1:
            dirs, wt = np.array([[1.0], [-1.0]]), np.ones(2)
            wtc = wt.copy()
        else:
            nt = max(16, 2 * int(math.ceil(math.pi * points_per_width * Yr / width / 2)))
            th = 2 * math.pi * np.arange(nt) / nt
            dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
            wt = np.full(nt, 2 * math.pi / nt)
            wtc = np.zeros(nt)
            wtc[::2] = 4 * math.pi / nt
        return Yr, r, wr, wrc, dirs, wt, wtc

    # the transverse extent depends on c_min over the s-range it selects; iterate once
    c = float(beam.phase.min_imag_eig.min())
    for _ in range(2):
        Yr, r, wr, wrc, dirs, wt, wtc = layout(c)
        Ycols = (r[:, None, None] * dirs[None]).reshape(-1, n)
        a, b = _box_interval(x0, F, Ycols, lo, hi)
        live = b > a
        if not np.any(live):
            raise BeamError("beam tube misses the domain")
        s_lo, s_hi = a[live].min(), b[live].max()
        used = (chart.s >= s_lo - chart.h) & (chart.s <= s_hi + chart.h)
        c = float(beam.phase.min_imag_eig[used].min())
    k_lo = int(np.searchsorted(chart.s, s_lo, side="right")) - 1
    k_hi = int(np.searchsorted(chart.s, s_hi, side="left"))
    if k_lo < 0 or k_hi >= chart.s.size:
        raise BeamError("Fermi chart is too short to cover the domain; increase its margin")
    count = k_hi - k_lo
    count += (-count) % (2 * s_stride)
    ks = k_lo + np.arange(0, count + 1, s_stride)
    if ks[-1] >= chart.s.size:
        ks = ks - (ks[-1] - chart.s.size + 1)
    if ks[0] < 0:
        raise BeamError("Fermi chart is too short to cover the domain; increase its margin")
    S = np.repeat(chart.s[ks], Ycols.shape[0])
    Y = np.tile(Ycols, (ks.size, 1))
    X = chart.to_chart(S, Y)
    field_ = beam.field()
    G = metric_data(metric, X)["G"]
    vals = apply_P(metric, B, V, field_, X)
    dens = np.sum(np.abs(vals) ** 2, axis=-1)
    if k == 1:
        step = 0.01 / beam.lam
        Bx = B(X)
        for i in range(n + 1):
            e = np.zeros(n + 1)
            e[i] = step
            d = (apply_P(metric, B, V, field_, X + e) - apply_P(metric, B, V, field_, X - e)) / (2 * step)
            d = d + np.einsum("pab,pb->pa", Bx[:, i], vals)
            dens = dens + np.sum(np.abs(d) ** 2, axis=-1)
    if not np.all(np.isfinite(dens)):
        raise BeamError("beam residual overflowed; the truncated phase loses positivity inside the tube")
    dens = (dens * G).reshape(ks.size, Ycols.shape[0])
    jac = abs(np.linalg.det(F))
    measure = r ** (n - 1)

    def integrate(sel_s, w_r, w_t):
        w_col = (w_r * measure)[:, None] * w_t[None, :]
        cols = np.nonzero(w_col.ravel())[0]
        w_s = _hat_weights(chart.s[ks][sel_s], a[cols], b[cols])
        line = np.einsum("cs,sc->c", w_s, dens[sel_s][:, cols])
        return float(line @ w_col.ravel()[cols]) * jac

    full = integrate(slice(None), wr, wt)
    half = integrate(slice(None, None, 2), wrc, wtc)
    return math.sqrt(full), math.sqrt(half)


def residual_decay(metric: MetricClosure, B: ConnectionData, V: PotentialData, chart: FermiChart,
                   phase: PhaseJet, amplitude: AmplitudeJet, config: BeamConfig,
                   domain: CoordinateChart, k: int = 0, strict: bool = True) -> ResidualDecay:
    """Residual norms across ``config.lambdas`` and their log-log slope against ``-K``."""
    lams = np.asarray(config.lambdas, float)
    if np.log10(lams[-1] / lams[0]) < 1.5 - 1e-9:
        raise BeamError("wavenumbers must span at least 1.5 decades")
    norms, halved = [], []
    for lam in lams:
        beam = assemble_beam(chart, phase, amplitude, config, lam=lam)
        full, half = residual_norm(metric, B, V, beam, domain, k, config.points_per_width,
                                   config.s_stride)
        if strict and abs(full - half) > 0.05 * full:
            raise BeamError(f"residual quadrature under-resolved at lambda={lam:g} "
                            f"(halving changes the norm by {abs(full - half) / full:.1%})")
        norms.append(full)
        halved.append(half)
    norms = np.array(norms)
    slope = float(np.polyfit(np.log(lams), np.log(norms), 1)[0])
    return ResidualDecay(lams, norms, np.array(halved), slope,
                         -decay_exponent(amplitude.J, chart.n, k), amplitude.J, chart.n, k)


# ---------------------------------------------------------------------------
# boundary probe
# ---------------------------------------------------------------------------


def probe_switch(t, T1: float, eps: float) -> np.ndarray:
    """Smooth switch equal to 1 for ``t <= T1 + eps/2`` and 0 for ``t >= T1 + eps``."""
    x = np.clip((T1 + eps - np.asarray(t, float)) / (eps / 2), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(x > 0, np.exp(-1 / np.where(x > 0, x, 1.0)), 0.0)
        b = np.where(x < 1, np.exp(-1 / np.where(x < 1, 1 - x, 1.0)), 0.0)
    return a / (a + b)


@dataclass
class BeamProbe:
    """Comparison of the boundary-driven solution with the beam it was seeded from."""

    lam: float
    window_end: float
    c0_error: float
    beam_max: float
    probe_point: np.ndarray
    probe_value: np.ndarray
    expected_value: np.ndarray
    probe_derivative: np.ndarray
    expected_derivative: np.ndarray

    def to_dict(self) -> dict:
        def c(z):
            z = np.asarray(z)
            return {"re": z.real.tolist(), "im": z.imag.tolist()}

        return {"lambda": self.lam, "window_end": self.window_end, "c0_error": self.c0_error,
                "beam_max": self.beam_max, "probe_point": self.probe_point.tolist(),
                "probe_value": c(self.probe_value), "expected_value": c(self.expected_value),
                "probe_derivative": c(self.probe_derivative),
                "expected_derivative": c(self.expected_derivative)}


def _boundary_crossings(chart: FermiChart, grid: CoordinateChart) -> list[float]:
    """Times at which the base curve passes through the lateral boundary."""
    x = chart.points[:, 1:]
    outside = np.any((x < 0) | (x > np.asarray(grid.lengths)), axis=1)
    flips = np.nonzero(outside[1:] != outside[:-1])[0]
    return [float(0.5 * (chart.points[k, 0] + chart.points[k + 1, 0])) for k in flips]


def beam_boundary_source(metric: MetricClosure, B: ConnectionData, V: PotentialData, beam: BeamField,
                         grid: CoordinateChart, T1: float, eps: float, cfl: float = 0.9):
    """Drive the solver with ``f = eta v|_Sigma`` and compare the solution with ``v`` before ``T1 + eps/2``.

    ``eta`` is :func:`probe_switch`.  The probe point is the base point
    ``gamma(s0)`` of the beam, which must be a grid node.  Returns the
    boundary source and a :class:`BeamProbe`.
    """
    chart = beam.chart
    for t in _boundary_crossings(chart, grid):
        if T1 - eps <= t <= T1 + eps:
            raise BeamError(f"beam tube meets the boundary at t={t:.4g}, inside the probe window "
                            f"[{T1 - eps:.4g}, {T1 + eps:.4g}]")
    f = BoundarySource.from_function(grid, lambda X: probe_switch(X[..., 0], T1, eps)[..., None] * beam(X))
    p = chart.base(np.array([chart.s0]))[0][0]
    nodes = grid.spatial_nodes()
    try:
        kp = grid.level_index(float(p[0]))
    except GeometryError:
        raise BeamError("probe point is not on a time level of the grid") from None
    idx = tuple(int(round(p[1 + i] / grid.h_x[i])) for i in range(grid.n))
    if np.max(np.abs(nodes[idx] - p[1:])) > 1e-9 or any(not 0 < j < s - 1 for j, s in zip(idx, grid.spatial_shape)):
        raise BeamError("probe point is not an interior grid node")
    end = T1 + eps / 2
    k_end = int(np.searchsorted(grid.t, end + 1e-12)) - 1
    if k_end < kp + 1:
        raise BeamError("probe window must extend past the probe level")
    state = {"err": 0.0, "vmax": 0.0, "levels": {}}

    def monitor(k, u):
        if k > k_end:
            return
        X = grid.slice_points(grid.t[k])
        v = beam(X)
        diff = np.linalg.norm(u[0] - v, axis=-1)
        state["err"] = max(state["err"], float(diff.max()))
        state["vmax"] = max(state["vmax"], float(np.linalg.norm(v, axis=-1).max()))
        if abs(k - kp) <= 1:
            state["levels"][k] = u[0].copy()

    solve_forward(metric, B, V, grid, f=f, record=False, monitor=monitor, stop_index=k_end, cfl=cfl)
    L = state["levels"]
    up = L[kp][idx]
    du = np.empty((grid.n + 1, up.size), complex)
    du[0] = (L[kp + 1][idx] - L[kp - 1][idx]) / (2 * grid.h_t)
    for i in range(grid.n):
        hi, lo = list(idx), list(idx)
        hi[i] += 1
        lo[i] -= 1
        du[1 + i] = (L[kp][tuple(hi)] - L[kp][tuple(lo)]) / (2 * grid.h_x[i])
    w = beam.amplitude.leading()[chart.k0]
    dy1 = chart._affine()[2][1]
    return f, BeamProbe(beam.lam, float(grid.t[k_end]), state["err"], state["vmax"], p, up, w,
                        du.T / (1j * beam.lam), np.outer(w, dy1))
