r"""Lorentzian geometry on product charts ``[-T, T] x M0``.

The metric has the conformal product form

.. math::

    g = c(t, x)\,\bigl(-dt^2 + g_0(t, x, dx)\bigr),

with ``M0`` an interval ``[0, L]`` or a rectangle.  Coordinates are ordered
``(t, x_1, ..., x_n)`` and index 0 is time throughout the package.

Metric closures supply analytic first and second partials so that Christoffel
symbols and curvature are computed without finite differences.  Derivative
arrays put the differentiation index immediately after the batch axes, e.g.
``dg[..., k, i, j] = \partial_k g_{ij}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

NULL_TOL = 1e-10
H1_TOL = 1e-9


class GeometryError(ValueError):
    """Raised for points outside a chart or degenerate metric data."""


# ---------------------------------------------------------------------------
# charts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoordinateChart:
    """Uniform space-time grid on ``[-T, T] x box``.

    ``shape`` is ``(n_t, n_1, ..., n_n)``: node counts including boundary
    nodes.  The spatial box is ``[0, L_1] x ... x [0, L_n]``.
    """

    T: float
    lengths: tuple[float, ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        lengths = tuple(float(v) for v in np.atleast_1d(self.lengths))
        shape = tuple(int(v) for v in self.shape)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "shape", shape)
        if len(lengths) not in (1, 2):
            raise GeometryError("spatial dimension must be 1 or 2")
        if len(shape) != len(lengths) + 1:
            raise GeometryError("shape must list n_t followed by one count per spatial axis")
        if self.T <= 0 or min(lengths) <= 0:
            raise GeometryError("T and box lengths must be positive")
        if min(shape) < 3:
            raise GeometryError("need at least three nodes per axis")

    @classmethod
    def uniform(cls, T: float, lengths: Sequence[float] | float, n_x: Sequence[int] | int,
                cfl: float = 0.9, speed: float = 1.0) -> "CoordinateChart":
        """Chart with the requested spatial nodes and the coarsest stable time step.

        The time step obeys ``h_t <= cfl * min(h_x) / (speed * sqrt(n))``. The
        interval count is rounded up to an even number so ``t = 0`` is a level.
        """
        lengths = tuple(np.atleast_1d(lengths).astype(float))
        n_x = tuple(int(v) for v in np.broadcast_to(np.atleast_1d(n_x), (len(lengths),)))
        hx = min(L / (m - 1) for L, m in zip(lengths, n_x))
        ht_max = cfl * hx / (speed * np.sqrt(len(lengths)))
        steps = int(np.ceil(2.0 * T / ht_max - 1e-9))
        steps += steps % 2
        return cls(float(T), lengths, (steps + 1,) + n_x)

    def level_index(self, t: float, tol: float = 1e-9) -> int:
        """Index of the time level at ``t``; raises when ``t`` is off the grid."""
        k = int(round((t + self.T) / self.h_t))
        if not 0 <= k < self.shape[0] or abs(self.t[k] - t) > tol * max(1.0, self.T):
            raise GeometryError(f"t = {t} is not a time level (h_t = {self.h_t:.6g})")
        return k

    @property
    def n(self) -> int:
        return len(self.lengths)

    @property
    def dim(self) -> int:
        return self.n + 1

    @property
    def h_t(self) -> float:
        return 2.0 * self.T / (self.shape[0] - 1)

    @property
    def h_x(self) -> tuple[float, ...]:
        return tuple(L / (m - 1) for L, m in zip(self.lengths, self.shape[1:]))

    @property
    def steps(self) -> tuple[float, ...]:
        return (self.h_t,) + self.h_x

    @property
    def cfl_ratio(self) -> float:
        return self.h_t / min(self.h_x)

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.shape[1:]

    @property
    def t(self) -> np.ndarray:
        return np.linspace(-self.T, self.T, self.shape[0])

    def axis(self, a: int) -> np.ndarray:
        """Spatial coordinate nodes along axis ``a`` (0-based spatial index)."""
        return np.linspace(0.0, self.lengths[a], self.shape[a + 1])

    def spatial_nodes(self) -> np.ndarray:
        """Array of shape ``spatial_shape + (n,)`` of node coordinates."""
        axes = [self.axis(a) for a in range(self.n)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def nodes(self) -> np.ndarray:
        """Array of shape ``shape + (n+1,)`` of space-time node coordinates."""
        axes = [self.t] + [self.axis(a) for a in range(self.n)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def slice_points(self, t: float) -> np.ndarray:
        xs = self.spatial_nodes()
        tt = np.full(xs.shape[:-1] + (1,), float(t))
        return np.concatenate([tt, xs], axis=-1)

    def boundary_mask(self) -> np.ndarray:
        """Boolean mask over the spatial grid selecting nodes on the boundary of the box."""
        mask = np.zeros(self.spatial_shape, dtype=bool)
        for a in range(self.n):
            idx = [slice(None)] * self.n
            idx[a] = 0
            mask[tuple(idx)] = True
            idx[a] = -1
            mask[tuple(idx)] = True
        return mask

    def boundary_indices(self) -> np.ndarray:
        """Flat (C-order) indices of boundary nodes of the spatial grid."""
        return np.flatnonzero(self.boundary_mask().ravel())

    def boundary_normals(self) -> np.ndarray:
        """Euclidean outward conormals ``n_a`` at boundary nodes, shape ``(nb, n)``.

        Corner nodes of a rectangle take the normal of the ``x_1`` side.
        """
        xs = self.spatial_nodes().reshape(-1, self.n)[self.boundary_indices()]
        out = np.zeros_like(xs)
        tol = 1e-12
        for a in reversed(range(self.n)):
            lo = np.abs(xs[:, a]) < tol * max(1.0, self.lengths[a])
            hi = np.abs(xs[:, a] - self.lengths[a]) < tol * max(1.0, self.lengths[a])
            hit = lo | hi
            out[hit] = 0.0
            out[lo, a] = -1.0
            out[hi, a] = 1.0
        return out

    def contains(self, point, tol: float = 1e-12) -> bool:
        p = np.asarray(point, dtype=float)
        if p.shape != (self.dim,):
            return False
        if abs(p[0]) > self.T * (1 + tol) + tol:
            return False
        for a in range(self.n):
            if p[a + 1] < -tol or p[a + 1] > self.lengths[a] * (1 + tol) + tol:
                return False
        return True

    def refine(self, factor: int = 2) -> "CoordinateChart":
        """Same domain with every step divided by ``factor``."""
        shape = tuple((m - 1) * factor + 1 for m in self.shape)
        return CoordinateChart(self.T, self.lengths, shape)


# ---------------------------------------------------------------------------
# metric closures
# ---------------------------------------------------------------------------


class MetricClosure:
    r"""Evaluator for ``c`` and ``g_0`` with analytic partials.

    Subclasses implement :meth:`conformal` and :meth:`spatial`.  Both accept
    points of shape ``(..., n+1)``.

    * ``conformal(X) -> (c, dc, d2c)`` with shapes ``(...)``, ``(..., n+1)``,
      ``(..., n+1, n+1)``.
    * ``spatial(X) -> (g0, dg0, d2g0)`` with shapes ``(..., n, n)``,
      ``(..., n+1, n, n)``, ``(..., n+1, n+1, n, n)``.
    """

    n: int = 1
    name: str = "metric"
    time_independent_g0: bool = False
    conformally_flat_time: bool = False  # True when c depends on x only
    has_second_derivatives: bool = True

    def conformal(self, X: np.ndarray):
        raise NotImplementedError

    def spatial(self, X: np.ndarray):
        raise NotImplementedError

    # full metric ----------------------------------------------------------
    def full(self, X: np.ndarray, order: int = 2):
        """Return ``g`` and its partials up to ``order`` at points ``X``."""
        X = np.asarray(X, dtype=float)
        c, dc, d2c = self.conformal(X)
        g0, dg0, d2g0 = self.spatial(X)
        m = self.n + 1
        batch = X.shape[:-1]
        b = np.zeros(batch + (m, m))
        b[..., 0, 0] = -1.0
        b[..., 1:, 1:] = g0
        g = c[..., None, None] * b
        if order == 0:
            return (g,)
        db = np.zeros(batch + (m, m, m))
        db[..., 1:, 1:] = dg0
        dg = dc[..., :, None, None] * b[..., None, :, :] + c[..., None, None, None] * db
        if order == 1:
            return g, dg
        if not self.has_second_derivatives:
            raise GeometryError("closure lacks second derivatives")
        d2b = np.zeros(batch + (m, m, m, m))
        d2b[..., 1:, 1:] = d2g0
        d2g = (d2c[..., :, :, None, None] * b[..., None, None, :, :]
               + dc[..., :, None, None, None] * db[..., None, :, :, :]
               + dc[..., None, :, None, None] * db[..., :, None, :, :]
               + c[..., None, None, None, None] * d2b)
        return g, dg, d2g

    def check(self, X: np.ndarray) -> None:
        """Raise if ``c <= 0`` or ``g0`` is not positive definite at ``X``."""
        c = self.conformal(X)[0]
        if not np.all(np.isfinite(c)) or np.any(c <= 0):
            raise GeometryError("conformal factor must be positive")
        g0 = self.spatial(X)[0]
        ev = np.linalg.eigvalsh(0.5 * (g0 + np.swapaxes(g0, -1, -2)))
        if np.any(ev <= 0):
            raise GeometryError("g0 must be positive definite")


class FunctionMetric(MetricClosure):
    """Metric built from plain callables ``c(X)`` and ``g0(X)``.

    Partials are taken by central differences with step scaled like
    ``eps**(1/3)`` for first and ``eps**(1/4)`` for second derivatives.
    """

    def __init__(self, n: int, c: Callable, g0: Callable, name: str = "function",
                 time_independent_g0: bool = False):
        self.n = n
        self._c = c
        self._g0 = g0
        self.name = name
        self.time_independent_g0 = time_independent_g0

    @staticmethod
    def _partials(fn, X, m):
        eps = np.finfo(float).eps
        h1 = eps ** (1 / 3)
        h2 = eps ** (1 / 4)
        f0 = np.asarray(fn(X))
        d1 = []
        d2 = [[None] * m for _ in range(m)]
        for k in range(m):
            e = np.zeros(m)
            e[k] = h1
            d1.append((np.asarray(fn(X + e)) - np.asarray(fn(X - e))) / (2 * h1))
        for k in range(m):
            for l in range(k, m):
                ek = np.zeros(m)
                el = np.zeros(m)
                ek[k] = h2
                el[l] = h2
                val = (np.asarray(fn(X + ek + el)) - np.asarray(fn(X + ek - el))
                       - np.asarray(fn(X - ek + el)) + np.asarray(fn(X - ek - el))) / (4 * h2 * h2)
                d2[k][l] = d2[l][k] = val
        bdim = X.ndim - 1
        d1 = np.stack(d1, axis=bdim)
        d2 = np.stack([np.stack(row, axis=bdim) for row in d2], axis=bdim)
        return f0, d1, d2

    def conformal(self, X):
        return self._partials(self._c, np.asarray(X, float), self.n + 1)

    def spatial(self, X):
        return self._partials(self._g0, np.asarray(X, float), self.n + 1)


# ---------------------------------------------------------------------------
# pointwise tensors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricAtPoint:
    """Metric data at one point (``point`` has ``n+1`` coordinates)."""

    point: np.ndarray
    g: np.ndarray
    ginv: np.ndarray
    G: float
    christoffel: np.ndarray  # [k, i, j] = Gamma^k_ij
    dg: np.ndarray
    riemann: Optional[np.ndarray] = None  # [l, i, j, k] = R^l_ijk

    @property
    def dim(self) -> int:
        return self.g.shape[0]

    def inner(self, v, w) -> complex:
        return np.asarray(v) @ self.g @ np.asarray(w)

    def co_inner(self, xi, eta) -> complex:
        return np.asarray(xi) @ self.ginv @ np.asarray(eta)


def metric_data(closure: MetricClosure, X: np.ndarray, order: int = 1) -> dict:
    """Batched metric quantities at points ``X`` of shape ``(..., n+1)``.

    Returns a dict with ``g, ginv, G, dg, dginv, dG, christoffel`` and, when
    ``order >= 2``, ``d2g`` and ``dchristoffel[..., m, k, i, j]``.
    """
    X = np.asarray(X, dtype=float)
    parts = closure.full(X, order=max(order, 1))
    g, dg = parts[0], parts[1]
    ginv = np.linalg.inv(g)
    G = np.sqrt(np.abs(np.linalg.det(g)))
    dginv = -np.einsum("...ia,...kab,...bj->...kij", ginv, dg, ginv, optimize=True)
    dG = 0.5 * G[..., None] * np.einsum("...ab,...kab->...k", ginv, dg)
    # Gamma_{l i j} (first kind, lowered): 1/2 (d_i g_lj + d_j g_li - d_l g_ij)
    low = 0.5 * (np.einsum("...ilj->...lij", dg) + np.einsum("...jli->...lij", dg)
                 - dg)
    chris = np.einsum("...kl,...lij->...kij", ginv, low)
    out = dict(g=g, ginv=ginv, G=G, dg=dg, dginv=dginv, dG=dG, christoffel=chris)
    if order >= 2:
        d2g = parts[2]
        # d_m low_{l i j}
        dlow = 0.5 * (np.einsum("...milj->...mlij", d2g) + np.einsum("...mjli->...mlij", d2g)
                      - d2g)
        dchris = (np.einsum("...mkl,...lij->...mkij", dginv, low)
                  + np.einsum("...kl,...mlij->...mkij", ginv, dlow))
        out["d2g"] = d2g
        out["dchristoffel"] = dchris
    return out


def _riemann_from(chris: np.ndarray, dchris: np.ndarray) -> np.ndarray:
    r"""``R^r_{s m n} = d_m G^r_{ns} - d_n G^r_{ms} + G^r_{ml} G^l_{ns} - G^r_{nl} G^l_{ms}``."""
    t1 = np.einsum("...mrns->...rsmn", dchris)
    quad = np.einsum("...rml,...lns->...rsmn", chris, chris)
    R = t1 - np.swapaxes(t1, -1, -2) + quad - np.swapaxes(quad, -1, -2)
    return R


def _require_inside(closure: MetricClosure, point, chart: Optional[CoordinateChart]):
    p = np.asarray(point, dtype=float)
    if p.shape != (closure.n + 1,):
        raise GeometryError(f"point must have {closure.n + 1} coordinates")
    if not np.all(np.isfinite(p)):
        raise GeometryError("point has non-finite coordinates")
    if chart is not None and not chart.contains(p):
        raise GeometryError("point lies outside the chart")
    return p


def metric_at(closure: MetricClosure, point, chart: Optional[CoordinateChart] = None,
              with_riemann: bool = False) -> MetricAtPoint:
    """Assemble ``g``, ``g^{-1}``, ``G`` and Christoffel symbols at ``point``."""
    p = _require_inside(closure, point, chart)
    c = closure.conformal(p)[0]
    if not c > 0:
        raise GeometryError(f"non-positive conformal factor {float(c)!r}")
    g0 = closure.spatial(p)[0]
    if np.linalg.eigvalsh(0.5 * (g0 + g0.T)).min() <= 0:
        raise GeometryError("singular or indefinite g0")
    d = metric_data(closure, p, order=2 if with_riemann else 1)
    R = _riemann_from(d["christoffel"], d["dchristoffel"]) if with_riemann else None
    return MetricAtPoint(point=p, g=d["g"], ginv=d["ginv"], G=float(d["G"]),
                         christoffel=d["christoffel"], dg=d["dg"], riemann=R)


def riemann_at(closure: MetricClosure, point, chart: Optional[CoordinateChart] = None,
               lowered: bool = True) -> np.ndarray:
    """Riemann tensor at ``point``.

    With ``lowered`` the result is ``R_{ijkl} = g_{im} R^m_{jkl}``; the
    sectional-curvature convention is ``g(R(X,Y)Y,X) = R_{ijkl} X^i Y^j X^k Y^l``.
    """
    if not closure.has_second_derivatives:
        raise GeometryError("closure lacks second derivatives")
    m = metric_at(closure, point, chart, with_riemann=True)
    if lowered:
        return np.einsum("im,mjkl->ijkl", m.g, m.riemann)
    return m.riemann


def riemann_batch(closure: MetricClosure, X: np.ndarray) -> np.ndarray:
    """Lowered Riemann tensors at a batch of points."""
    d = metric_data(closure, X, order=2)
    R = _riemann_from(d["christoffel"], d["dchristoffel"])
    return np.einsum("...im,...mjkl->...ijkl", d["g"], R)


# ---------------------------------------------------------------------------
# vectors and covectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TangentVector:
    """Vector or covector components at a base point."""

    point: np.ndarray
    components: np.ndarray
    covariant: bool = False  # True for covectors

    def lower(self, g_at: MetricAtPoint) -> "TangentVector":
        if self.covariant:
            return self
        return TangentVector(self.point, g_at.g @ self.components, True)

    def raise_index(self, g_at: MetricAtPoint) -> "TangentVector":
        if not self.covariant:
            return self
        return TangentVector(self.point, g_at.ginv @ self.components, False)


def Cotangent(point, components) -> TangentVector:
    return TangentVector(np.asarray(point, float), np.asarray(components), True)


@dataclass(frozen=True)
class Classification:
    causal: str  # spacelike | timelike | lightlike | zero
    orientation: str  # future | past | neither
    norm: float


def classify_vector(g_at: MetricAtPoint, v, tol: float = NULL_TOL,
                    literal_orientation: bool = True) -> Classification:
    r"""Causal type and time orientation of ``v``.

    ``v`` is lightlike when ``|g(v,v)| <= tol * |v|^2``.  With
    ``literal_orientation`` a causal ``v`` is future pointing iff
    ``g(v, \partial_t) > 0``; otherwise iff ``g(v, \partial_t) < 0`` (i.e. the
    time component of ``v`` is positive).  A covector (``TangentVector`` with
    ``covariant=True``) is classified through its metric dual.
    """
    if isinstance(v, TangentVector):
        comps = v.raise_index(g_at).components
    else:
        comps = np.asarray(v, dtype=float)
    scale = float(np.dot(comps, comps))
    if scale == 0.0:
        return Classification("zero", "neither", 0.0)
    q = float(comps @ g_at.g @ comps)
    if abs(q) <= tol * scale:
        kind = "lightlike"
    elif q < 0:
        kind = "timelike"
    else:
        kind = "spacelike"
    if kind == "spacelike":
        return Classification(kind, "neither", q)
    s = float(comps @ g_at.g[:, 0])
    if not literal_orientation:
        s = -s
    return Classification(kind, "future" if s > 0 else "past", q)


@dataclass(frozen=True)
class NullFrame:
    covectors: np.ndarray  # (n+1, n+1), rows are covectors
    condition: float
    null_defect: float


def null_covector_frame(g_at: MetricAtPoint) -> NullFrame:
    r"""``n+1`` null covectors ``dt + beta (\pm e_a)`` spanning ``T^*_p M``.

    For each spatial direction ``e`` (``+e_1, -e_1, +e_2, ...``) the positive root
    ``beta`` of ``<dt + beta e, dt + beta e> = 0`` is taken.  All covectors have
    positive ``dt`` component.
    """
    ginv = g_at.ginv
    m = ginv.shape[0]
    if not np.all(np.isfinite(ginv)) or abs(np.linalg.det(g_at.g)) < 1e-300:
        raise GeometryError("degenerate metric")
    n = m - 1
    dirs = [(1, 1.0), (1, -1.0)] + [(a, 1.0) for a in range(2, n + 1)]
    rows = []
    for a, sgn in dirs:
        e = np.zeros(m)
        e[a] = sgn
        A = e @ ginv @ e
        Bc = 2.0 * ginv[0] @ e
        C = ginv[0, 0]
        if A <= 0 or C >= 0:
            raise GeometryError("metric is not Lorentzian with timelike t")
        disc = Bc * Bc - 4 * A * C
        beta = (-Bc + np.sqrt(disc)) / (2 * A)
        xi = e * beta
        xi[0] = 1.0
        rows.append(xi)
    F = np.array(rows)
    gram = F @ F.T
    cond = float(np.linalg.cond(gram))
    defect = float(np.max(np.abs(np.einsum("ai,ij,aj->a", F, ginv, F))))
    return NullFrame(F, cond, defect)


# ---------------------------------------------------------------------------
# H1
# ---------------------------------------------------------------------------


@dataclass
class H1Report:
    max_value: float
    witness_point: Optional[np.ndarray]
    witness_vectors: Optional[tuple[np.ndarray, np.ndarray]]
    samples: int
    vacuous: bool = False
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.max_value <= H1_TOL)

    def to_json(self) -> dict:
        return {
            "max_value": float(self.max_value),
            "witness_point": None if self.witness_point is None else self.witness_point.tolist(),
            "witness_vectors": None if self.witness_vectors is None
            else [v.tolist() for v in self.witness_vectors],
            "samples": int(self.samples),
            "vacuous": bool(self.vacuous),
            "pass": bool(self.passed),
        }


def _random_null(g: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Future-directed (t-component positive) null vector for metric ``g``."""
    m = g.shape[0]
    w = rng.normal(size=m - 1)
    w /= np.linalg.norm(w)
    e = np.concatenate([[0.0], w])
    # solve g(dt + b e, dt + b e) = 0 for b > 0
    A = e @ g @ e
    Bc = 2.0 * g[0] @ e
    C = g[0, 0]
    b = (-Bc + np.sqrt(Bc * Bc - 4 * A * C)) / (2 * A)
    v = b * e
    v[0] = 1.0
    return v


def h1_scan(closure: MetricClosure, chart: CoordinateChart, sample_count: int = 10_000,
            seed: int = 0, max_rejections: int = 1000) -> H1Report:
    r"""Sampled falsifier for ``g(R(N,v)v,N) <= 0``.

    Draws points uniformly in the chart, a null ``N`` and a spacelike ``v`` with
    ``g(v, N) = 0``.  In one space dimension the constraint set contains no
    spacelike vector (the orthogonal complement of a null line is the line
    itself), so the condition holds vacuously.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    m = closure.n + 1
    if closure.n == 1:
        return H1Report(0.0, None, None, 0, vacuous=True)
    lo = np.array([-chart.T] + [0.0] * closure.n)
    hi = np.array([chart.T] + list(chart.lengths))
    pts = lo + (hi - lo) * rng.random((sample_count, m))
    d = metric_data(closure, pts, order=2)
    R = _riemann_from(d["christoffel"], d["dchristoffel"])
    Rlow = np.einsum("...im,...mjkl->...ijkl", d["g"], R)
    best = -np.inf
    wit = (None, None)
    wp = None
    for s in range(sample_count):
        g = d["g"][s]
        N = _random_null(g, rng)
        gN = g @ N
        rejects = 0
        while True:
            r = rng.normal(size=m)
            v = r - (gN @ r) / (gN @ gN) * gN  # Euclidean projection onto {g(., N) = 0}
            q = v @ g @ v
            if q > NULL_TOL * (v @ v):
                break
            rejects += 1
            if rejects >= max_rejections:
                raise GeometryError("rejection sampling for spacelike v failed")
        v = v / np.sqrt(q)
        val = float(np.einsum("ijkl,i,j,k,l->", Rlow[s], N, v, N, v))
        if val > best:
            best = val
            wp = pts[s].copy()
            wit = (N, v)
    return H1Report(best, wp, wit, sample_count)


def sectional_value(closure: MetricClosure, point, N, v) -> float:
    """``g(R(N,v)v,N)`` at a point."""
    R = riemann_at(closure, point)
    return float(np.einsum("ijkl,i,j,k,l->", R, N, v, N, v))
