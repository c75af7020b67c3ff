r"""Bundle algebra over a single global trivialization.

A connection is ``\nabla = d + B`` with ``B = B_i dx^i`` and ``B_i`` in the Lie
algebra of ``U(N)`` or ``SU(N)``; endomorphism fields are differentiated with
``\nabla A = dA + [B, A]``.  The connection Laplacian is taken in divergence
form

.. math::

    \Box u = -G^{-1} \nabla_i \bigl(g^{ij} G \nabla_j u\bigr),

and ``P = \Box + V``.  The fibre inner product is ``<u, v> = v^H u``.

Pointwise operations accept either an :class:`AnalyticTestField` (value and
partials from closed forms, evaluated at given points) or a
:class:`BundleField` sampled on a chart (partials by fourth-order differences).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .geometry import CoordinateChart, MetricAtPoint, MetricClosure, metric_data


class BundleError(ValueError):
    """Raised for inputs that violate group, shape or rank requirements."""


def _dag(M: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(M, -1, -2))


def _mv(M, v):
    return np.matmul(M, v[..., None])[..., 0]


# ---------------------------------------------------------------------------
# structure group
# ---------------------------------------------------------------------------


class GaugeGroupSpec:
    """``U(N)`` or ``SU(N)``, or a user subgroup given by projector and retraction."""

    def __init__(self, N: int, kind: str = "U", projector: Optional[Callable] = None,
                 retraction: Optional[Callable] = None):
        if kind not in ("U", "SU", "custom"):
            raise BundleError(f"unknown group kind {kind!r}")
        if kind == "custom" and (projector is None or retraction is None):
            raise BundleError("custom groups need a projector and a retraction")
        self.N = int(N)
        self.kind = kind
        self._projector = projector
        self._retraction = retraction

    @property
    def tag(self) -> str:
        return f"{self.kind}({self.N})" if self.kind != "custom" else "custom"

    def project(self, X: np.ndarray) -> np.ndarray:
        """Orthogonal projection onto the Lie algebra."""
        if self._projector is not None:
            return self._projector(X)
        Y = 0.5 * (X - _dag(X))
        if self.kind == "SU":
            tr = np.trace(Y, axis1=-2, axis2=-1) / self.N
            Y = Y - tr[..., None, None] * np.eye(self.N)
        return Y

    def algebra_defect(self, X: np.ndarray) -> float:
        X = np.asarray(X, dtype=complex)
        if X.size == 0:
            return 0.0
        return float(np.max(np.abs(X - self.project(X))))

    def in_algebra(self, X, tol: float = 1e-10) -> bool:
        return self.algebra_defect(X) <= tol

    def group_defect(self, A: np.ndarray) -> float:
        A = np.asarray(A, dtype=complex)
        if A.size == 0:
            return 0.0
        d = float(np.max(np.abs(_dag(A) @ A - np.eye(self.N))))
        if self.kind == "SU":
            d = max(d, float(np.max(np.abs(np.linalg.det(A) - 1.0))))
        return d

    def in_group(self, A, tol: float = 1e-10) -> bool:
        return self.group_defect(A) <= tol

    def retract(self, A: np.ndarray) -> np.ndarray:
        """Nearest group element by polar decomposition."""
        if self._retraction is not None:
            return self._retraction(A)
        U, _, Vh = np.linalg.svd(A)
        Q = U @ Vh
        if self.kind == "SU":
            det = np.linalg.det(Q)
            Q = Q * (det ** (-1.0 / self.N))[..., None, None]
        return Q

    def random_algebra(self, rng: np.random.Generator, size=(), scale: float = 1.0) -> np.ndarray:
        shape = tuple(np.atleast_1d(size).astype(int)) if size != () else ()
        Z = rng.normal(size=shape + (self.N, self.N)) + 1j * rng.normal(size=shape + (self.N, self.N))
        return scale * self.project(Z)

    def basis(self) -> list[np.ndarray]:
        """Real basis of the Lie algebra (``i`` times Hermitian generators)."""
        N = self.N
        out = []
        for a in range(N):
            for b in range(a + 1, N):
                E = np.zeros((N, N), complex)
                E[a, b], E[b, a] = 1, -1
                out.append(E)
                F = np.zeros((N, N), complex)
                F[a, b] = F[b, a] = 1j
                out.append(F)
        for a in range(N):
            D = np.zeros((N, N), complex)
            D[a, a] = 1j
            out.append(D)
        if self.kind == "SU":
            diag = [self.project(D) for D in out[-N:]]
            out = out[:-N] + diag[:-1]
        return out


# ---------------------------------------------------------------------------
# coefficient data
# ---------------------------------------------------------------------------


class ConnectionData:
    r"""Connection matrices ``B_i(X)`` with partials.

    ``evaluate(X)`` returns ``(B, dB)`` with ``B[..., i]`` the matrix ``B_i``
    and ``dB[..., k, i] = \partial_k B_i``.
    """

    def __init__(self, group: GaugeGroupSpec, n: int, evaluate: Callable, name: str = "connection"):
        self.group = group
        self.n = int(n)
        self._evaluate = evaluate
        self.name = name

    @property
    def N(self) -> int:
        return self.group.N

    def __call__(self, X) -> np.ndarray:
        return self.evaluate(X)[0]

    def evaluate(self, X):
        X = np.asarray(X, dtype=float)
        B, dB = self._evaluate(X)
        return np.asarray(B, dtype=complex), np.asarray(dB, dtype=complex)

    def defect(self, X) -> float:
        """Largest distance of sampled ``B_i`` from the Lie algebra."""
        return self.group.algebra_defect(self(X))

    # constructors ------------------------------------------------------
    @classmethod
    def zero(cls, N: int, n: int, kind: str = "U") -> "ConnectionData":
        return cls.constant(np.zeros((n + 1, N, N), complex), GaugeGroupSpec(N, kind), name="zero")

    @classmethod
    def constant(cls, mats, group: GaugeGroupSpec, name: str = "constant") -> "ConnectionData":
        mats = np.asarray(mats, dtype=complex)
        m = mats.shape[0]

        def ev(X):
            batch = X.shape[:-1]
            return (np.broadcast_to(mats, batch + mats.shape).copy(),
                    np.zeros(batch + (m,) + mats.shape, complex))

        return cls(group, m - 1, ev, name=name)

    @classmethod
    def smooth_random(cls, N: int, n: int, seed: int = 0, amplitude: float = 0.5, modes: int = 3,
                      wavenumber: float = 2.0, kind: str = "U", constant: bool = True,
                      skew: bool = True) -> "ConnectionData":
        """Sum of a constant and a few Fourier modes with Lie-algebra coefficients.

        With ``skew=False`` the coefficients are arbitrary complex matrices, which
        gives a connection that is not compatible with the Hermitian structure.
        """
        rng = np.random.default_rng(seed)
        group = GaugeGroupSpec(N, kind)
        m = n + 1

        def coeff(size):
            if skew:
                return group.random_algebra(rng, size)
            return rng.normal(size=size + (N, N)) + 1j * rng.normal(size=size + (N, N))

        C0 = coeff((m,)) * (amplitude if constant else 0.0)
        C = coeff((modes, m)) * amplitude
        K = rng.normal(size=(modes, m)) * wavenumber
        ph = rng.uniform(0, 2 * np.pi, size=modes)

        def ev(X):
            th = X @ K.T + ph  # (..., modes)
            s, c = np.sin(th), np.cos(th)
            B = C0 + np.einsum("...q,qiab->...iab", s, C)
            dB = np.einsum("...q,qk,qiab->...kiab", c, K, C)
            return B, dB

        return cls(group, n, ev, name=f"random-{seed}")

    @classmethod
    def affine_random(cls, N: int, n: int, seed: int = 0, amplitude: float = 0.5,
                      slope: float = 0.5, kind: str = "U") -> "ConnectionData":
        """``B_i(X) = S_i + sum_k X_k T_{ik}`` with Lie-algebra coefficients (all jets exact)."""
        rng = np.random.default_rng(seed)
        group = GaugeGroupSpec(N, kind)
        m = n + 1
        S = group.random_algebra(rng, (m,)) * amplitude
        T = group.random_algebra(rng, (m, m)) * slope  # T[i, k]

        def ev(X):
            B = S + np.einsum("...k,ikab->...iab", X, T)
            dB = np.broadcast_to(np.swapaxes(T, 0, 1), X.shape[:-1] + (m, m, N, N)).copy()
            return B, dB

        return cls(group, n, ev, name=f"affine-{seed}")

    @classmethod
    def from_callable(cls, group: GaugeGroupSpec, n: int, fn: Callable,
                      dfn: Optional[Callable] = None, name: str = "callable") -> "ConnectionData":
        """Wrap ``fn(X) -> B``; partials fall back to fourth-order central differences."""
        if dfn is None:
            dfn = _fd_partials(fn, n + 1)
        return cls(group, n, lambda X: (fn(X), dfn(X)), name=name)


class PotentialData:
    """Hermitian potential ``V(X)`` with optional first partials."""

    def __init__(self, N: int, evaluate: Callable, name: str = "potential",
                 gradient: Optional[Callable] = None):
        self.N = int(N)
        self._evaluate = evaluate
        self._gradient = gradient
        self.name = name

    def gradient(self, X, step: float = 1e-4) -> np.ndarray:
        """``dV[..., k] = \\partial_k V``; central differences when no closed form was given."""
        X = np.asarray(X, float)
        if self._gradient is not None:
            return np.asarray(self._gradient(X), dtype=complex)
        cols = []
        for k in range(X.shape[-1]):
            e = np.zeros(X.shape[-1])
            e[k] = step
            cols.append((self(X + e) - self(X - e)) / (2 * step))
        return np.stack(cols, axis=-3)

    def __call__(self, X) -> np.ndarray:
        return np.asarray(self._evaluate(np.asarray(X, float)), dtype=complex)

    def defect(self, X) -> float:
        V = self(X)
        return float(np.max(np.abs(V - _dag(V)))) if V.size else 0.0

    @classmethod
    def zero(cls, N: int) -> "PotentialData":
        return cls.constant(np.zeros((N, N), complex), name="zero")

    @classmethod
    def constant(cls, V, name: str = "constant") -> "PotentialData":
        V = np.asarray(V, dtype=complex)
        return cls(V.shape[0], lambda X: np.broadcast_to(V, X.shape[:-1] + V.shape).copy(), name)

    @classmethod
    def smooth_random(cls, N: int, n: int, seed: int = 0, amplitude: float = 0.5, modes: int = 3,
                      wavenumber: float = 2.0) -> "PotentialData":
        rng = np.random.default_rng(seed + 7919)
        m = n + 1

        def herm(size):
            Z = rng.normal(size=size + (N, N)) + 1j * rng.normal(size=size + (N, N))
            return 0.5 * (Z + _dag(Z))

        C0 = herm(()) * amplitude
        C = herm((modes,)) * amplitude
        K = rng.normal(size=(modes, m)) * wavenumber
        ph = rng.uniform(0, 2 * np.pi, size=modes)

        def ev(X):
            return C0 + np.einsum("...q,qab->...ab", np.sin(X @ K.T + ph), C)

        return cls(N, ev, name=f"random-{seed}")

    @classmethod
    def affine_random(cls, N: int, n: int, seed: int = 0, amplitude: float = 0.5,
                      slope: float = 0.5) -> "PotentialData":
        """``V(X) = V_0 + sum_k X_k W_k`` with random Hermitian ``V_0, W_k``."""
        rng = np.random.default_rng(seed + 104729)

        def herm(size):
            Z = rng.normal(size=size + (N, N)) + 1j * rng.normal(size=size + (N, N))
            return 0.5 * (Z + _dag(Z))

        V0 = herm(()) * amplitude
        W = herm((n + 1,)) * slope

        def ev(X):
            return V0 + np.einsum("...k,kab->...ab", X, W)

        def grad(X):
            return np.broadcast_to(W, X.shape[:-1] + W.shape).copy()

        return cls(N, ev, name=f"affine-{seed}", gradient=grad)


def _fd_partials(fn: Callable, m: int, h: float = 1e-3) -> Callable:
    """Fourth-order central-difference partials of ``fn`` stacked after the batch axes."""

    def d(X):
        X = np.asarray(X, float)
        out = []
        for k in range(m):
            e = np.zeros(m)
            e[k] = h
            out.append((-fn(X + 2 * e) + 8 * fn(X + e) - 8 * fn(X - e) + fn(X - 2 * e)) / (12 * h))
        return np.stack(out, axis=X.ndim - 1)

    return d


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------


class AnalyticTestField:
    """ℂ^N- or ℂ^{N×N}-valued function with closed-form first and second partials.

    ``fn(X)`` returns ``(value, d1, d2)`` of shapes ``(...,) + fiber``,
    ``(..., m) + fiber`` and ``(..., m, m) + fiber``.
    """

    def __init__(self, fn: Callable, kind: str, N: int, m: int):
        if kind not in ("section", "endomorphism"):
            raise BundleError(f"unknown field kind {kind!r}")
        self.fn = fn
        self.kind = kind
        self.N = int(N)
        self.m = int(m)

    @property
    def fiber(self) -> tuple[int, ...]:
        return (self.N,) if self.kind == "section" else (self.N, self.N)

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        v, d1, d2 = self.fn(X)
        return (np.asarray(v, complex), np.asarray(d1, complex), np.asarray(d2, complex))

    # algebra -------------------------------------------------------------
    def __add__(self, other: "AnalyticTestField") -> "AnalyticTestField":
        if other.kind != self.kind:
            raise BundleError("cannot add fields of different kinds")

        def fn(X):
            a, b = self(X), other(X)
            return tuple(x + y for x, y in zip(a, b))

        return AnalyticTestField(fn, self.kind, self.N, self.m)

    def scale(self, s: complex) -> "AnalyticTestField":
        return AnalyticTestField(lambda X: tuple(s * p for p in self(X)), self.kind, self.N, self.m)

    def apply_to(self, u: "AnalyticTestField") -> "AnalyticTestField":
        """Pointwise product ``A u`` (``self`` an endomorphism field) with Leibniz partials."""
        if self.kind != "endomorphism":
            raise BundleError("apply_to needs an endomorphism field")
        mul = _mv if u.kind == "section" else np.matmul

        def fn(X):
            A, dA, d2A = self(X)
            v, dv, d2v = u(X)
            val = mul(A, v)
            d1 = mul(dA, _expand(v, 1, u.kind)) + mul(_expand(A, 1, "endomorphism"), dv)
            cross = mul(dA[..., :, None, :, :], _expand_j(dv, u.kind)) + \
                mul(_expand_j(dA, "endomorphism"), _expand_i(dv, u.kind))
            d2 = mul(d2A, _expand(v, 2, u.kind)) + cross + mul(_expand(A, 2, "endomorphism"), d2v)
            return val, d1, d2

        return AnalyticTestField(fn, u.kind, self.N, self.m)

    def inverse(self) -> "AnalyticTestField":
        """Pointwise matrix inverse with exact partials."""
        if self.kind != "endomorphism":
            raise BundleError("inverse needs an endomorphism field")

        def fn(X):
            A, dA, d2A = self(X)
            Ai = np.linalg.inv(A)
            Ai1 = Ai[..., None, :, :]
            Ai2 = Ai[..., None, None, :, :]
            d1 = -Ai1 @ dA @ Ai1
            t = dA[..., :, None, :, :] @ Ai2 @ dA[..., None, :, :, :]
            d2 = Ai2 @ (t + np.swapaxes(t, -3, -4) - d2A) @ Ai2
            return Ai, d1, d2

        return AnalyticTestField(fn, "endomorphism", self.N, self.m)

    # constructors --------------------------------------------------------
    @classmethod
    def from_scalar(cls, scalar: Callable, amplitude) -> "AnalyticTestField":
        """``s(X) * amplitude`` for a scalar profile returning ``(s, ds, d2s)``."""
        amp = np.asarray(amplitude, dtype=complex)
        kind = "section" if amp.ndim == 1 else "endomorphism"
        k = amp.ndim

        def fn(X):
            s, ds, d2s = scalar(X)
            ex = (None,) * k
            return (s[(...,) + ex] * amp, ds[(...,) + ex] * amp, d2s[(...,) + ex] * amp)

        return cls(fn, kind, amp.shape[0], getattr(scalar, "m", 0))

    @classmethod
    def constant(cls, value, m: int) -> "AnalyticTestField":
        return cls.from_scalar(ScalarProfile.constant(m, 1.0), value)

    @classmethod
    def identity(cls, N: int, m: int) -> "AnalyticTestField":
        return cls.constant(np.eye(N), m)

    @classmethod
    def plane_wave(cls, k: Sequence[float], amplitude) -> "AnalyticTestField":
        return cls.from_scalar(ScalarProfile.plane_wave(k), amplitude)

    @classmethod
    def random_section(cls, N: int, m: int, seed: int = 0, terms: int = 3,
                       envelope: Optional["ScalarProfile"] = None) -> "AnalyticTestField":
        """Sum of random complex plane waves times an optional envelope."""
        rng = np.random.default_rng(seed)
        f = None
        for _ in range(terms):
            amp = rng.normal(size=N) + 1j * rng.normal(size=N)
            prof = ScalarProfile.plane_wave(rng.normal(size=m) * 1.5)
            if envelope is not None:
                prof = prof * envelope
            g = cls.from_scalar(prof, amp)
            f = g if f is None else f + g
        return f

    @classmethod
    def random_endomorphism(cls, N: int, m: int, seed: int = 0, terms: int = 2) -> "AnalyticTestField":
        rng = np.random.default_rng(seed)
        f = None
        for _ in range(terms):
            amp = rng.normal(size=(N, N)) + 1j * rng.normal(size=(N, N))
            g = cls.from_scalar(ScalarProfile.plane_wave(rng.normal(size=m)), amp)
            f = g if f is None else f + g
        return f


def _expand_i(d: np.ndarray, kind: str) -> np.ndarray:
    """``d[..., i, fibre] -> d[..., i, None, fibre]``."""
    return d[..., :, None, :] if kind == "section" else d[..., :, None, :, :]


def _expand_j(d: np.ndarray, kind: str) -> np.ndarray:
    """``d[..., j, fibre] -> d[..., None, j, fibre]``."""
    return d[..., None, :, :] if kind == "section" else d[..., None, :, :, :]


def _expand(v: np.ndarray, count: int, kind: str) -> np.ndarray:
    """Insert ``count`` derivative axes just before the fibre axes."""
    k = 1 if kind == "section" else 2
    idx = (Ellipsis,) + (None,) * count + (slice(None),) * k
    return v[idx]


class ScalarProfile:
    """Real or complex scalar function with closed-form partials, composable by products."""

    def __init__(self, fn: Callable, m: int):
        self.fn = fn
        self.m = int(m)

    def __call__(self, X):
        return self.fn(np.asarray(X, float))

    def __mul__(self, other: "ScalarProfile") -> "ScalarProfile":
        def fn(X):
            a, da, d2a = self(X)
            b, db, d2b = other(X)
            val = a * b
            d1 = da * b[..., None] + a[..., None] * db
            d2 = (d2a * b[..., None, None] + a[..., None, None] * d2b
                  + da[..., :, None] * db[..., None, :] + db[..., :, None] * da[..., None, :])
            return val, d1, d2

        return ScalarProfile(fn, self.m)

    def __add__(self, other: "ScalarProfile") -> "ScalarProfile":
        return ScalarProfile(lambda X: tuple(p + q for p, q in zip(self(X), other(X))), self.m)

    @classmethod
    def constant(cls, m: int, c: complex = 1.0) -> "ScalarProfile":
        def fn(X):
            b = X.shape[:-1]
            return np.full(b, c, dtype=complex), np.zeros(b + (m,), complex), np.zeros(b + (m, m), complex)

        return cls(fn, m)

    @classmethod
    def plane_wave(cls, k: Sequence[float], phase: float = 0.0) -> "ScalarProfile":
        k = np.asarray(k, float)
        m = k.size

        def fn(X):
            e = np.exp(1j * (X @ k + phase))
            return e, 1j * e[..., None] * k, -e[..., None, None] * np.outer(k, k)

        return cls(fn, m)

    @classmethod
    def linear(cls, coeffs: Sequence[float], offset: float = 0.0) -> "ScalarProfile":
        a = np.asarray(coeffs, float)
        m = a.size

        def fn(X):
            b = X.shape[:-1]
            return ((X @ a + offset).astype(complex), np.broadcast_to(a, b + (m,)).astype(complex),
                    np.zeros(b + (m, m), complex))

        return cls(fn, m)

    @classmethod
    def monomial(cls, powers: Sequence[int]) -> "ScalarProfile":
        p = np.asarray(powers, int)
        m = p.size

        def fn(X):
            def mono(q):
                if np.any(q < 0):
                    return np.zeros(X.shape[:-1])
                return np.prod(X ** q, axis=-1)

            val = mono(p)
            d1 = np.stack([p[k] * mono(p - np.eye(m, dtype=int)[k]) for k in range(m)], -1)
            d2 = np.empty(X.shape[:-1] + (m, m))
            for k in range(m):
                for l in range(m):
                    q = p - np.eye(m, dtype=int)[k]
                    coef = p[k] * (q[l])
                    d2[..., k, l] = coef * mono(q - np.eye(m, dtype=int)[l])
            return val.astype(complex), d1.astype(complex), d2.astype(complex)

        return cls(fn, m)

    @classmethod
    def gaussian(cls, center: Sequence[float], width: float) -> "ScalarProfile":
        c = np.asarray(center, float)
        m = c.size
        w2 = float(width) ** 2

        def fn(X):
            y = X - c
            e = np.exp(-np.sum(y * y, -1) / w2)
            dq = -2 * y / w2
            d1 = e[..., None] * dq
            d2 = e[..., None, None] * (dq[..., :, None] * dq[..., None, :] - 2 * np.eye(m) / w2)
            return e.astype(complex), d1.astype(complex), d2.astype(complex)

        return cls(fn, m)

    @classmethod
    def bump(cls, center: Sequence[float], radius: float) -> "ScalarProfile":
        r"""``exp(1 - 1/(1 - rho))`` with ``rho = |X - center|^2 / radius^2``, zero for ``rho >= 1``."""
        c = np.asarray(center, float)
        m = c.size
        R2 = float(radius) ** 2

        def fn(X):
            y = X - c
            rho = np.sum(y * y, -1) / R2
            inside = rho < 1
            q = np.where(inside, 1 - rho, 1.0)
            f = np.where(inside, np.exp(1 - 1 / q), 0.0)
            s1 = -1 / q ** 2
            s2 = -2 / q ** 3
            drho = 2 * y / R2
            d1 = (f * s1)[..., None] * drho
            d2 = (f * (s1 * s1 + s2))[..., None, None] * drho[..., :, None] * drho[..., None, :] \
                + (f * s1)[..., None, None] * (2 * np.eye(m) / R2)
            return f.astype(complex), d1.astype(complex), d2.astype(complex)

        return cls(fn, m)


def gauge_section(profiles: Sequence[ScalarProfile], generators: Sequence[np.ndarray]) -> AnalyticTestField:
    r"""``A = exp(theta_1 H_1) exp(theta_2 H_2) ...`` for real profiles ``theta_k``.

    With skew-Hermitian ``H_k`` the result is unitary; it equals the identity
    wherever all ``theta_k`` vanish.
    """
    gens = [np.asarray(H, complex) for H in generators]
    N = gens[0].shape[0]
    m = profiles[0].m

    def factor(th, H):
        def fn(X):
            s, ds, d2s = th(X)
            s, ds, d2s = s.real, ds.real, d2s.real
            E = expm(s[..., None, None] * H) if s.ndim else expm(s * H)
            HE = H @ E
            HHE = H @ HE
            d1 = ds[..., :, None, None] * HE[..., None, :, :]
            d2 = (d2s[..., :, :, None, None] * HE[..., None, None, :, :]
                  + (ds[..., :, None] * ds[..., None, :])[..., None, None] * HHE[..., None, None, :, :])
            return E, d1, d2

        return AnalyticTestField(fn, "endomorphism", N, m)

    A = factor(profiles[0], gens[0])
    for th, H in zip(profiles[1:], gens[1:]):
        A = A.apply_to(factor(th, H))
    return A


def boundary_identity_gauge(n: int, N: int, seed: int = 0, amplitude: float = 1.0,
                            lengths: Sequence[float] | None = None, factors: int = 2,
                            kind: str = "U") -> AnalyticTestField:
    """Random gauge section equal to the identity on the lateral boundary.

    Each angle is ``amplitude * Re(plane wave) * prod_a x_a (L_a - x_a)``.
    """
    group = GaugeGroupSpec(N, kind)
    rng = np.random.default_rng(seed)
    m = n + 1
    L = np.ones(n) if lengths is None else np.asarray(lengths, float)
    gens, profs = [], []
    for _ in range(factors):
        gens.append(group.random_algebra(rng))
        wave = ScalarProfile.plane_wave(rng.normal(size=m), phase=rng.uniform(0, 2 * np.pi))
        prof = ScalarProfile(lambda X, w=wave: tuple(amplitude * np.real(a) for a in w(X)), m)
        for a in range(n):
            e = np.eye(m)[a + 1]
            prof = prof * ScalarProfile.linear(e, 0.0) * ScalarProfile.linear(-e, L[a])
        profs.append(prof)
    return gauge_section(profs, gens)


@dataclass
class BundleField:
    """Grid samples of a section, E-valued one-form, or endomorphism field.

    ``values`` has shape ``chart.shape + fiber``; for ``kind == "form"`` the
    fibre is ``(n+1, N)`` with the form index first.
    """

    chart: CoordinateChart
    values: np.ndarray
    kind: str = "section"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.kind not in ("section", "form", "endomorphism"):
            raise BundleError(f"unknown field kind {self.kind!r}")
        if self.values.shape[: len(self.chart.shape)] != self.chart.shape:
            raise BundleError("values do not match the chart shape")

    @property
    def N(self) -> int:
        return self.values.shape[-1]

    @classmethod
    def sample(cls, chart: CoordinateChart, field: AnalyticTestField) -> "BundleField":
        return cls(chart, field(chart.nodes())[0], field.kind)

    def group_defect(self, group: GaugeGroupSpec) -> float:
        if self.kind != "endomorphism":
            raise BundleError("group membership applies to endomorphism fields")
        return group.group_defect(self.values)


def diff4(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Fourth-order first derivative along ``axis``; one-sided five-point stencils at the ends."""
    f = np.moveaxis(np.asarray(f), axis, 0)
    n = f.shape[0]
    if n < 5:
        raise BundleError("fourth-order differences need at least five nodes")
    out = np.empty_like(f)
    out[2:-2] = (-f[4:] + 8 * f[3:-1] - 8 * f[1:-3] + f[:-4]) / (12 * h)
    out[0] = (-25 * f[0] + 48 * f[1] - 36 * f[2] + 16 * f[3] - 3 * f[4]) / (12 * h)
    out[1] = (-3 * f[0] - 10 * f[1] + 18 * f[2] - 6 * f[3] + f[4]) / (12 * h)
    out[-1] = (25 * f[-1] - 48 * f[-2] + 36 * f[-3] - 16 * f[-4] + 3 * f[-5]) / (12 * h)
    out[-2] = (3 * f[-1] + 10 * f[-2] - 18 * f[-3] + 6 * f[-4] - f[-5]) / (12 * h)
    return np.moveaxis(out, 0, axis)


# ---------------------------------------------------------------------------
# pointwise operations
# ---------------------------------------------------------------------------


def _act(Bm: np.ndarray, val: np.ndarray, kind: str) -> np.ndarray:
    if kind == "section":
        return _mv(Bm, val)
    return Bm @ val - val @ Bm


def _compose(M: np.ndarray, val: np.ndarray, kind: str) -> np.ndarray:
    return _mv(M, val) if kind == "section" else M @ val


def _field_points(u, points):
    if isinstance(u, AnalyticTestField):
        if points is None:
            raise BundleError("points are required to evaluate an analytic field")
        return np.asarray(points, float)
    return u.chart.nodes()


def covariant_derivative(B: ConnectionData, u, direction: int, points=None) -> np.ndarray:
    """``\\nabla_i u``: ``d_i + B_i`` on sections, ``d_i + [B_i, .]`` on endomorphisms."""
    m = B.n + 1
    if not 0 <= direction < m:
        raise BundleError(f"direction {direction} out of range for {m} coordinates")
    return np.take(covariant_gradient(B, u, points), direction, axis=_deriv_axis(u))


def _deriv_axis(u) -> int:
    if isinstance(u, AnalyticTestField):
        return -1 - len(u.fiber)
    k = 1 if u.kind == "section" else 2
    return -1 - k


def covariant_gradient(B: ConnectionData, u, points=None) -> np.ndarray:
    """All components ``\\nabla_j u`` stacked on the axis before the fibre axes."""
    X = _field_points(u, points)
    Bv = B(X)
    if isinstance(u, AnalyticTestField):
        val, d1, _ = u(X)
        kind = u.kind
    else:
        kind = u.kind
        val = u.values
        d1 = np.stack([diff4(val, h, ax) for ax, h in enumerate(u.chart.steps)], axis=u.chart.dim)
    return d1 + _act(Bv, _expand(val, 1, kind), kind)


def _grad_and_hessian(B: ConnectionData, u: AnalyticTestField, X):
    """``nabla_j u`` and ``nabla_i nabla_j u`` (second index after first) at ``X``."""
    kind = u.kind
    Bv, dB = B.evaluate(X)
    val, d1, d2 = u(X)
    grad = d1 + _act(Bv, _expand(val, 1, kind), kind)
    # d_i (nabla_j u) = d2_ij + dB_ij u + B_j d_i u
    dgrad = d2 + _act(dB, _expand(val, 2, kind), kind) + _act(Bv[..., None, :, :, :],
                                                              _expand_i(d1, kind), kind)
    # nabla_i nabla_j u = d_i(nabla_j u) + B_i (nabla_j u)
    hess = dgrad + _act(Bv[..., :, None, :, :], _expand_j(grad, kind), kind)
    return val, grad, hess


def _divergence_coeff(md):
    """``a^j = G^{-1} d_i (g^{ij} G)``."""
    return np.einsum("...iij->...j", md["dginv"]) + np.einsum(
        "...ij,...i->...j", md["ginv"], md["dG"]) / md["G"][..., None]


def connection_laplacian(metric: MetricClosure, B: ConnectionData, u, points=None) -> np.ndarray:
    r"""``\Box u = -g^{ij} \nabla_i\nabla_j u - G^{-1}\partial_i(g^{ij}G) \nabla_j u``.

    For a :class:`BundleField` the divergence form is differenced directly.
    """
    if isinstance(u, AnalyticTestField):
        X = np.asarray(points, float)
        md = metric_data(metric, X)
        _, grad, hess = _grad_and_hessian(B, u, X)
        a = _divergence_coeff(md)
        if u.kind == "section":
            lap = -(md["ginv"][..., None] * hess).sum(axis=(-3, -2)) - (a[..., None] * grad).sum(axis=-2)
        else:
            lap = -np.einsum("...ij,...ijab->...ab", md["ginv"], hess) \
                - np.einsum("...j,...jab->...ab", a, grad)
        return lap
    return _grid_laplacian(metric, B, u)


def _grid_laplacian(metric, B, u: BundleField) -> np.ndarray:
    chart = u.chart
    X = chart.nodes()
    md = metric_data(metric, X, order=1)
    grad = covariant_gradient(B, u)
    if u.kind == "section":
        W = np.einsum("...ij,...jn->...in", md["ginv"] * md["G"][..., None, None], grad)
    else:
        W = np.einsum("...ij,...jab->...iab", md["ginv"] * md["G"][..., None, None], grad)
    Bv = B(X)
    total = 0
    for i, h in enumerate(chart.steps):
        Wi = W[..., i, :] if u.kind == "section" else W[..., i, :, :]
        total = total + diff4(Wi, h, i) + _act(Bv[..., i, :, :], Wi, u.kind)
    k = 1 if u.kind == "section" else 2
    return -total / md["G"][(...,) + (None,) * k]


def apply_P(metric: MetricClosure, B: ConnectionData, V: PotentialData, u, points=None) -> np.ndarray:
    """``P u = \\Box u + V u`` (``V A`` by composition for endomorphism fields)."""
    X = _field_points(u, points)
    lap = connection_laplacian(metric, B, u, points)
    val = u(X)[0] if isinstance(u, AnalyticTestField) else u.values
    return lap + _compose(V(X), val, u.kind)


def metric_contraction(metric, X, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    r"""``C(\alpha\otimes\beta) = g^{ij} \alpha_i \beta_j`` with matrix/vector products in the fibre."""
    ginv = metric_data(metric, X)["ginv"]
    if beta.ndim == alpha.ndim - 1:
        prod = np.einsum("...iab,...jb->...ija", alpha, beta)
        return np.einsum("...ij,...ija->...a", ginv, prod)
    prod = alpha[..., :, None, :, :] @ beta[..., None, :, :, :]
    return np.einsum("...ij,...ijab->...ab", ginv, prod)


# ---------------------------------------------------------------------------
# gauge transformations
# ---------------------------------------------------------------------------


@dataclass
class GaugeTransformed:
    connection: ConnectionData
    potential: PotentialData
    raw_defect: Callable  # X -> algebra defect of B' before projection


def gauge_transform(B: ConnectionData, V: PotentialData, A, check_points=None,
                    tol: float = 1e-10, project: bool = True) -> GaugeTransformed:
    r"""``B'_i = A^{-1} B_i A + A^{-1} \partial_i A`` and ``V' = A^{-1} V A``.

    ``A`` is an endomorphism :class:`AnalyticTestField` or a constant matrix.
    Unitarity of ``A`` is verified at ``check_points`` (default: 64 points of
    ``[-1, 1] x [0, 1]^n``).
    """
    m = B.n + 1
    if not isinstance(A, AnalyticTestField):
        A = AnalyticTestField.constant(np.asarray(A, complex), m)
    if check_points is None:
        rng = np.random.default_rng(12345)
        check_points = rng.uniform(0, 1, size=(64, m))
        check_points[:, 0] = 2 * check_points[:, 0] - 1
    defect = B.group.group_defect(A(check_points)[0])
    if defect > tol:
        raise BundleError(f"gauge section is not group valued (defect {defect:.3e})")
    group = B.group

    def raw(X):
        Bv, dB = B.evaluate(X)
        a, da, d2a = A(X)
        ai = np.linalg.inv(a)
        ai1 = ai[..., None, :, :]
        a1 = a[..., None, :, :]
        Bp = ai1 @ Bv @ a1 + ai1 @ da
        # d_k(A^-1) = -A^-1 dA_k A^-1
        dai = -ai1 @ da @ ai1
        k_ = (Ellipsis, slice(None), None, slice(None), slice(None))
        i_ = (Ellipsis, None, slice(None), slice(None), slice(None))
        ai2 = ai[..., None, None, :, :]
        a2 = a[..., None, None, :, :]
        dBp = (dai[k_] @ Bv[i_] @ a2 + ai2 @ dB @ a2 + ai2 @ Bv[i_] @ da[k_]
               + dai[k_] @ da[i_] + ai2 @ d2a)
        return Bp, dBp

    def ev(X):
        Bp, dBp = raw(X)
        if project:
            return group.project(Bp), group.project(dBp)
        return Bp, dBp

    def vev(X):
        a = A(X)[0]
        return np.linalg.inv(a) @ V(X) @ a

    return GaugeTransformed(
        ConnectionData(group, B.n, ev, name=f"{B.name}^A"),
        PotentialData(V.N, vev, name=f"{V.name}^A"),
        lambda X: group.algebra_defect(raw(np.asarray(X, float))[0]),
    )


# ---------------------------------------------------------------------------
# Recovery of an End(E)-valued covector from null contractions
# ---------------------------------------------------------------------------


@dataclass
class ContractionResult:
    A: np.ndarray  # (n+1, N, N): A = A_k dx^k
    condition: float
    residual: float


def contraction_samples(g_at: MetricAtPoint, A: np.ndarray, covectors: np.ndarray):
    """Samples ``(u, C(A u))`` for ``u = xi ⊗ e_j`` over the given covectors and fibre basis."""
    N = A.shape[-1]
    out = []
    for xi in covectors:
        for j in range(N):
            U = np.zeros((len(xi), N), complex)
            U[:, j] = xi
            out.append((U, contract(g_at, A, U)))
    return out


def contract(g_at: MetricAtPoint, A: np.ndarray, U: np.ndarray) -> np.ndarray:
    r"""``C(A u) = g^{kl} A_k u_l`` for ``u = u_l dx^l`` with ``u_l`` in ℂ^N."""
    W = g_at.ginv @ U
    return np.einsum("kab,kb->a", A, W)


def contraction_solve(g_at: MetricAtPoint, samples, rank_tol: float = 1e-10) -> ContractionResult:
    """Least-squares solve for ``A_k`` from samples ``(u, C(A u))``."""
    m = g_at.dim
    if not samples:
        raise BundleError("no samples")
    N = np.asarray(samples[0][1]).shape[-1]
    cols, rhs = [], []
    for U, y in samples:
        U = np.asarray(U, complex).reshape(m, N)
        cols.append((g_at.ginv @ U).reshape(-1))
        rhs.append(np.asarray(y, complex))
    Om = np.array(cols)  # (S, m N)
    Y = np.array(rhs)  # (S, N)
    s = np.linalg.svd(Om, compute_uv=False)
    if s.size < m * N or s[-1] <= rank_tol * max(s[0], 1e-300):
        if not np.any(Y):
            return ContractionResult(np.zeros((m, N, N), complex), np.inf, 0.0)
        raise BundleError("contraction system is rank deficient; add null directions")
    sol, *_ = np.linalg.lstsq(Om, Y, rcond=None)  # (m N, N): Y = Om @ sol, sol = stacked A_k^T
    A = sol.reshape(m, N, N).transpose(0, 2, 1)
    res = float(np.abs(Om @ sol - Y).max()) if Y.size else 0.0
    return ContractionResult(A, float(s[0] / s[-1]), res)


# ---------------------------------------------------------------------------
# identity residuals
# ---------------------------------------------------------------------------


def z_term(metric: MetricClosure, B: ConnectionData, X) -> np.ndarray:
    r"""Zeroth-order coefficient ``Z = -G^{-1}\partial_i(g^{ij} G B_j) - g^{ij} B_i B_j``."""
    md = metric_data(metric, X)
    Bv, dB = B.evaluate(X)
    a = _divergence_coeff(md)
    div = np.einsum("...ij,...ijab->...ab", md["ginv"], dB) + np.einsum("...j,...jab->...ab", a, Bv)
    quad = np.einsum("...ij,...iab,...jbc->...ac", md["ginv"], Bv, Bv)
    return -div - quad


def leading_terms_residual(metric, B, u: AnalyticTestField, X) -> float:
    r"""Pointwise check of ``\Box u = d^*du - 2 g^{ij} B_i \partial_j u + Z u``."""
    md = metric_data(metric, X)
    val, d1, d2 = u(X)
    a = _divergence_coeff(md)
    dstar = -np.einsum("...ij,...ijn->...n", md["ginv"], d2) - np.einsum("...j,...jn->...n", a, d1)
    Bv = B(X)
    cross = np.einsum("...ij,...iab,...jb->...a", md["ginv"], Bv, d1)
    rhs = dstar - 2 * cross + _mv(z_term(metric, B, X), val)
    lhs = connection_laplacian(metric, B, u, X)
    return _rel(lhs - rhs, lhs)


def _rel(diff, ref) -> float:
    return float(np.max(np.abs(diff)) / max(1.0, np.max(np.abs(ref))))


def identity_residuals(metric: MetricClosure, B: ConnectionData, V: PotentialData,
                       u: AnalyticTestField, v: AnalyticTestField, A: AnalyticTestField,
                       points) -> dict:
    """Pointwise residuals of the algebraic identities at ``points``.

    Keys: ``compatibility`` (Leibniz rule for the fibre product),
    ``endomorphism_leibniz`` (``nabla(Au) = (nabla A)u + A nabla u``),
    ``laplacian_product`` (``Box(Au) = (Box A)u + A Box u - 2C(nabla A nabla u)``),
    ``P_product`` (``P(Au) = (PA)u + A Pu - AVu - 2C(...)``) and
    ``leading_terms``.  Residuals are relative to ``max(1, |lhs|)``.
    """
    X = np.asarray(points, float)
    out = {}
    # compatibility: d_i <u, v> = <nabla_i u, v> + <u, nabla_i v>
    uv, du, _ = u(X)
    vv, dv, _ = v(X)
    dpair = np.einsum("...in,...n->...i", du, np.conj(vv)) + np.einsum("...n,...in->...i", uv, np.conj(dv))
    gu = covariant_gradient(B, u, X)
    gv = covariant_gradient(B, v, X)
    rhs = np.einsum("...in,...n->...i", gu, np.conj(vv)) + np.einsum("...n,...in->...i", uv, np.conj(gv))
    out["compatibility"] = _rel(dpair - rhs, dpair)

    Au = A.apply_to(u)
    gAu = covariant_gradient(B, Au, X)
    gA = covariant_gradient(B, A, X)
    Av = A(X)[0]
    rhs = np.einsum("...iab,...b->...ia", gA, uv) + np.einsum("...ab,...ib->...ia", Av, gu)
    out["endomorphism_leibniz"] = _rel(gAu - rhs, gAu)

    C = metric_contraction(metric, X, gA, gu)
    lapAu = connection_laplacian(metric, B, Au, X)
    lapA = connection_laplacian(metric, B, A, X)
    lapu = connection_laplacian(metric, B, u, X)
    rhs = _mv(lapA, uv) + _mv(Av, lapu) - 2 * C
    out["laplacian_product"] = _rel(lapAu - rhs, lapAu)

    PAu = apply_P(metric, B, V, Au, X)
    PA = apply_P(metric, B, V, A, X)
    Pu = apply_P(metric, B, V, u, X)
    Vv = V(X)
    rhs = _mv(PA, uv) + _mv(Av, Pu) - _mv(Av @ Vv, uv) - 2 * C
    out["P_product"] = _rel(PAu - rhs, PAu)
    out["leading_terms"] = leading_terms_residual(metric, B, u, X)
    return out


def _trapezoid_weights(chart: CoordinateChart) -> np.ndarray:
    w = 1.0
    for ax, (h, m) in enumerate(zip(chart.steps, chart.shape)):
        wa = np.full(m, h)
        wa[0] = wa[-1] = h / 2
        w = np.multiply.outer(w, wa) if ax else wa
    return w


def green_residual(metric: MetricClosure, B: ConnectionData, V: PotentialData,
                   u: AnalyticTestField, v: AnalyticTestField, chart: CoordinateChart,
                   discrete: bool = True) -> dict:
    r"""Green's identity on the chart box.

    .. math::

        (Pu, v) - (u, Pv) = -\oint n_i\, G g^{ij}
        \bigl(\langle\nabla_j u, v\rangle - \langle u, \nabla_j v\rangle\bigr)\, dS,

    with ``(u, v) = \int \langle u, v\rangle G\, dX`` and ``n`` the Euclidean
    outward conormal.  With ``discrete`` the fields are sampled on the grid and
    ``P`` and ``nabla`` use fourth-order differences; integrals use the
    trapezoid rule, so the residual is ``O(h^2)``.
    """
    X = chart.nodes()
    md = metric_data(metric, X)
    if discrete:
        U, Vf = BundleField.sample(chart, u), BundleField.sample(chart, v)
        Pu, Pv = apply_P(metric, B, V, U), apply_P(metric, B, V, Vf)
        gu, gv = covariant_gradient(B, U), covariant_gradient(B, Vf)
        uu, vv = U.values, Vf.values
    else:
        Pu, Pv = apply_P(metric, B, V, u, X), apply_P(metric, B, V, v, X)
        gu, gv = covariant_gradient(B, u, X), covariant_gradient(B, v, X)
        uu, vv = u(X)[0], v(X)[0]
    G = md["G"]
    dens = (np.sum(Pu * np.conj(vv), -1) - np.sum(uu * np.conj(Pv), -1)) * G
    lhs = np.sum(_trapezoid_weights(chart) * dens)
    flux = np.einsum("...ij,...jn,...n->...i", md["ginv"], gu, np.conj(vv)) \
        - np.einsum("...ij,...n,...jn->...i", md["ginv"], uu, np.conj(gv))
    flux = flux * G[..., None]
    rhs = 0.0
    d = chart.dim
    for ax in range(d):
        face_w = 1.0
        first = True
        for b in range(d):
            if b == ax:
                continue
            h, m = chart.steps[b], chart.shape[b]
            wb = np.full(m, h)
            wb[0] = wb[-1] = h / 2
            face_w = wb if first else np.multiply.outer(face_w, wb)
            first = False
        hi = np.take(flux[..., ax], -1, axis=ax)
        lo = np.take(flux[..., ax], 0, axis=ax)
        rhs += -np.sum(face_w * (hi - lo))
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return {"lhs": complex(lhs), "rhs": complex(rhs), "residual": float(abs(lhs - rhs)),
            "relative": float(abs(lhs - rhs) / scale)}
