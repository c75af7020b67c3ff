"""Truncated polynomial jets in a few transverse variables.

A jet of degree ``D`` in ``n`` variables is stored as an array whose first
axis runs over the monomials of total degree ``<= D`` (graded order); any
trailing axes hold the fibre (scalar, vector or matrix coefficients).
Products drop every monomial above ``D``.
"""
from __future__ import annotations

from functools import lru_cache
from itertools import product as _cartesian

import numpy as np


class JetSpace:
    """Monomial bookkeeping for jets of degree ``<= degree`` in ``nvars`` variables."""

    def __init__(self, nvars: int, degree: int):
        self.nvars = int(nvars)
        self.degree = int(degree)
        exps = [e for d in range(self.degree + 1)
                for e in sorted((e for e in _cartesian(range(d + 1), repeat=self.nvars) if sum(e) == d),
                                reverse=True)]
        self.exponents = np.array(exps, dtype=int).reshape(len(exps), self.nvars)
        self.index = {tuple(e): i for i, e in enumerate(exps)}
        self.size = len(exps)
        self.degrees = self.exponents.sum(axis=1)
        I, Jn, K = [], [], []
        for i, ei in enumerate(exps):
            for j, ej in enumerate(exps):
                s = tuple(a + b for a, b in zip(ei, ej))
                if sum(s) <= self.degree:
                    I.append(i), Jn.append(j), K.append(self.index[s])
        self._table = np.zeros((self.size, self.size, self.size))
        self._table[K, I, Jn] = 1.0
        self._diff = []
        for v in range(self.nvars):
            src, dst, fac = [], [], []
            for i, e in enumerate(exps):
                if e[v] > 0:
                    d = list(e)
                    d[v] -= 1
                    src.append(i), dst.append(self.index[tuple(d)]), fac.append(e[v])
            self._diff.append((np.array(src, int), np.array(dst, int), np.array(fac, float)))

    # construction --------------------------------------------------------
    def zeros(self, fibre: tuple[int, ...] = (), dtype=complex) -> np.ndarray:
        return np.zeros((self.size,) + tuple(fibre), dtype=dtype)

    def constant(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=complex)
        out = self.zeros(c.shape)
        out[0] = c
        return out

    def variable(self, v: int) -> np.ndarray:
        out = self.zeros()
        e = [0] * self.nvars
        e[v] = 1
        out[self.index[tuple(e)]] = 1.0
        return out

    def quadratic(self, H: np.ndarray) -> np.ndarray:
        """Jet of ``y^T H y / 2``."""
        out = self.zeros()
        for a in range(self.nvars):
            for b in range(self.nvars):
                e = [0] * self.nvars
                e[a] += 1
                e[b] += 1
                out[self.index[tuple(e)]] += 0.5 * H[a, b]
        return out

    def hessian(self, p: np.ndarray) -> np.ndarray:
        """Symmetric matrix of the quadratic part of a scalar jet."""
        H = np.zeros((self.nvars, self.nvars), complex)
        for a in range(self.nvars):
            for b in range(self.nvars):
                e = [0] * self.nvars
                e[a] += 1
                e[b] += 1
                H[a, b] = p[self.index[tuple(e)]] * (2.0 if a == b else 1.0)
        return H

    def affine(self, c0, grad) -> np.ndarray:
        """Jet ``c0 + sum_v y_v grad[v]`` with fibre-valued coefficients."""
        c0 = np.asarray(c0, dtype=complex)
        out = self.zeros(c0.shape)
        out[0] = c0
        if self.degree >= 1:
            for v in range(self.nvars):
                out[self.index[tuple(int(w == v) for w in range(self.nvars))]] = grad[v]
        return out

    # algebra -------------------------------------------------------------
    def mul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Truncated product; matrix-vector or matrix-matrix in the fibre when both carry axes."""
        T = self._table
        if a.ndim == 1 or b.ndim == 1:
            if a.ndim == 1:
                return np.tensordot(T @ a, b, axes=(1, 0)) if b.ndim > 1 else (T @ b) @ a
            return np.tensordot(T @ b, a, axes=(1, 0)) if a.ndim > 1 else (T @ a) @ b
        if a.ndim == 3 and b.ndim == 2:
            return np.einsum("kij,inm,jm->kn", T, a, b)
        return np.einsum("kij,inm,jml->knl", T, a, b)

    # linear operators on flattened (monomial, fibre) vectors --------------
    def scalar_operator(self, p: np.ndarray, N: int = 1) -> np.ndarray:
        """Matrix of ``a -> p a`` on vector jets with fibre ``C^N``."""
        M = self._table @ p
        return M if N == 1 else np.kron(M, np.eye(N))

    def matrix_operator(self, A: np.ndarray) -> np.ndarray:
        """Matrix of ``a -> A a`` for a matrix-valued jet ``A`` of shape ``(size, N, N)``."""
        N = A.shape[-1]
        M = np.tensordot(self._table, A.reshape(self.size, N * N), axes=(1, 0))  # (k, j, n*m)
        M = M.reshape(self.size, self.size, N, N).transpose(0, 2, 1, 3)
        return M.reshape(self.size * N, self.size * N)

    def diff_operator(self, v: int, N: int = 1) -> np.ndarray:
        src, dst, fac = self._diff[v]
        D = np.zeros((self.size, self.size))
        D[dst, src] = fac
        return D if N == 1 else np.kron(D, np.eye(N))

    def diff(self, a: np.ndarray, v: int) -> np.ndarray:
        src, dst, fac = self._diff[v]
        out = np.zeros_like(a)
        out[dst] = a[src] * fac.reshape((-1,) + (1,) * (a.ndim - 1))
        return out

    def reciprocal(self, a: np.ndarray) -> np.ndarray:
        """Inverse of a scalar jet with nonzero constant term."""
        c = a[0]
        rest = a.copy()
        rest[0] = 0.0
        rest = rest / c
        # 1/(1 + r) = sum (-r)^k, nilpotent beyond the degree
        out = self.constant(1.0)
        power = self.constant(1.0)
        for _ in range(self.degree):
            power = -self.mul(power, rest)
            out = out + power
        return out / c

    def truncate(self, a: np.ndarray, degree: int) -> np.ndarray:
        out = a.copy()
        out[self.degrees > degree] = 0.0
        return out

    def homogeneous(self, a: np.ndarray, degree: int) -> np.ndarray:
        return a[self.degrees == degree]

    # evaluation ----------------------------------------------------------
    def monomials(self, Y: np.ndarray) -> np.ndarray:
        """Monomial values ``(..., size)`` at points ``Y`` of shape ``(..., nvars)``."""
        Y = np.asarray(Y)
        out = np.ones(Y.shape[:-1] + (self.size,), dtype=Y.dtype)
        for v in range(self.nvars):
            out = out * Y[..., v, None] ** self.exponents[:, v]
        return out

    def evaluate(self, a: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return np.tensordot(self.monomials(Y), a, axes=(-1, 0))


@lru_cache(maxsize=None)
def jet_space(nvars: int, degree: int) -> JetSpace:
    return JetSpace(nvars, degree)
