"""Metric fixtures with closed-form partials.

Every fixture returns ``(c, dc, d2c)`` and ``(g0, dg0, d2g0)`` in the layout
documented on :class:`connwave.geometry.MetricClosure`.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .geometry import MetricClosure


def _const_conformal(X):
    batch = X.shape[:-1]
    m = X.shape[-1]
    return np.ones(batch), np.zeros(batch + (m,)), np.zeros(batch + (m, m))


class Minkowski(MetricClosure):
    """``-dt^2 + |dx|^2``."""

    time_independent_g0 = True
    conformally_flat_time = True

    def __init__(self, n: int = 1):
        self.n = int(n)
        self.name = "minkowski"

    def conformal(self, X):
        return _const_conformal(np.asarray(X, float))

    def spatial(self, X):
        X = np.asarray(X, float)
        batch = X.shape[:-1]
        n, m = self.n, self.n + 1
        g0 = np.broadcast_to(np.eye(n), batch + (n, n)).copy()
        return g0, np.zeros(batch + (m, n, n)), np.zeros(batch + (m, m, n, n))


class ConformalMetric(MetricClosure):
    r"""Base metric rescaled by ``exp(eps * sin(omega t + k.x + phase))``.

    Causal structure is that of ``base``.
    """

    def __init__(self, base: MetricClosure, eps: float = 0.2, omega: float = 1.3,
                 k: Sequence[float] | None = None, phase: float = 0.3):
        self.base = base
        self.n = base.n
        self.name = "conformal"
        self.eps = float(eps)
        k = np.ones(self.n) * 1.7 if k is None else np.asarray(k, float)
        self.wave = np.concatenate([[float(omega)], k])
        self.phase = float(phase)
        self.time_independent_g0 = base.time_independent_g0
        self.conformally_flat_time = base.conformally_flat_time and omega == 0.0

    def conformal(self, X):
        X = np.asarray(X, float)
        cb, dcb, d2cb = self.base.conformal(X)
        th = X @ self.wave + self.phase
        s = self.eps * np.sin(th)
        ds = (self.eps * np.cos(th))[..., None] * self.wave
        d2s = (-self.eps * np.sin(th))[..., None, None] * np.outer(self.wave, self.wave)
        e = np.exp(s)
        c = e * cb
        dc = e[..., None] * (ds * cb[..., None] + dcb)
        d2c = e[..., None, None] * (
            (ds[..., :, None] * ds[..., None, :] + d2s) * cb[..., None, None]
            + ds[..., :, None] * dcb[..., None, :] + dcb[..., :, None] * ds[..., None, :] + d2cb)
        return c, dc, d2c

    def spatial(self, X):
        return self.base.spatial(X)


class PerturbedMetric(MetricClosure):
    r"""Ultrastatic ``-dt^2 + exp(kappa |x - x_0|^2) |dx|^2``.

    For ``n = 2`` the Gaussian curvature of ``g0`` is
    ``-2 kappa exp(-kappa |x-x_0|^2)``: negative for ``kappa > 0``.
    """

    time_independent_g0 = True
    conformally_flat_time = True

    def __init__(self, n: int = 2, kappa: float = 0.05, center: Sequence[float] | None = None):
        self.n = int(n)
        self.kappa = float(kappa)
        self.center = np.zeros(self.n) + 0.5 if center is None else np.asarray(center, float)
        self.name = "perturbed" if kappa >= 0 else "violating"

    def conformal(self, X):
        return _const_conformal(np.asarray(X, float))

    def spatial(self, X):
        X = np.asarray(X, float)
        n, m, k = self.n, self.n + 1, self.kappa
        y = X[..., 1:] - self.center
        e = np.exp(k * np.sum(y * y, axis=-1))
        I = np.eye(n)
        g0 = e[..., None, None] * I
        grad = np.zeros(X.shape[:-1] + (m,))
        grad[..., 1:] = 2 * k * y
        # q = k|y|^2: d2 exp(q) = exp(q) (hess q + grad q grad q)
        hq = np.zeros(X.shape[:-1] + (m, m))
        hq[..., 1:, 1:] = 2 * k * I
        d2e = e[..., None, None] * (hq + grad[..., :, None] * grad[..., None, :])
        de = e[..., None] * grad
        dg0 = de[..., :, None, None] * I
        d2g0 = d2e[..., :, :, None, None] * I
        return g0, dg0, d2g0


class CustomFixture(MetricClosure):
    r"""Time-dependent fixture exercising every code path.

    ``c = exp(eps t x_1)`` and ``g0 = exp(q) I + o (e_1 e_2^T + e_2 e_1^T)`` with
    ``q = eps (|x|^2 + t x_1)`` and ``o = eps x_1 x_2 / 2`` (``n = 2`` only).
    """

    def __init__(self, n: int = 1, eps: float = 0.1):
        self.n = int(n)
        self.eps = float(eps)
        self.name = "custom-fixture"

    def conformal(self, X):
        X = np.asarray(X, float)
        e, m = self.eps, self.n + 1
        t, x1 = X[..., 0], X[..., 1]
        c = np.exp(e * t * x1)
        ds = np.zeros(X.shape[:-1] + (m,))
        ds[..., 0] = e * x1
        ds[..., 1] = e * t
        d2s = np.zeros(X.shape[:-1] + (m, m))
        d2s[..., 0, 1] = d2s[..., 1, 0] = e
        dc = c[..., None] * ds
        d2c = c[..., None, None] * (d2s + ds[..., :, None] * ds[..., None, :])
        return c, dc, d2c

    def spatial(self, X):
        X = np.asarray(X, float)
        e, n, m = self.eps, self.n, self.n + 1
        t, x = X[..., 0], X[..., 1:]
        q = e * (np.sum(x * x, axis=-1) + t * x[..., 0])
        dq = np.zeros(X.shape[:-1] + (m,))
        dq[..., 0] = e * x[..., 0]
        dq[..., 1:] = 2 * e * x
        dq[..., 1] += e * t
        d2q = np.zeros(X.shape[:-1] + (m, m))
        d2q[..., 0, 1] = d2q[..., 1, 0] = e
        for a in range(1, m):
            d2q[..., a, a] = 2 * e
        E = np.exp(q)
        I = np.eye(n)
        g0 = E[..., None, None] * I
        dE = E[..., None] * dq
        d2E = E[..., None, None] * (d2q + dq[..., :, None] * dq[..., None, :])
        dg0 = dE[..., :, None, None] * I
        d2g0 = d2E[..., :, :, None, None] * I
        if n == 2:
            off = np.array([[0.0, 1.0], [1.0, 0.0]])
            o = 0.5 * e * x[..., 0] * x[..., 1]
            do = np.zeros(X.shape[:-1] + (m,))
            do[..., 1] = 0.5 * e * x[..., 1]
            do[..., 2] = 0.5 * e * x[..., 0]
            d2o = np.zeros(X.shape[:-1] + (m, m))
            d2o[..., 1, 2] = d2o[..., 2, 1] = 0.5 * e
            g0 = g0 + o[..., None, None] * off
            dg0 = dg0 + do[..., :, None, None] * off
            d2g0 = d2g0 + d2o[..., :, :, None, None] * off
        return g0, dg0, d2g0


class StaticStretch(MetricClosure):
    r"""``-dt^2 + (1 + a sin(b x_1)) dx_1^2`` in one space dimension."""

    time_independent_g0 = True
    conformally_flat_time = True

    def __init__(self, a: float = 0.1, b: float = 1.0):
        self.n = 1
        self.a, self.b = float(a), float(b)
        self.name = "stretch"

    def conformal(self, X):
        return _const_conformal(np.asarray(X, float))

    def spatial(self, X):
        X = np.asarray(X, float)
        x = X[..., 1]
        a, b = self.a, self.b
        g0 = (1 + a * np.sin(b * x))[..., None, None]
        dg0 = np.zeros(X.shape[:-1] + (2, 1, 1))
        dg0[..., 1, 0, 0] = a * b * np.cos(b * x)
        d2g0 = np.zeros(X.shape[:-1] + (2, 2, 1, 1))
        d2g0[..., 1, 1, 0, 0] = -a * b * b * np.sin(b * x)
        return g0, dg0, d2g0


class ExpTimeConformal(MetricClosure):
    """``c = exp(t)`` times Minkowski."""

    time_independent_g0 = True

    def __init__(self, n: int = 1):
        self.n = int(n)
        self.name = "exp-time"

    def conformal(self, X):
        X = np.asarray(X, float)
        m = self.n + 1
        c = np.exp(X[..., 0])
        dc = np.zeros(X.shape[:-1] + (m,))
        dc[..., 0] = c
        d2c = np.zeros(X.shape[:-1] + (m, m))
        d2c[..., 0, 0] = c
        return c, dc, d2c

    def spatial(self, X):
        return Minkowski(self.n).spatial(X)


METRICS = {
    "minkowski": lambda n=1: Minkowski(n),
    "conformal": lambda n=1, eps=0.2, omega=1.3, phase=0.3: ConformalMetric(
        Minkowski(n), eps=eps, omega=omega, phase=phase),
    "perturbed": lambda n=2, kappa=0.05: PerturbedMetric(n, kappa),
    "violating": lambda n=2, kappa=0.3: PerturbedMetric(n, -abs(kappa)),
    "custom-fixture": lambda n=1, eps=0.1: CustomFixture(n, eps),
}


def make_metric(name: str, n: int = 1, **params) -> MetricClosure:
    """Look up a fixture by configuration name."""
    try:
        factory = METRICS[name]
    except KeyError:
        raise KeyError(f"unknown metric {name!r}; choose from {sorted(METRICS)}") from None
    return factory(n=n, **params)
