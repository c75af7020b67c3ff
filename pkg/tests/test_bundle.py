import numpy as np
import pytest

from connwave.bundle import (AnalyticTestField, BundleError, BundleField, ConnectionData,
                             GaugeGroupSpec, PotentialData, ScalarProfile, apply_P,
                             connection_laplacian, contraction_samples,
                             contraction_solve, covariant_derivative, gauge_section,
                             gauge_transform, green_residual, identity_residuals)
from connwave.geometry import CoordinateChart, metric_at, null_covector_frame
from connwave.metrics import ConformalMetric, CustomFixture, Minkowski


def _points(m, count=40, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.05, 0.95, size=(count, m))
    X[:, 0] = 2 * X[:, 0] - 1
    return X


def _fd_check(field, X, h=1e-5):
    val, d1, d2 = field(X)
    m = X.shape[-1]
    for k in range(m):
        e = np.zeros(m)
        e[k] = h
        vp, d1p, _ = field(X + e)
        vm, d1m, _ = field(X - e)
        assert np.abs((vp - vm) / (2 * h) - np.take(d1, k, axis=1)).max() <= 1e-6 * max(1, np.abs(d1).max())
        assert np.abs((d1p - d1m) / (2 * h) - np.take(d2, k, axis=1)).max() <= 1e-6 * max(1, np.abs(d2).max())


def test_group_projection_and_retraction():
    rng = np.random.default_rng(0)
    for kind in ("U", "SU"):
        G = GaugeGroupSpec(3, kind)
        Z = rng.normal(size=(5, 3, 3)) + 1j * rng.normal(size=(5, 3, 3))
        P = G.project(Z)
        assert np.abs(G.project(P) - P).max() <= 1e-15
        assert G.in_algebra(P)
        from scipy.linalg import expm
        U = expm(P)
        assert np.abs(G.retract(U) - U).max() <= 1e-12
        assert G.in_group(G.retract(Z))
        assert len(G.basis()) == (9 if kind == "U" else 8)
        assert all(G.in_algebra(b) for b in G.basis())


def test_analytic_fields_match_differences():
    X = _points(3, 10)
    prof = ScalarProfile.bump([0.0, 0.5, 0.5], 0.8) * ScalarProfile.plane_wave([1.0, -2.0, 0.5])
    _fd_check(AnalyticTestField.from_scalar(prof, [1.0, 1j]), X)
    _fd_check(AnalyticTestField.from_scalar(ScalarProfile.monomial([2, 1, 3]), [1.0]), X)
    _fd_check(AnalyticTestField.from_scalar(ScalarProfile.gaussian([0, .5, .5], 0.4), [1.0]), X)
    A = gauge_section([ScalarProfile.linear([1.0, 0.3, -0.2]), ScalarProfile.monomial([1, 1, 0])],
                      GaugeGroupSpec(2).basis()[:2])
    _fd_check(A, X)
    _fd_check(A.inverse(), X)
    u = AnalyticTestField.random_section(2, 3, seed=1)
    _fd_check(A.apply_to(u), X)
    _fd_check(A.apply_to(A.inverse()), X)


def test_covariant_derivative_examples():
    X = _points(2)
    B = ConnectionData.smooth_random(2, 1, seed=3)
    const = AnalyticTestField.constant([1.0, 2.0], 2)
    zero = ConnectionData.zero(2, 1)
    assert np.all(covariant_derivative(zero, const, 1, X) == 0)
    beta = 0.7
    B1 = ConnectionData.constant([[[0.0]], [[1j * beta]]], GaugeGroupSpec(1))
    phase = AnalyticTestField.from_scalar(ScalarProfile.plane_wave([0.0, -beta]), [1.0])
    assert np.abs(covariant_derivative(B1, phase, 1, X)).max() <= 1e-15
    ident = AnalyticTestField.identity(2, 2)
    assert np.abs(covariant_derivative(B, ident, 0, X)).max() <= 1e-15
    with pytest.raises(BundleError):
        covariant_derivative(B, const, 2, X)


def test_laplacian_examples():
    X = _points(2)
    flat = Minkowski(1)
    zero = ConnectionData.zero(1, 1)
    null_wave = AnalyticTestField.plane_wave([1.0, 1.0], [1.0])
    assert np.abs(connection_laplacian(flat, zero, null_wave, X)).max() <= 1e-14
    t2 = AnalyticTestField.from_scalar(ScalarProfile.monomial([2, 0]), [1.0])
    assert np.allclose(connection_laplacian(flat, zero, t2, X), 2.0, atol=1e-14)
    m2 = 0.3
    V = PotentialData.constant(m2 * np.eye(2))
    e1 = AnalyticTestField.constant([1.0, 0.0], 2)
    assert np.allclose(apply_P(flat, ConnectionData.zero(2, 1), V, e1, X), [m2, 0.0])


def _pair(n, N, seed):
    metric = ConformalMetric(CustomFixture(n, 0.15), eps=0.2)
    B = ConnectionData.smooth_random(N, n, seed=seed)
    V = PotentialData.smooth_random(N, n, seed=seed)
    return metric, B, V


@pytest.mark.parametrize("n,N", [(1, 1), (1, 2), (2, 2), (2, 3)])
def test_identity_suite_random(n, N):
    metric, B, V = _pair(n, N, seed=10 + n + N)
    m = n + 1
    u = AnalyticTestField.random_section(N, m, seed=1)
    v = AnalyticTestField.random_section(N, m, seed=2)
    A = AnalyticTestField.random_endomorphism(N, m, seed=3)
    res = identity_residuals(metric, B, V, u, v, A, _points(m))
    assert max(res.values()) <= 1e-8, res


def test_identity_suite_zero_and_identity():
    metric, B, V = _pair(1, 2, seed=5)
    zero = AnalyticTestField.constant([0.0, 0.0], 2)
    res = identity_residuals(metric, B, V, zero, zero, AnalyticTestField.identity(2, 2), _points(2))
    assert max(res.values()) == 0.0
    u = AnalyticTestField.random_section(2, 2, seed=4)
    Pu_a = apply_P(metric, B, V, AnalyticTestField.identity(2, 2).apply_to(u), _points(2))
    Pu_b = apply_P(metric, B, V, u, _points(2))
    assert np.abs(Pu_a - Pu_b).max() <= 1e-12 * np.abs(Pu_b).max()


def test_compatibility_fails_for_non_skew_connection():
    metric, _, V = _pair(1, 2, seed=6)
    B = ConnectionData.smooth_random(2, 1, seed=6, skew=False)
    u = AnalyticTestField.random_section(2, 2, seed=1)
    v = AnalyticTestField.random_section(2, 2, seed=2)
    A = AnalyticTestField.random_endomorphism(2, 2, seed=3)
    res = identity_residuals(metric, B, V, u, v, A, _points(2))
    assert res["compatibility"] > 1e-3
    assert res["laplacian_product"] <= 1e-8  # independent of compatibility


def _gauge(n, N, seed=0, vanish_on_sides=True):
    group = GaugeGroupSpec(N)
    rng = np.random.default_rng(seed)
    gens = [group.random_algebra(rng) for _ in range(2)]
    m = n + 1
    profs = []
    for k in range(2):
        p = ScalarProfile.plane_wave(rng.normal(size=m), phase=rng.uniform(0, 6))
        real = ScalarProfile(lambda X, p=p: tuple(np.real(a) for a in p(X)), m)
        if vanish_on_sides:
            for a in range(1, m):
                real = real * ScalarProfile.monomial(np.eye(m, dtype=int)[a]) \
                    * (ScalarProfile.linear(-np.eye(m)[a], 1.0))
        profs.append(real)
    return gauge_section(profs, gens)


def test_gauge_conjugation_identity():
    metric, B, V = _pair(2, 2, seed=7)
    A = _gauge(2, 2, seed=1)
    gt = gauge_transform(B, V, A)
    X = _points(3)
    u = AnalyticTestField.random_section(2, 3, seed=9)
    lhs = apply_P(metric, gt.connection, gt.potential, A.inverse().apply_to(u), X)
    rhs = np.einsum("...ab,...b->...a", np.linalg.inv(A(X)[0]), apply_P(metric, B, V, u, X))
    assert np.abs(lhs - rhs).max() <= 1e-8 * max(1, np.abs(rhs).max())
    assert gt.raw_defect(X) <= 1e-9


def test_gauge_examples_and_group_action():
    metric, B, V = _pair(1, 2, seed=8)
    X = _points(2)
    I = AnalyticTestField.identity(2, 2)
    gt = gauge_transform(B, V, I)
    assert np.abs(gt.connection(X) - B(X)).max() <= 1e-15
    assert np.abs(gt.potential(X) - V(X)).max() <= 1e-15
    U = np.linalg.qr(np.random.default_rng(0).normal(size=(2, 2)))[0].astype(complex)
    gc = gauge_transform(B, V, U)
    assert np.allclose(gc.connection(X), np.linalg.inv(U) @ B(X) @ U, atol=1e-14)
    # abelian phase: B' = i d theta
    theta = ScalarProfile.monomial([1, 2])
    A1 = gauge_section([theta], [np.array([[1j]])])
    g1 = gauge_transform(ConnectionData.zero(1, 1), PotentialData.zero(1), A1)
    dth = theta(X)[1].real
    assert np.allclose(g1.connection(X)[..., 0, 0], 1j * dth, atol=1e-14)
    # group action: (B^A1)^A2 = B^(A1 A2)
    A1, A2 = _gauge(1, 2, 1), _gauge(1, 2, 2)
    two = gauge_transform(gauge_transform(B, V, A1).connection, V, A2).connection
    one = gauge_transform(B, V, A1.apply_to(A2)).connection
    assert np.abs(two.evaluate(X)[0] - one.evaluate(X)[0]).max() <= 1e-9
    assert np.abs(two.evaluate(X)[1] - one.evaluate(X)[1]).max() <= 1e-9
    with pytest.raises(BundleError):
        gauge_transform(B, V, AnalyticTestField.constant(2 * np.eye(2), 2))


def test_contraction_examples():
    g_at = metric_at(Minkowski(1), [0.0, 0.5])
    frame = null_covector_frame(g_at).covectors
    A = np.zeros((2, 1, 1), complex)
    A[0, 0, 0] = 1.0
    samples = contraction_samples(g_at, A, frame)
    assert np.allclose([y for _, y in samples], -1.0)
    res = contraction_solve(g_at, samples)
    assert np.allclose(res.A[:, 0, 0], [1.0, 0.0], atol=1e-14)
    zero = contraction_solve(g_at, contraction_samples(g_at, 0 * A, frame))
    assert np.all(zero.A == 0)


@pytest.mark.parametrize("n,N", [(1, 1), (1, 3), (2, 2), (2, 3)])
def test_contraction_random_recovery(n, N):
    rng = np.random.default_rng(n * 10 + N)
    g_at = metric_at(CustomFixture(n, 0.2), [0.2] + [0.4] * n)
    A = rng.normal(size=(n + 1, N, N)) + 1j * rng.normal(size=(n + 1, N, N))
    res = contraction_solve(g_at, contraction_samples(g_at, A, null_covector_frame(g_at).covectors))
    assert np.abs(res.A - A).max() <= 1e-10
    assert np.isfinite(res.condition)


def test_contraction_rank_deficient():
    g_at = metric_at(Minkowski(2), [0.0, 0.5, 0.5])
    A = np.ones((3, 1, 1), complex)
    frame = null_covector_frame(g_at).covectors[:2]
    with pytest.raises(BundleError):
        contraction_solve(g_at, contraction_samples(g_at, A, frame))


def test_green_identity_second_order():
    metric = Minkowski(1)
    B = ConnectionData.smooth_random(2, 1, seed=4)
    V = PotentialData.smooth_random(2, 1, seed=4)
    u = AnalyticTestField.random_section(2, 2, seed=5)
    v = AnalyticTestField.random_section(2, 2, seed=6)
    errs = []
    for k in (16, 32, 64):
        ch = CoordinateChart(1.0, (1.0,), (2 * k + 1, k + 1))
        errs.append(green_residual(metric, B, V, u, v, ch)["residual"])
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.8), (errs, orders)


def test_grid_laplacian_fourth_order():
    metric, B, V = _pair(1, 2, seed=3)
    u = AnalyticTestField.random_section(2, 2, seed=1)
    errs = []
    for k in (20, 40):
        ch = CoordinateChart(1.0, (1.0,), (2 * k + 1, k + 1))
        exact = apply_P(metric, B, V, u, ch.nodes())
        approx = apply_P(metric, B, V, BundleField.sample(ch, u))
        errs.append(np.abs(exact - approx).max())
    assert np.log2(errs[0] / errs[1]) >= 3.5
