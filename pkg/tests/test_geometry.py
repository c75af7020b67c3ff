import numpy as np
import pytest
import sympy as sp

from connwave.geometry import (CoordinateChart, GeometryError, TangentVector, classify_vector,
                               h1_scan, metric_at, metric_data, null_covector_frame, riemann_at,
                               riemann_batch)
from connwave.metrics import (ConformalMetric, CustomFixture, ExpTimeConformal, Minkowski,
                              PerturbedMetric, StaticStretch, make_metric)


def test_minkowski_metric_at():
    m = metric_at(Minkowski(1), [0.3, 0.2])
    assert np.allclose(m.g, np.diag([-1.0, 1.0]))
    assert m.G == 1.0
    assert np.all(m.christoffel == 0)


def test_stretch_christoffel_by_hand():
    # g11 = 1 + 0.1 sin x: at x = 0, d_x g11 = 0.1 and Gamma^1_11 = g^11 d_x g11 / 2 = 0.05
    m = metric_at(StaticStretch(0.1, 1.0), [0.0, 0.0])
    assert m.g[1, 1] == pytest.approx(1.0)
    assert m.dg[1, 1, 1] == pytest.approx(0.1)
    assert m.christoffel[1, 1, 1] == pytest.approx(0.05)


def test_exp_time_density():
    assert metric_at(ExpTimeConformal(1), [0.0, 0.0]).G == pytest.approx(1.0)
    assert metric_at(ExpTimeConformal(1), [0.5, 0.0]).G == pytest.approx(np.exp(0.5))


def test_outside_chart_and_bad_metric():
    chart = CoordinateChart(1.0, (1.0,), (11, 11))
    with pytest.raises(GeometryError):
        metric_at(Minkowski(1), [2.0, 0.5], chart)
    with pytest.raises(GeometryError):
        metric_at(Minkowski(1), [0.0, 0.5, 0.1])


FIXTURES = [
    Minkowski(1), Minkowski(2), StaticStretch(), ExpTimeConformal(2),
    PerturbedMetric(2, 0.2), PerturbedMetric(2, -0.3), CustomFixture(1, 0.2), CustomFixture(2, 0.2),
    ConformalMetric(CustomFixture(2, 0.1), eps=0.3),
]


@pytest.mark.parametrize("closure", FIXTURES, ids=lambda c: f"{c.name}-{c.n}")
def test_partials_match_central_differences(closure):
    rng = np.random.default_rng(1)
    m = closure.n + 1
    X = rng.uniform(-0.8, 0.8, size=(20, m))
    X[:, 1:] = np.abs(X[:, 1:])
    g, dg, d2g = closure.full(X)
    h = 1e-4
    for k in range(m):
        e = np.zeros(m)
        e[k] = h
        gp, dgp = closure.full(X + e, order=1)
        gm, dgm = closure.full(X - e, order=1)
        fd1 = (gp - gm) / (2 * h)
        fd2 = (dgp - dgm) / (2 * h)
        scale1 = max(1.0, np.abs(dg).max())
        scale2 = max(1.0, np.abs(d2g).max())
        assert np.abs(fd1 - dg[:, k]).max() / scale1 <= 1e-6
        assert np.abs(fd2 - d2g[:, k]).max() / scale2 <= 1e-6


@pytest.mark.parametrize("closure", FIXTURES, ids=lambda c: f"{c.name}-{c.n}")
def test_tensor_invariants(closure):
    rng = np.random.default_rng(2)
    m = closure.n + 1
    X = rng.uniform(0.05, 0.9, size=(30, m))
    d = metric_data(closure, X, order=2)
    assert np.abs(d["g"] @ d["ginv"] - np.eye(m)).max() <= 1e-12
    assert np.array_equal(d["christoffel"], np.swapaxes(d["christoffel"], -1, -2)) or \
        np.abs(d["christoffel"] - np.swapaxes(d["christoffel"], -1, -2)).max() <= 1e-15
    R = riemann_batch(closure, X)
    assert np.abs(R + np.swapaxes(R, 1, 2)).max() <= 1e-9
    assert np.abs(R + np.swapaxes(R, 3, 4)).max() <= 1e-9
    assert np.abs(R - np.transpose(R, (0, 3, 4, 1, 2))).max() <= 1e-9
    # first Bianchi R_{i[jkl]} = 0
    bianchi = R + np.transpose(R, (0, 1, 3, 4, 2)) + np.transpose(R, (0, 1, 4, 2, 3))
    assert np.abs(bianchi).max() <= 1e-9


def test_minkowski_riemann_zero():
    assert np.all(riemann_at(Minkowski(2), [0.1, 0.2, 0.3]) == 0)


def _symbolic_r0101(eps_val, point):
    t, x, eps = sp.symbols("t x eps", real=True)
    c = sp.exp(eps * t * x)
    g0 = sp.exp(eps * (x ** 2 + t * x))
    coords = [t, x]
    g = sp.Matrix([[-c, 0], [0, c * g0]])
    ginv = g.inv()
    gam = [[[sum(ginv[k, l] * (sp.diff(g[l, j], coords[i]) + sp.diff(g[l, i], coords[j])
                               - sp.diff(g[i, j], coords[l])) for l in range(2)) / 2
             for j in range(2)] for i in range(2)] for k in range(2)]

    def Rup(r, s, mu, nu):
        expr = sp.diff(gam[r][nu][s], coords[mu]) - sp.diff(gam[r][mu][s], coords[nu])
        expr += sum(gam[r][mu][l] * gam[l][nu][s] - gam[r][nu][l] * gam[l][mu][s] for l in range(2))
        return expr

    R0101 = sum(g[0, a] * Rup(a, 1, 0, 1) for a in range(2))
    return float(R0101.subs({eps: eps_val, t: point[0], x: point[1]}).evalf())


def test_riemann_single_component_against_symbolic_oracle():
    closure = CustomFixture(1, 0.3)
    p = [0.4, 0.7]
    R = riemann_at(closure, p)
    expect = _symbolic_r0101(0.3, p)
    assert abs(expect) > 1e-3
    assert R[0, 1, 0, 1] == pytest.approx(expect, rel=1e-10)
    # one independent component in dimension two
    mask = np.ones_like(R, dtype=bool)
    for idx in [(0, 1, 0, 1), (1, 0, 1, 0), (0, 1, 1, 0), (1, 0, 0, 1)]:
        mask[idx] = False
    assert np.abs(R[mask]).max() <= 1e-15
    assert R[1, 0, 0, 1] == pytest.approx(-expect, rel=1e-10)


def test_musical_roundtrip():
    rng = np.random.default_rng(3)
    closure = CustomFixture(2, 0.2)
    X = rng.uniform(0, 1, size=(10_000, 3))
    d = metric_data(closure, X)
    xi = rng.normal(size=(10_000, 3))
    back = np.einsum("nij,nj->ni", d["g"], np.einsum("nij,nj->ni", d["ginv"], xi))
    assert np.abs(back - xi).max() <= 1e-12
    g_at = metric_at(closure, X[0])
    v = TangentVector(X[0], xi[0], covariant=True)
    assert np.allclose(v.raise_index(g_at).lower(g_at).components, xi[0], atol=1e-12, rtol=0)


def test_classification_examples():
    m = metric_at(Minkowski(1), [0.0, 0.5])
    assert classify_vector(m, [1, 0]).causal == "timelike"
    assert classify_vector(m, [1, 1]).causal == "lightlike"
    c = classify_vector(m, [0, 1])
    assert (c.causal, c.orientation) == ("spacelike", "neither")
    assert classify_vector(m, [0, 0]).causal == "zero"
    # g(v, d_t) > 0 literally selects v^0 < 0; the physical flag flips it
    assert classify_vector(m, [-1, 0]).orientation == "future"
    assert classify_vector(m, [1, 0], literal_orientation=False).orientation == "future"


def test_null_frames():
    f1 = null_covector_frame(metric_at(Minkowski(1), [0, 0.5]))
    assert np.allclose(f1.covectors, [[1, 1], [1, -1]])
    f2 = null_covector_frame(metric_at(Minkowski(2), [0, 0.5, 0.5]))
    assert np.allclose(f2.covectors, [[1, 1, 0], [1, -1, 0], [1, 0, 1]])
    assert np.linalg.matrix_rank(f2.covectors) == 3
    for closure in (CustomFixture(2, 0.2), ConformalMetric(CustomFixture(2, 0.2))):
        g_at = metric_at(closure, [0.3, 0.4, 0.6])
        fr = null_covector_frame(g_at)
        vals = np.einsum("ai,ij,aj->a", fr.covectors, g_at.ginv, fr.covectors)
        assert np.abs(vals).max() <= 1e-12
        assert fr.null_defect <= 1e-12
        assert np.linalg.matrix_rank(fr.covectors) == 3 and np.isfinite(fr.condition)


def test_h1_scan_cases():
    chart = CoordinateChart(1.0, (1.0, 1.0), (5, 5, 5))
    flat = h1_scan(Minkowski(2), chart, 500, seed=0)
    assert flat.passed and flat.max_value == 0.0
    ok = h1_scan(make_metric("perturbed", 2), chart, 2000, seed=1)
    assert ok.passed and ok.max_value <= 0
    bad = h1_scan(make_metric("violating", 2), chart, 2000, seed=1)
    assert not bad.passed and bad.max_value > 1e-3
    N, v = bad.witness_vectors
    g_at = metric_at(make_metric("violating", 2), bad.witness_point)
    assert abs(N @ g_at.g @ N) < 1e-10 and abs(N @ g_at.g @ v) < 1e-10
    one_d = h1_scan(CustomFixture(1), CoordinateChart(1.0, (1.0,), (5, 5)), 10)
    assert one_d.passed and one_d.vacuous


def test_chart_uniform_cfl():
    ch = CoordinateChart.uniform(1.0, (1.0, 2.0), (11, 21))
    assert ch.h_t <= 0.9 * 0.1 / np.sqrt(2) + 1e-15
    assert ch.boundary_indices().size == 2 * 11 + 2 * 21 - 4
    nrm = ch.boundary_normals()
    assert np.allclose(np.linalg.norm(nrm, axis=1), 1)
