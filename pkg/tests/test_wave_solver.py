import numpy as np
import pytest

from connwave.bundle import (AnalyticTestField, ConnectionData, GaugeGroupSpec, PotentialData,
                             ScalarProfile, boundary_identity_gauge, gauge_transform)
from connwave.geometry import CoordinateChart
from connwave.metrics import ConformalMetric, CustomFixture, Minkowski
from connwave.wave_solver import (BoundaryBasis, BoundarySource, CauchyData, SolverError,
                                  SpaceTimeSolution, cauchy_at, control_solve, cubic_bspline,
                                  dtn_matrix, duality_defect, energy_history, manufactured_problem,
                                  neumann_trace, smooth_bump, solve_forward, speed_audit,
                                  stable_chart, standing_wave)

FLAT = Minkowski(1)
B0 = ConnectionData.zero(1, 1)
V0 = PotentialData.zero(1)


def _orders(errs):
    errs = np.asarray(errs)
    return np.log2(errs[:-1] / errs[1:])


def test_zero_data_gives_zero_solution():
    ch = CoordinateChart.uniform(1.0, (1.0,), 21)
    B = ConnectionData.smooth_random(2, 1, seed=0)
    V = PotentialData.smooth_random(2, 1, seed=0)
    s = solve_forward(FLAT, B, V, ch)
    assert s.values.shape == (ch.shape[0], 21, 2)
    assert np.all(s.values == 0)


def test_uniform_chart_has_level_at_zero():
    for nx in (21, 41, 81, 161):
        ch = CoordinateChart.uniform(1.0, (1.0,), nx)
        assert ch.t[ch.level_index(0.0)] == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(Exception):
        CoordinateChart(1.0, (1.0,), (4, 5)).level_index(0.0)


def test_standing_wave_second_order():
    errs = []
    for nx in (21, 41, 81):
        ch = CoordinateChart.uniform(1.0, (1.0,), nx)
        u = standing_wave(ch)
        s = solve_forward(FLAT, B0, V0, ch, cauchy=CauchyData.from_field(ch, B0, u, -1.0))
        errs.append(np.abs(s.values - u(ch.nodes())[0]).max())
    assert np.all(_orders(errs) >= 1.8)


def test_manufactured_solution_with_connection_and_potential():
    metric = ConformalMetric(CustomFixture(1, 0.15), eps=0.2)
    B = ConnectionData.smooth_random(2, 1, seed=1)
    V = PotentialData.smooth_random(2, 1, seed=1)
    u = AnalyticTestField.random_section(2, 2, seed=3)
    errs = []
    for nx in (21, 41, 81):
        ch = stable_chart(metric, 1.0, (1.0,), nx)
        F, f, c = manufactured_problem(metric, B, V, ch, u)
        s = solve_forward(metric, B, V, ch, F=F, f=f, cauchy=c)
        errs.append(np.abs(s.values - u(ch.nodes())[0]).max())
    assert np.all(_orders(errs) >= 1.8)


def test_manufactured_solution_two_space_dimensions():
    metric = ConformalMetric(CustomFixture(2, 0.2), eps=0.2)
    B = ConnectionData.smooth_random(2, 2, seed=1)
    V = PotentialData.smooth_random(2, 2, seed=1)
    u = AnalyticTestField.random_section(2, 3, seed=3)
    errs = []
    for nx in (11, 21, 41):
        ch = stable_chart(metric, 0.5, (1.0, 1.0), nx)
        F, f, c = manufactured_problem(metric, B, V, ch, u)
        s = solve_forward(metric, B, V, ch, F=F, f=f, cauchy=c)
        errs.append(np.abs(s.values - u(ch.nodes())[0]).max())
    assert _orders(errs)[-1] >= 1.8


def test_backward_march_reverses_forward_march():
    metric = ConformalMetric(CustomFixture(1, 0.15), eps=0.2)
    B = ConnectionData.smooth_random(2, 1, seed=4)
    V = PotentialData.smooth_random(2, 1, seed=4)
    u = AnalyticTestField.random_section(2, 2, seed=5)
    ch = stable_chart(metric, 1.0, (1.0,), 41)
    F, f, c = manufactured_problem(metric, B, V, ch, u)
    s = solve_forward(metric, B, V, ch, F=F, f=f, cauchy=c)
    nt = ch.shape[0]
    restart = CauchyData(s.values[nt - 2], None, ch.t[nt - 2], previous=s.values[nt - 1])
    back = solve_forward(metric, B, V, ch, F=F, f=f, cauchy=restart, direction=-1)
    assert np.abs(back.values[:nt - 1] - s.values[:nt - 1]).max() <= 1e-10


def test_cfl_and_corner_checks():
    with pytest.raises(SolverError, match="CFL"):
        solve_forward(FLAT, B0, V0, CoordinateChart(1.0, (1.0,), (11, 41)))
    ch = CoordinateChart.uniform(1.0, (1.0,), 21)
    bad = CauchyData(np.ones((21, 1)), None, -1.0)
    with pytest.raises(SolverError, match="corner"):
        solve_forward(FLAT, B0, V0, ch, cauchy=bad)
    with pytest.raises(SolverError, match="grid level"):
        solve_forward(FLAT, B0, V0, ch, cauchy=CauchyData(np.zeros((21, 1)), None, -0.999))


def test_cauchy_at_matches_analytic_data():
    ch = CoordinateChart.uniform(1.0, (1.0,), 161)
    u = standing_wave(ch)
    s = solve_forward(FLAT, B0, V0, ch, cauchy=CauchyData.from_field(ch, B0, u, -1.0))
    got = cauchy_at(FLAT, B0, s, 0.0)
    exact = CauchyData.from_field(ch, B0, u, 0.0)
    # at t = 0 the velocity of cos(pi t) vanishes; pick a level with motion too
    assert np.abs(got.u0 - exact.u0).max() <= 1e-3
    k = ch.level_index(0.0) + 20
    got = cauchy_at(FLAT, B0, s, ch.t[k])
    exact = CauchyData.from_field(ch, B0, u, ch.t[k])
    assert np.abs(got.u1 - exact.u1).max() <= 5e-3


def _recorded(values, ch):
    return SpaceTimeSolution(ch, np.asarray(values, complex))


def test_neumann_trace_of_linear_profile():
    ch = CoordinateChart.uniform(1.0, (1.0,), 11)
    x = ch.axis(0)
    vals = np.broadcast_to(x[None, :, None], (ch.shape[0], 11, 1))
    tr = neumann_trace(FLAT, B0, _recorded(vals, ch))
    assert np.allclose(tr[..., 0, 0], -1.0) and np.allclose(tr[..., 1, 0], 1.0)


def test_neumann_trace_sees_connection_along_normal():
    b = 0.7
    B = ConnectionData.constant(np.array([[[0.0]], [[1j * b]]]), GaugeGroupSpec(1))
    ch = CoordinateChart.uniform(1.0, (1.0,), 11)
    vals = np.ones((ch.shape[0], 11, 1))
    tr = neumann_trace(FLAT, B, _recorded(vals, ch))
    assert np.allclose(tr[..., 1, 0], 1j * b) and np.allclose(tr[..., 0, 0], -1j * b)


def test_dtn_empty_basis_and_determinism():
    ch = CoordinateChart.uniform(1.0, (1.0,), 21)
    B = ConnectionData.smooth_random(2, 1, seed=2)
    V = PotentialData.smooth_random(2, 1, seed=2)
    empty = dtn_matrix(FLAT, B, V, BoundaryBasis(ch, [], 0.3, 2))
    assert empty.matrix.shape[1] == 0
    basis = BoundaryBasis(ch, [-0.4, 0.1], 0.3, 2)
    a = dtn_matrix(FLAT, B, V, basis).matrix
    b = dtn_matrix(FLAT, B, V, basis, chunk=1).matrix
    assert np.array_equal(a, b)
    assert np.any(a != 0)


def test_dtn_zero_connection_flat_single_pulse():
    # a pulse entering from x = 0 leaves the slab through x = 1 one unit later
    ch = CoordinateChart.uniform(1.0, (1.0,), 81)
    basis = BoundaryBasis(ch, [-0.6], 0.3, 1, nodes=[0])
    col = dtn_matrix(FLAT, B0, V0, basis).matrix[:, 0] / np.sqrt(ch.h_t)
    tr = col.reshape(ch.shape[0], 2)
    t = ch.t
    # d'Alembert: u = f(t - x) so the outward derivative at x = 0 is f'(t)
    expect = np.gradient(cubic_bspline(2 * (t + 0.6) / 0.3), t)
    assert np.abs(tr[:, 0] - expect).max() <= 0.05 * np.abs(expect).max()


def test_gauge_equivalent_coefficients_share_dtn():
    B = ConnectionData.smooth_random(2, 1, seed=2)
    V = PotentialData.smooth_random(2, 1, seed=2)
    gt = gauge_transform(B, V, boundary_identity_gauge(1, 2, seed=5, amplitude=4.0))
    dists = []
    for nx in (21, 41, 81):
        ch = CoordinateChart.uniform(1.0, (1.0,), nx)
        basis = BoundaryBasis(ch, np.linspace(-0.6, 0.6, 5), 0.35, 2)
        L1 = dtn_matrix(FLAT, B, V, basis).matrix
        L2 = dtn_matrix(FLAT, gt.connection, gt.potential, basis).matrix
        dists.append(np.linalg.norm(L1 - L2) / np.linalg.norm(L1))
    assert np.all(_orders(dists) >= 1.0)


def test_energy_of_zero_solution_is_zero():
    ch = CoordinateChart.uniform(1.0, (1.0,), 21)
    s = solve_forward(FLAT, B0, V0, ch)
    E = energy_history(FLAT, B0, s, orders=(0, 1))
    assert np.all(E.total == 0) and np.all(E.higher[1] == 0)


def test_standing_wave_energy_conserved_to_second_order():
    errs = []
    for nx in (21, 41, 81):
        ch = CoordinateChart.uniform(1.0, (1.0,), nx)
        u = standing_wave(ch)
        s = solve_forward(FLAT, B0, V0, ch, cauchy=CauchyData.from_field(ch, B0, u, -1.0))
        errs.append(np.abs(energy_history(FLAT, B0, s).wave - np.pi ** 2 / 4).max())
    assert np.all(_orders(errs) >= 1.8)


def test_gronwall_constant_stable_under_refinement():
    metric = ConformalMetric(CustomFixture(1, 0.15), eps=0.2)
    B = ConnectionData.smooth_random(2, 1, seed=1)
    V = PotentialData.smooth_random(2, 1, seed=1)
    bump = AnalyticTestField.from_scalar(ScalarProfile.bump([-1.0, 0.5], 0.3), [1.0, 0.5j])
    C = []
    for nx in (41, 81):
        ch = stable_chart(metric, 1.0, (1.0,), nx)
        s = solve_forward(metric, B, V, ch, cauchy=CauchyData.from_field(ch, B, bump, -1.0))
        E = energy_history(metric, B, s).total
        C.append(E.max() / E[0])
    assert abs(C[1] - C[0]) / C[1] <= 0.10


def test_speed_audit_flat_bump():
    ch = CoordinateChart.uniform(1.0, (1.0,), 101)
    bump = AnalyticTestField.from_scalar(ScalarProfile.bump([-1.0, 0.5], 0.15), [1.0])
    rep = speed_audit(FLAT, B0, V0, ch, CauchyData.from_field(ch, B0, bump, -1.0), [0.5], 0.15)
    assert rep.max_leakage <= 1e-6
    assert rep.mass[0] > 0


def test_control_reaches_image_of_basis_exactly():
    ch = CoordinateChart.uniform(1.2, (1.0,), 81)
    B = ConnectionData.smooth_random(2, 1, seed=2)
    V = PotentialData.smooth_random(2, 1, seed=3)
    basis = BoundaryBasis(ch, np.linspace(-1.0, -0.4, 6), 0.2, 2)
    c = np.zeros(basis.size, complex)
    c[[1, 7, 14]] = [1.0, 0.5j, -0.3]
    s = solve_forward(FLAT, B, V, ch, f=BoundarySource(np.tensordot(c, basis.sources(), axes=(0, 0))))
    target = cauchy_at(FLAT, B, s, 0.0)
    res = control_solve(FLAT, B, V, ch, target, (-1.2, -0.2), basis=basis)
    assert res.residual <= 1e-6
    assert np.abs(res.coefficients - c).max() <= 1e-5
    assert not res.flagged


def test_control_discrepancy_principle_hits_requested_residual():
    ch = CoordinateChart.uniform(1.2, (1.0,), 41)
    B = ConnectionData.smooth_random(2, 1, seed=2)
    V = PotentialData.smooth_random(2, 1, seed=3)
    basis = BoundaryBasis(ch, np.linspace(-1.0, -0.4, 6), 0.2, 2)
    c = np.zeros(basis.size, complex)
    c[[1, 7, 14]] = [1.0, 0.5j, -0.3]
    s = solve_forward(FLAT, B, V, ch, f=BoundarySource(np.tensordot(c, basis.sources(), axes=(0, 0))))
    target = cauchy_at(FLAT, B, s, 0.0)
    plain = control_solve(FLAT, B, V, ch, target, (-1.2, -0.2), basis=basis)
    runs = [control_solve(FLAT, B, V, ch, target, (-1.2, -0.2), basis=basis, noise_level=d) for d in (1e-3, 1e-2)]
    for d, r in zip((1e-3, 1e-2), runs):
        assert abs(r.residual - 1.1 * d) <= 1e-6 * d
        assert r.epsilon > plain.epsilon
    assert runs[1].epsilon > runs[0].epsilon
    assert np.linalg.norm(runs[1].coefficients) < np.linalg.norm(runs[0].coefficients)
    with pytest.raises(SolverError, match="either"):
        control_solve(FLAT, B, V, ch, target, (-1.2, -0.2), basis=basis, epsilon=1.0, noise_level=1e-3)


def test_control_zero_target_and_off_grid_slice():
    ch = CoordinateChart.uniform(1.0, (1.0,), 41)
    zero = CauchyData.zero(ch, 1, 0.0)
    res = control_solve(FLAT, B0, V0, ch, zero, (-1.0, -0.2), n_bumps=6)
    assert np.all(res.coefficients == 0) and res.residual == 0
    with pytest.raises(SolverError, match="time level"):
        control_solve(FLAT, B0, V0, ch, CauchyData.zero(ch, 1, 0.013), (-1.0, -0.2))


def test_control_window_too_early_is_flagged_unreachable():
    # waves from a window closing at -0.9 cannot yet occupy the middle at t = -0.7
    ch = CoordinateChart.uniform(1.0, (1.0,), 81)
    x = ch.axis(0)
    u0 = smooth_bump((x - 0.5) / 0.1)[:, None]
    k = ch.level_index(0.0) - int(round(0.7 / ch.h_t))
    target = CauchyData(u0, None, ch.t[k])
    res = control_solve(FLAT, B0, V0, ch, target, (-1.0, ch.t[k] - 0.2), n_bumps=4)
    assert res.residual >= 0.99


def test_discrete_duality_pairing_converges():
    H = lambda X: np.stack([smooth_bump(np.hypot(X[..., 0] - 0.1, X[..., 1] - 0.5) / 0.4),
                            0.3j * smooth_bump(np.hypot(X[..., 0], X[..., 1] - 0.4) / 0.3)], -1)
    B = ConnectionData.smooth_random(2, 1, seed=2)
    V = PotentialData.smooth_random(2, 1, seed=3)
    rel = []
    for nx in (21, 41, 81):
        ch = CoordinateChart.uniform(1.0, (1.0,), nx)
        basis = BoundaryBasis(ch, [-0.3], 0.5, 2)
        f = BoundarySource(basis.sources()[0] + 0.5j * basis.sources()[3])
        rel.append(duality_defect(FLAT, B, V, ch, f, H).relative)
    assert np.all(_orders(rel) >= 1.0)
