import json

import numpy as np
import pytest
from scipy.linalg import expm

from connwave.bundle import ConnectionData, PotentialData
from connwave.gaussian_beam import (BeamConfig, BeamError, assemble_beam, beam_boundary_source,
                                    beam_geodesic, beam_invariants, build_fermi_chart, cutoff,
                                    decay_exponent, eikonal_defect, normal_form, probe_switch,
                                    residual_decay, residual_norm, solve_amplitude_jets,
                                    solve_phase_jets, transport_defect)
from connwave.geometry import CoordinateChart
from connwave.metrics import Minkowski, make_metric


def _flat_chart(n, delta=0.5, lengths=None, p=None, direction=None, T=1.0):
    lengths = lengths or (1.0,) + (2.0,) * (n - 1)
    dom = CoordinateChart.uniform(T, lengths, 11)
    p = p if p is not None else [0.0, 0.5] + [1.0] * (n - 1)
    direction = direction if direction is not None else [1.0] + [0.0] * (n - 1)
    path = beam_geodesic(Minkowski(n), p, direction, dom)
    return dom, build_fermi_chart(Minkowski(n), path, delta)


def _constant_pair(N, n, seed=3):
    return (ConnectionData.affine_random(N, n, seed, slope=0.0),
            PotentialData.affine_random(N, n, seed, slope=0.0))


# ---------------------------------------------------------------------------
# Fermi charts
# ---------------------------------------------------------------------------


def test_flat_frame_matches_hand_computed_example():
    dom = CoordinateChart.uniform(1.0, (1.0, 1.0), 11)
    path = beam_geodesic(Minkowski(2), [0.0, 0.0, 0.5], [1.0, 0.0], dom)
    fc = build_fermi_chart(Minkowski(2), path, 0.3)
    F = fc.frames[fc.k0]
    assert np.allclose(F[:, 0], [1, 1, 0])
    assert np.allclose(F[:, 1], [-0.5, 0.5, 0])
    assert np.allclose(np.abs(F[:, 2]), [0, 0, 1])
    g = np.diag([-1.0, 1.0, 1.0])
    assert np.allclose(F.T @ g @ F, normal_form(2), atol=1e-14)
    assert fc.defects["normal_form"] <= 1e-12 and fc.defects["first_derivative"] <= 1e-12


def test_two_coordinate_normal_form_in_one_space_dimension():
    _, fc = _flat_chart(1)
    F = fc.frames[fc.k0]
    assert np.allclose(F.T @ np.diag([-1.0, 1.0]) @ F, [[0, 1], [1, 0]], atol=1e-14)


def test_fermi_coordinates_round_trip():
    _, fc = _flat_chart(2)
    rng = np.random.default_rng(0)
    s = rng.uniform(-0.4, 0.4, 20)
    y = rng.uniform(-0.2, 0.2, (20, 2))
    s2, y2, ok = fc.to_fermi(fc.to_chart(s, y))
    assert np.all(ok) and np.allclose(s2, s, atol=1e-12) and np.allclose(y2, y, atol=1e-12)


def test_perturbed_chart_invariants():
    dom = CoordinateChart.uniform(1.0, (1.0, 1.0), 11)
    metric = make_metric("perturbed", 2)
    path = beam_geodesic(metric, [0.0, 0.5, 0.5], [1.0, 0.0], dom)
    fc = build_fermi_chart(metric, path, 0.2)
    assert fc.mode == "general"
    assert fc.defects["normal_form"] <= 1e-8
    assert fc.defects["first_derivative"] <= 1e-6
    # the tube map stays close to the exponential map's linearisation
    s, y = np.array([0.1]), np.array([[0.05, -0.03]])
    X = fc.to_chart(s, y)
    s2, y2, ok = fc.to_fermi(X)
    assert ok[0] and abs(s2[0] - 0.1) < 1e-8 and np.allclose(y2, y, atol=1e-8)


def test_chart_rejects_timelike_curve():
    dom = CoordinateChart.uniform(1.0, (1.0,), 11)
    from connwave.causal import trace_null_geodesic
    path = trace_null_geodesic(Minkowski(1), [0.0, 0.5], [1.0, 1.0], dom)
    path.causal_type = "timelike"
    with pytest.raises(BeamError):
        build_fermi_chart(Minkowski(1), path, 0.2)


# ---------------------------------------------------------------------------
# phase
# ---------------------------------------------------------------------------


def test_flat_riccati_matches_closed_form():
    _, fc = _flat_chart(2)
    ph = solve_phase_jets(fc, 2)
    P = np.diag([0.0, 1.0])
    for k in range(0, fc.s.size, 17):
        sig = fc.s[k] - fc.s0
        H = np.linalg.inv(-1j * np.eye(2) + sig * P)
        assert np.allclose(ph.space.hessian(ph.psi[k]), H, atol=1e-9)
    assert ph.min_imag_eig.min() > 0


def test_phase_is_pinned_on_the_curve():
    _, fc = _flat_chart(2)
    ph = solve_phase_jets(fc, 4)
    low = ph.space.degrees <= 1
    assert np.all(ph.psi[:, low] == 0)
    s = fc.s[::25]
    assert np.all(ph.evaluate(s, np.zeros((s.size, 2))) == 0)


@pytest.mark.parametrize("n,J", [(1, 4), (2, 4), (2, 6)])
def test_eikonal_taylor_coefficients_vanish(n, J):
    _, fc = _flat_chart(n)
    ph = solve_phase_jets(fc, J)
    assert eikonal_defect(fc, ph) <= 1e-8


def test_positivity_monitor_reports_witness():
    _, fc = _flat_chart(2)
    with pytest.raises(BeamError, match="s="):
        solve_phase_jets(fc, 2, c_min=0.9)


# ---------------------------------------------------------------------------
# amplitude
# ---------------------------------------------------------------------------


def test_free_transport_keeps_leading_amplitude_constant():
    _, fc = _flat_chart(1)
    ph = solve_phase_jets(fc, 2)
    N = 2
    B = ConnectionData.zero(N, 1)
    V = PotentialData.zero(N)
    am = solve_amplitude_jets(fc, ph, B, V)
    assert np.allclose(am.leading(), np.eye(N)[0], atol=1e-12)


def test_constant_connection_gives_exponential_transport():
    _, fc = _flat_chart(1)
    ph = solve_phase_jets(fc, 2)
    B, V = _constant_pair(2, 1)
    am = solve_amplitude_jets(fc, ph, B, V)
    S = B(np.zeros((1, 2)))[0].sum(axis=0)  # gamma' = (1, 1)
    w = np.eye(2)[0]
    for k in range(0, fc.s.size, 13):
        exact = expm(-S * (fc.s[k] - fc.s0)) @ w
        assert np.allclose(am.leading()[k], exact, atol=1e-9)
    norms = np.linalg.norm(am.leading(), axis=1)
    assert np.ptp(norms) <= 1e-9


def test_transverse_spreading_factor_in_two_dimensions():
    # the leading amplitude carries (1 + i sigma)^(-1/2) from the spreading of the phase
    _, fc = _flat_chart(2)
    ph = solve_phase_jets(fc, 2)
    am = solve_amplitude_jets(fc, ph, ConnectionData.zero(1, 2), PotentialData.zero(1))
    sig = fc.s - fc.s0
    assert np.allclose(am.leading()[:, 0], (1 + 1j * sig) ** -0.5, atol=1e-9)


@pytest.mark.parametrize("n,J", [(1, 4), (2, 4)])
def test_transport_taylor_coefficients_vanish(n, J):
    _, fc = _flat_chart(n)
    ph = solve_phase_jets(fc, J)
    B = ConnectionData.affine_random(2, n, seed=5)
    V = PotentialData.affine_random(2, n, seed=5)
    am = solve_amplitude_jets(fc, ph, B, V)
    d = transport_defect(fc, ph, am, B, V)
    assert d["leading"] <= 1e-7 and d["all_orders"] <= 1e-7


def test_general_mode_invariants():
    dom = CoordinateChart.uniform(1.0, (1.0, 1.0), 11)
    metric = make_metric("perturbed", 2)
    path = beam_geodesic(metric, [0.0, 0.5, 0.5], [1.0, 0.0], dom)
    fc = build_fermi_chart(metric, path, 0.2)
    B = ConnectionData.affine_random(2, 2, seed=1)
    V = PotentialData.affine_random(2, 2, seed=1)
    ph = solve_phase_jets(fc, 2)
    am = solve_amplitude_jets(fc, ph, B, V)
    inv = beam_invariants(fc, ph, am, B, V)
    assert inv["eikonal"] <= 1e-6 and inv["transport_leading"] <= 1e-6
    assert inv["min_imag_eig"] > 0 and inv["unitarity_drift"] <= 1e-8
    json.dumps(inv)


def test_general_mode_refuses_high_order():
    dom = CoordinateChart.uniform(1.0, (1.0, 1.0), 11)
    metric = make_metric("perturbed", 2)
    path = beam_geodesic(metric, [0.0, 0.5, 0.5], [1.0, 0.0], dom)
    fc = build_fermi_chart(metric, path, 0.2)
    with pytest.raises(BeamError):
        solve_phase_jets(fc, 3)


# ---------------------------------------------------------------------------
# assembled beams
# ---------------------------------------------------------------------------


def test_cutoff_profile():
    r = np.linspace(0, 1.2, 601)
    chi, d1, d2 = cutoff(r, 1.0)
    assert np.all(chi[r <= 0.5] == 1) and np.all(chi[r >= 1.0] == 0)
    assert np.all(np.diff(chi) <= 0)
    h = r[1] - r[0]
    fd = np.gradient(chi, h)
    inner = (r > 0.01) & (r < 1.19)
    assert np.max(np.abs(fd[inner] - d1[inner])) < 5e-3
    q = 2 * 0.7 - 1
    assert cutoff(np.array([0.7]), 1.0)[0][0] == pytest.approx(np.exp(1 - 1 / (1 - q * q)), rel=1e-15)


def _beam(n=2, J=4, lam=40.0, delta=0.5, seed=2):
    dom, fc = _flat_chart(n, delta)
    ph = solve_phase_jets(fc, J)
    B = ConnectionData.affine_random(2, n, seed=seed)
    V = PotentialData.affine_random(2, n, seed=seed)
    am = solve_amplitude_jets(fc, ph, B, V)
    cfg = BeamConfig(J=J, lambdas=(lam,), delta=delta)
    return dom, fc, ph, am, B, V, cfg, assemble_beam(fc, ph, am, cfg, lam=lam)


def test_zero_amplitude_gives_zero_beam():
    dom, fc, ph, am, B, V, cfg, _ = _beam()
    am.coeffs[:] = 0
    am.dcoeffs[:] = 0
    assert np.all(assemble_beam(fc, ph, am, cfg, grid=dom) == 0)


def test_beam_on_curve_equals_amplitude():
    _, fc, ph, am, *_, beam = _beam()
    ks = np.arange(5, fc.s.size - 5, 20)
    vals = beam(fc.points[ks])
    expect = am.combined(beam.lam, fc.s[ks])[:, 0, :]
    assert np.allclose(vals, expect, atol=1e-12)


def test_closed_form_partials_match_differences():
    _, fc, *_, beam = _beam(lam=25.0)
    X = fc.to_chart(np.array([0.1, -0.2]), np.array([[0.05, 0.02], [-0.1, 0.04]]))
    v, d1, d2 = beam.evaluate(X, True)
    h = 1e-5
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (beam(X + e) - beam(X - e)) / (2 * h)
        assert np.allclose(fd, d1[:, i], rtol=1e-6, atol=1e-6)
        vp, d1p, _ = beam.evaluate(X + e, True)
        vm, d1m, _ = beam.evaluate(X - e, True)
        assert np.allclose((d1p - d1m) / (2 * h), d2[:, i], rtol=1e-5, atol=1e-4)


@pytest.mark.parametrize("lam", [50.0, 400.0])
def test_gradient_on_curve_is_dominated_by_the_phase(lam):
    _, fc, ph, am, *_, beam = _beam(lam=lam)
    p = fc.points[fc.k0][None]
    _, d1, _ = beam.evaluate(p, True)
    w = am.leading()[fc.k0]
    dy1 = fc._affine()[2][1]
    gap = np.abs(d1[0].T / (1j * lam) - np.outer(w, dy1)).max()
    assert gap <= 5.0 / lam


def test_beam_vanishes_outside_tube():
    _, fc, *_, beam = _beam(delta=0.3)
    X = fc.to_chart(np.array([0.0, 0.1]), np.array([[0.31, 0.0], [0.0, -0.4]]))
    assert np.all(beam(X) == 0)


def test_config_validation():
    with pytest.raises(BeamError):
        BeamConfig(lambdas=(10.0, 5.0))
    with pytest.raises(BeamError):
        BeamConfig(delta=-1.0)
    _, fc, ph, am, *_ = _beam(delta=0.3)
    with pytest.raises(BeamError):
        assemble_beam(fc, ph, am, BeamConfig(delta=0.5))


# ---------------------------------------------------------------------------
# residual decay
# ---------------------------------------------------------------------------


def test_decay_exponents():
    assert decay_exponent(6, 2, 0) == 2.0
    assert decay_exponent(4, 1, 0) == 0.75
    assert decay_exponent(2, 2, 0) == 0.0
    assert decay_exponent(6, 2, 1) == 1.0


def test_short_wavenumber_range_rejected():
    dom, fc, ph, am, B, V, _, _ = _beam(n=1)
    cfg = BeamConfig(J=4, lambdas=(10.0, 100.0), delta=0.5)
    with pytest.raises(BeamError, match="decades"):
        residual_decay(Minkowski(1), B, V, fc, ph, am, cfg, dom)


def test_under_resolved_quadrature_is_detected():
    dom, fc, ph, am, B, V, _, _ = _beam(n=1)
    cfg = BeamConfig(J=4, lambdas=(20.0, 200.0, 700.0), delta=0.5, points_per_width=0.3)
    with pytest.raises(BeamError, match="under-resolved"):
        residual_decay(Minkowski(1), B, V, fc, ph, am, cfg, dom)


def test_residual_of_exact_plane_wave_is_zero():
    # n = 1, B = V = 0: phase and amplitude are exact inside the inner tube
    dom, fc = _flat_chart(1, 2.0)
    ph = solve_phase_jets(fc, 2)
    am = solve_amplitude_jets(fc, ph, ConnectionData.zero(1, 1), PotentialData.zero(1))
    beam = assemble_beam(fc, ph, am, BeamConfig(J=2, lambdas=(200.0,), delta=2.0), lam=200.0)
    full, half = residual_norm(Minkowski(1), ConnectionData.zero(1, 1), PotentialData.zero(1), beam, dom)
    assert full <= 1e-8


def test_raising_the_jet_order_speeds_up_decay():
    dom, fc = _flat_chart(1)
    B = ConnectionData.affine_random(2, 1, seed=1)
    V = PotentialData.affine_random(2, 1, seed=1)
    slopes = []
    for J in (2, 4):
        ph = solve_phase_jets(fc, J)
        am = solve_amplitude_jets(fc, ph, B, V)
        cfg = BeamConfig(J=J, lambdas=(20.0, 60.0, 200.0, 640.0), delta=0.5)
        rd = residual_decay(Minkowski(1), B, V, fc, ph, am, cfg, dom)
        assert rd.slope <= rd.theory + 0.3
        slopes.append(rd.slope)
    assert slopes[1] < slopes[0]


def test_lowest_order_two_dimensional_beam_stays_bounded():
    dom, fc = _flat_chart(2, 1.0)
    B = ConnectionData.affine_random(2, 2, seed=1)
    V = PotentialData.affine_random(2, 2, seed=1)
    ph = solve_phase_jets(fc, 2)
    am = solve_amplitude_jets(fc, ph, B, V)
    cfg = BeamConfig(J=2, lambdas=(20.0, 60.0, 200.0, 640.0), delta=1.0)
    rd = residual_decay(Minkowski(2), B, V, fc, ph, am, cfg, dom)
    assert rd.theory == 0.0 and rd.slope <= 0.2
    assert len(rd.rows()) == 4


# ---------------------------------------------------------------------------
# boundary probe
# ---------------------------------------------------------------------------


def test_probe_switch():
    t = np.array([-1.0, 0.35, 0.4, 0.45, 0.9])
    eta = probe_switch(t, 0.25, 0.2)
    assert eta[0] == 1 and eta[1] == 1 and eta[3] == 0 and eta[4] == 0
    assert eta[2] == pytest.approx(0.5)


def _probe_grid(T, nx, levels_per_unit):
    steps = int(round(2 * T * levels_per_unit))
    return CoordinateChart(T, (1.0,), (steps + 1, nx))


def test_beam_away_from_boundary_gives_zero_source():
    grid = _probe_grid(0.2, 101, 120)
    path = beam_geodesic(Minkowski(1), [0.0, 0.5], [1.0], grid)
    fc = build_fermi_chart(Minkowski(1), path, 0.1)
    B, V = ConnectionData.zero(2, 1), PotentialData.zero(2)
    ph = solve_phase_jets(fc, 2)
    am = solve_amplitude_jets(fc, ph, B, V)
    beam = assemble_beam(fc, ph, am, BeamConfig(J=2, lambdas=(30.0,), delta=0.1), lam=30.0)
    f, rep = beam_boundary_source(Minkowski(1), B, V, beam, grid, 0.0, 0.2)
    assert np.all(f.values == 0)
    assert rep.c0_error == pytest.approx(rep.beam_max, rel=1e-12)


def test_probe_window_touching_the_boundary_is_rejected():
    grid = _probe_grid(0.75, 101, 120)
    path = beam_geodesic(Minkowski(1), [0.25, 0.5], [1.0], grid)
    fc = build_fermi_chart(Minkowski(1), path, 0.3)
    B, V = ConnectionData.zero(1, 1), PotentialData.zero(1)
    ph = solve_phase_jets(fc, 2)
    am = solve_amplitude_jets(fc, ph, B, V)
    beam = assemble_beam(fc, ph, am, BeamConfig(J=2, lambdas=(10.0,), delta=0.3), lam=10.0)
    with pytest.raises(BeamError, match="probe window"):
        beam_boundary_source(Minkowski(1), B, V, beam, grid, 0.6, 0.2)


def test_probe_reads_converge_with_wavenumber():
    grid = _probe_grid(0.75, 401, 480)
    path = beam_geodesic(Minkowski(1), [0.25, 0.5], [1.0], grid)
    fc = build_fermi_chart(Minkowski(1), path, 0.5)
    B = ConnectionData.affine_random(2, 1, seed=1)
    V = PotentialData.affine_random(2, 1, seed=1)
    ph = solve_phase_jets(fc, 2)
    am = solve_amplitude_jets(fc, ph, B, V, orders=0)
    gaps = []
    for lam in (4.0, 16.0):
        beam = assemble_beam(fc, ph, am, BeamConfig(J=2, lambdas=(lam,), delta=0.5), lam=lam)
        _, rep = beam_boundary_source(Minkowski(1), B, V, beam, grid, 0.25, 0.2)
        gaps.append((np.abs(rep.probe_value - rep.expected_value).max(),
                     np.abs(rep.probe_derivative - rep.expected_derivative).max(), rep.c0_error))
        json.dumps(rep.to_dict())
    for a, b in zip(*gaps):
        assert b < 0.6 * a
