"""Acceptance checks 1-12.

Each test runs one registered check from :mod:`connwave.checks`, prints every
measured quantity next to its threshold, and fails if any line or the runtime
budget is missed.  Run with ``pytest -s tests/test_acceptance.py`` to see the
lines, or ``python -m connwave --check all``.
"""
import pytest

from connwave.checks import CHECKS, run_check

ORDERED = sorted(CHECKS, key=lambda k: CHECKS[k][0])


def _run(name):
    result = run_check(name)
    print()
    print(result.summary())
    failed = [ln.text() for ln in result.lines if not ln.passed]
    if result.runtime >= result.budget:
        failed.append(f"runtime {result.runtime:.1f} s over budget {result.budget:g} s")
    assert not failed, "; ".join(failed)


def test_registry_covers_twelve_checks():
    assert [CHECKS[k][0] for k in ORDERED] == list(range(1, 13))


def test_c01_algebraic_identities():
    _run("identities")


def test_c02_green_formula_second_order():
    _run("green")


def test_c03_manufactured_solution_convergence():
    _run("manufactured")


def test_c04_dtn_gauge_invariance():
    _run("dtn-gauge")


def test_c05_finite_speed_of_propagation():
    _run("finite-speed")


def test_c06_energy_estimates():
    _run("energy")


@pytest.mark.slow
def test_c07_gauge_reconstruction():
    _run("reconstruct")


@pytest.mark.slow
def test_c08_gaussian_beam_residual_decay():
    _run("beam-decay")


@pytest.mark.slow
def test_c09_beam_probe_recovers_transport():
    _run("beam-probe")


def test_c10_causal_structure():
    _run("causal")


def test_c11_contraction_inversion():
    _run("contraction")


@pytest.mark.slow
def test_c12_boundary_observability():
    _run("observability")
