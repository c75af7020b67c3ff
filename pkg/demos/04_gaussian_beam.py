"""
Gaussian beams
==============

A Gaussian beam concentrates along a null geodesic.  With a jet of order J the
wave operator applied to the beam decays like a negative power of the
frequency lambda.  We fit that power on a log-log scale and write the data as
two columns for gnuplot.

Run with ``python demos/04_gaussian_beam.py`` (about 15 seconds).
"""
import numpy as np

from connwave.artifacts import write_plot_data
from connwave.bundle import ConnectionData, PotentialData
from connwave.gaussian_beam import (BeamConfig, beam_geodesic, build_fermi_chart, residual_decay,
                                    solve_amplitude_jets, solve_phase_jets)
from connwave.geometry import CoordinateChart
from connwave.metrics import Minkowski

metric = Minkowski(1)
domain = CoordinateChart.uniform(1.0, (1.0,), 11)
B = ConnectionData.affine_random(2, 1, seed=1)
V = PotentialData.affine_random(2, 1, seed=1)

path = beam_geodesic(metric, [0.0, 0.5], [1.0], domain)
chart = build_fermi_chart(metric, path, 0.5)

for J in (2, 4):
    phase = solve_phase_jets(chart, J)
    amp = solve_amplitude_jets(chart, phase, B, V)
    rd = residual_decay(metric, B, V, chart, phase, amp, BeamConfig(J=J, delta=0.5), domain)
    print(f"J = {J}: fitted slope {rd.slope:+.2f}, predicted at most {rd.theory:+.2f}")
    write_plot_data(f"beam_J{J}.dat", np.log(rd.lambdas), np.log(rd.norms), "log(lambda)  log(residual)")
print("wrote beam_J2.dat and beam_J4.dat  (gnuplot: plot 'beam_J4.dat' u 1:2 w lp)")
