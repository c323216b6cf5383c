"""FDTD unit tests: waveform, stability, linearity, acquisition plumbing.

The quantitative physics oracles (wave speed, Fresnel amplitude, PML
residual) live in the acceptance suite; here we pin the cheap contracts.
"""

import math

import numpy as np
import pytest

from gprinv.errors import Instability, InvalidRange, OutOfRange
from gprinv.fdtd import (AScan, BScan, C0, GridSpec, ScanSpec, SourceSpec,
                         courant_dt, gaussian_waveform, run_ascan, run_bscan,
                         run_probes)
from gprinv.scene import ObjectSpec, Scenario, SoilSpec, build_material_field


def _air(grid):
    rows, cols = grid.interior_shape()
    return np.ones((rows, cols)), np.zeros((rows, cols))


SMALL = GridSpec(cell_size=0.01, soil_width=0.4, soil_depth=0.2,
                 air_height=0.2, pml_cells=8, time_window=4e-9,
                 trace_samples=128)
SRC = SourceSpec(center_frequency=1.0e9, tx_offset_x=-0.05, rx_offset_x=0.05)


# ---------------------------------------------------------------------------
# Waveform and time step
# ---------------------------------------------------------------------------

def test_courant_dt_formula():
    assert courant_dt(0.0025, 1.0) == pytest.approx(
        0.0025 / (C0 * math.sqrt(2.0)), rel=1e-15)
    assert courant_dt(0.0025, 1.0) <= 5.9e-12
    assert courant_dt(0.0025, 0.5) == pytest.approx(
        0.5 * 0.0025 / (C0 * math.sqrt(2.0)), rel=1e-15)
    with pytest.raises(OutOfRange):
        courant_dt(-1.0)
    with pytest.raises(OutOfRange):
        courant_dt(0.0025, 1.5)


def test_gaussian_waveform_shape():
    fc, amp = 1.0e9, 2.5
    chi = 1.0 / fc
    t = np.linspace(0.0, 4e-9, 4001)
    w = gaussian_waveform(t, amp, fc)
    assert w.max() == pytest.approx(amp, rel=1e-6)
    assert t[np.argmax(w)] == pytest.approx(chi, abs=2e-12)
    # effectively zero turn-on
    assert abs(w[0]) <= amp * math.exp(-2.0 * math.pi ** 2) * 1.0001
    # symmetric about the peak
    assert gaussian_waveform(chi - 0.3e-9, amp, fc) == pytest.approx(
        gaussian_waveform(chi + 0.3e-9, amp, fc), rel=1e-12)


def test_gridspec_validation():
    with pytest.raises(OutOfRange):
        GridSpec(cell_size=-0.01)
    with pytest.raises(OutOfRange):
        GridSpec(pml_cells=2)
    with pytest.raises(OutOfRange):
        GridSpec(trace_samples=1)
    g = GridSpec(cell_size=0.01, soil_width=0.4, soil_depth=0.2, air_height=0.2)
    assert g.interior_shape() == (40, 40)
    with pytest.raises(InvalidRange):
        GridSpec(cell_size=0.011, soil_width=0.4, soil_depth=0.2,
                 air_height=0.2).interior_shape()


def test_step_count_is_integer_rounding_of_window():
    g = GridSpec(cell_size=0.01, soil_width=0.4, soil_depth=0.2,
                 air_height=0.2, time_window=4e-9)
    assert g.n_steps == int(round(4e-9 / g.time_step))


# ---------------------------------------------------------------------------
# Solver behaviour
# ---------------------------------------------------------------------------

def test_trace_length_and_determinism():
    eps, sig = _air(SMALL)
    a = run_ascan(eps, sig, SMALL, SRC, (0.1, 0.3), (0.3, 0.3))
    b = run_ascan(eps, sig, SMALL, SRC, (0.1, 0.3), (0.3, 0.3))
    assert isinstance(a, AScan)
    assert a.trace.shape == (SMALL.trace_samples,)
    assert np.array_equal(a.trace, b.trace)
    assert np.isfinite(a.trace).all()
    assert np.abs(a.trace).max() > 0.0
    assert a.trace[0] == 0.0  # nothing arrives at t = 0


def test_linearity_amplitude_scaling_is_bit_exact():
    # Scaling the source by 2 scales every linear update by exactly 2 in
    # IEEE arithmetic, so the recorded traces must match bit for bit.
    eps, sig = _air(SMALL)
    one = run_ascan(eps, sig, SMALL, SRC, (0.1, 0.3), (0.3, 0.3))
    two = run_ascan(eps, sig, SMALL,
                    SourceSpec(amplitude=2.0, center_frequency=SRC.center_frequency,
                               tx_offset_x=SRC.tx_offset_x,
                               rx_offset_x=SRC.rx_offset_x),
                    (0.1, 0.3), (0.3, 0.3))
    assert np.array_equal(two.trace, 2.0 * one.trace)


def test_probe_positions_map_to_distinct_nodes():
    eps, sig = _air(SMALL)
    tr = run_probes(eps, sig, SMALL, SRC, (0.1, 0.3), [(0.25, 0.3), (0.32, 0.3)])
    assert tr.shape == (SMALL.trace_samples, 2)
    # farther probe peaks later and weaker (cylindrical spreading)
    assert np.argmax(np.abs(tr[:, 1])) > np.argmax(np.abs(tr[:, 0]))
    assert np.abs(tr[:, 1]).max() < np.abs(tr[:, 0]).max()


def test_wave_slows_down_in_dielectric():
    grid = GridSpec(cell_size=0.01, soil_width=0.8, soil_depth=0.2,
                    air_height=0.2, pml_cells=8, time_window=6e-9,
                    trace_samples=512)
    rows, cols = grid.interior_shape()
    eps = np.ones((rows, cols)); sig = np.zeros((rows, cols))
    tx, rx = (0.15, 0.3), (0.65, 0.3)
    t_air = run_probes(eps, sig, grid, SRC, tx, [rx])[:, 0]
    eps4 = np.full((rows, cols), 4.0)
    t_soil = run_probes(eps4, sig, grid, SRC, tx, [rx])[:, 0]
    # in eps=4 the pulse travels at c/2: peak arrives visibly later
    lag = (np.argmax(np.abs(t_soil)) - np.argmax(np.abs(t_air)))
    dt_out = grid.time_window / (grid.trace_samples - 1)
    expected = 0.5 / C0  # extra delay over 0.5 m at half speed
    assert lag * dt_out == pytest.approx(expected, rel=0.15)


def test_conductive_medium_attenuates():
    eps, sig = _air(SMALL)
    dry = run_ascan(eps, sig, SMALL, SRC, (0.1, 0.3), (0.3, 0.3))
    lossy = run_ascan(eps, np.full_like(sig, 0.05), SMALL, SRC,
                      (0.1, 0.3), (0.3, 0.3))
    assert np.abs(lossy.trace).max() < np.abs(dry.trace).max()


def test_material_validation_rejects_bad_grids():
    eps, sig = _air(SMALL)
    bad = eps.copy(); bad[5, 5] = 0.0
    with pytest.raises(OutOfRange):
        run_ascan(bad, sig, SMALL, SRC, (0.1, 0.3), (0.3, 0.3))
    with pytest.raises(OutOfRange):
        run_ascan(eps, sig - 1.0, SMALL, SRC, (0.1, 0.3), (0.3, 0.3))
    with pytest.raises(InvalidRange):
        run_ascan(eps[:-1], sig[:-1], SMALL, SRC, (0.1, 0.3), (0.3, 0.3))
    with pytest.raises(OutOfRange):
        run_ascan(eps, sig, SMALL, SRC, (-0.2, 0.3), (0.3, 0.3))


def test_oversized_dt_is_detected_as_instability():
    grid = GridSpec(cell_size=0.01, soil_width=0.4, soil_depth=0.2,
                    air_height=0.2, pml_cells=8, time_window=4e-9,
                    trace_samples=64, dt=1.2 * courant_dt(0.01, 1.0))
    eps, sig = _air(grid)
    with pytest.raises(Instability):
        run_ascan(eps, sig, grid, SRC, (0.1, 0.3), (0.3, 0.3))


# ---------------------------------------------------------------------------
# B-scan acquisition
# ---------------------------------------------------------------------------

def _desk_scenario(objects):
    return Scenario(soil=SoilSpec(), field_seed=3, objects=objects,
                    soil_width=0.4, soil_depth=0.2, cell_size=0.01)


def test_scanspec_positions():
    scan = ScanSpec(first_position=0.25, step=0.025, n_positions=5)
    assert np.allclose(scan.positions(), [0.25, 0.275, 0.3, 0.325, 0.35])
    with pytest.raises(OutOfRange):
        ScanSpec(step=0.0)
    with pytest.raises(OutOfRange):
        ScanSpec(n_positions=0)


def test_run_bscan_shapes_and_progress():
    scan = ScanSpec(first_position=0.15, step=0.05, n_positions=3)
    seen = []
    bscan = run_bscan(_desk_scenario([]), SMALL, SRC, scan,
                      progress=lambda k, n: seen.append((k, n)))
    assert isinstance(bscan, BScan)
    assert bscan.traces.shape == (SMALL.trace_samples, 3)
    assert bscan.scan_step == 0.05
    assert bscan.first_position == 0.15
    assert seen == [(0, 3), (1, 3), (2, 3)]
    assert np.isfinite(bscan.traces).all()


def test_run_bscan_object_changes_traces():
    scan = ScanSpec(first_position=0.2, step=0.025, n_positions=2)
    empty = run_bscan(_desk_scenario([]), SMALL, SRC, scan)
    obj = ObjectSpec("circle", 0.2, 0.1, 25.0, radius=0.04)
    with_obj = run_bscan(_desk_scenario([obj]), SMALL, SRC, scan)
    assert not np.allclose(empty.traces, with_obj.traces)


def test_run_bscan_material_field_cache_is_equivalent():
    scen = _desk_scenario([])
    scan = ScanSpec(first_position=0.2, step=0.05, n_positions=2)
    field = build_material_field(scen, frequency=SRC.center_frequency)
    a = run_bscan(scen, SMALL, SRC, scan)
    b = run_bscan(scen, SMALL, SRC, scan, material_field=field)
    assert np.array_equal(a.traces, b.traces)


def test_run_bscan_rejects_mismatched_grid():
    scen = Scenario(soil=SoilSpec(), field_seed=0, objects=[],
                    soil_width=0.5, soil_depth=0.2, cell_size=0.01)
    with pytest.raises(InvalidRange):
        run_bscan(scen, SMALL, SRC, ScanSpec(0.2, 0.05, 2))
