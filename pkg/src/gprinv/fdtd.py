"""2D TMz finite-difference time-domain solver with CPML boundaries.

The solver advances (Ez, Hx, Hy) on a Yee grid over a rectangular domain:
a soil block with an air layer above it, wrapped on all four sides by a
convolutional perfectly-matched layer (CPML) backed by a PEC wall.  The
transmitter is a soft line-current source with a Gaussian pulse; receivers
record Ez.

Internally fields are indexed ``[i, j]`` with ``i`` along x (scan
direction) and ``j`` along y (up).  The public interface speaks the scene
convention instead: material grids ``[row, col]`` with row 0 at the top of
the air layer, and positions ``(x, y)`` in metres with ``y`` measured from
the bottom of the soil block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import Instability, InvalidRange, OutOfRange

C0 = 299792458.0                 # speed of light, m/s
MU0 = 4.0e-7 * math.pi           # vacuum permeability
EPS0 = 1.0 / (MU0 * C0 * C0)     # vacuum permittivity
ETA0 = math.sqrt(MU0 / EPS0)     # vacuum impedance

# CPML grading (polynomial order, stretching and shift ceilings).
CPML_ORDER = 4
CPML_KAPPA_MAX = 8.0
CPML_ALPHA_MAX = 0.05

# Field blow-up threshold relative to the peak source-cell field.
INSTABILITY_FACTOR = 1.0e6
INSTABILITY_CHECK_EVERY = 64


def courant_dt(cell_size: float, safety: float = 0.99) -> float:
    """Largest stable time step for a square 2D grid, scaled by ``safety``."""
    if cell_size <= 0.0:
        raise OutOfRange("cell_size must be positive")
    if not (0.0 < safety <= 1.0):
        raise OutOfRange("safety must lie in (0, 1]")
    return safety * cell_size / (C0 * math.sqrt(2.0))


def gaussian_waveform(t, amplitude: float = 1.0,
                      center_frequency: float = 1.0e9):
    """Gaussian pulse ``A * exp(-zeta (t - chi)^2)``.

    ``zeta = 2 pi^2 fc^2`` and ``chi = 1/fc`` place the peak at ``t = chi``
    with a spectrum centred near ``fc`` and a practically-zero turn-on value
    (``exp(-2 pi^2) ~ 2.7e-9`` of the peak at ``t = 0``).
    """
    if center_frequency <= 0.0:
        raise OutOfRange("center_frequency must be positive")
    zeta = 2.0 * math.pi ** 2 * center_frequency ** 2
    chi = 1.0 / center_frequency
    t = np.asarray(t, dtype=np.float64)
    return amplitude * np.exp(-zeta * (t - chi) ** 2)


# ---------------------------------------------------------------------------
# Specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Discretization of the simulation domain.

    ``soil_width`` x ``soil_depth`` metres of soil with ``air_height``
    metres of air above, all at square cells of ``cell_size`` metres,
    padded by ``pml_cells`` of CPML on every side.  ``dt`` defaults to the
    Courant limit scaled by ``courant_safety``; recorded traces are
    resampled to ``trace_samples`` points spanning ``time_window``.
    """

    cell_size: float = 0.0025
    soil_width: float = 1.5
    soil_depth: float = 0.5
    air_height: float = 0.25
    pml_cells: int = 10
    time_window: float = 20.0e-9
    trace_samples: int = 512
    courant_safety: float = 0.99
    dt: float | None = None

    def __post_init__(self):
        if min(self.cell_size, self.soil_width, self.soil_depth,
               self.air_height, self.time_window) <= 0.0:
            raise OutOfRange("grid dimensions and time window must be positive")
        if self.pml_cells < 4:
            raise OutOfRange("pml_cells must be at least 4")
        if self.trace_samples < 2:
            raise OutOfRange("trace_samples must be at least 2")
        if self.dt is not None and self.dt <= 0.0:
            raise OutOfRange("dt must be positive when given")

    @property
    def time_step(self) -> float:
        return self.dt if self.dt is not None else courant_dt(
            self.cell_size, self.courant_safety)

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.time_window / self.time_step)))

    def interior_shape(self) -> tuple[int, int]:
        """(rows, cols) of the interior material grid (air + soil)."""
        rows = (self.soil_depth + self.air_height) / self.cell_size
        cols = self.soil_width / self.cell_size
        if (abs(rows - round(rows)) > 1e-6 * max(1.0, rows)
                or abs(cols - round(cols)) > 1e-6 * max(1.0, cols)):
            raise InvalidRange("domain size is not an integer number of cells")
        return int(round(rows)), int(round(cols))


@dataclass(frozen=True)
class SourceSpec:
    """Transmit/receive geometry and excitation.

    Offsets are relative to the nominal scan position; ``elevation`` is the
    antenna height above the soil surface.  The source is a line current of
    ``amplitude`` amperes with a Gaussian pulse at ``center_frequency``.
    """

    amplitude: float = 1.0
    center_frequency: float = 1.0e9
    tx_offset_x: float = -0.10
    rx_offset_x: float = 0.10
    elevation: float = 0.10

    def __post_init__(self):
        if self.center_frequency <= 0.0:
            raise OutOfRange("center_frequency must be positive")
        if self.elevation < 0.0:
            raise OutOfRange("elevation must be >= 0")


@dataclass(frozen=True)
class ScanSpec:
    """B-scan acquisition: antenna pair stepped along the surface."""

    first_position: float = 0.25
    step: float = 0.025
    n_positions: int = 41

    def __post_init__(self):
        if self.step <= 0.0:
            raise OutOfRange("scan step must be positive")
        if self.n_positions < 1:
            raise OutOfRange("n_positions must be >= 1")

    def positions(self) -> np.ndarray:
        return self.first_position + self.step * np.arange(self.n_positions)


@dataclass
class AScan:
    """One recorded trace, resampled to a fixed number of points."""

    trace: np.ndarray
    dt: float


@dataclass
class BScan:
    """Traces for all scan positions: ``traces[sample, position]``."""

    traces: np.ndarray
    scan_step: float
    first_position: float


# ---------------------------------------------------------------------------
# CPML profiles
# ---------------------------------------------------------------------------

def _cpml_profile(positions: np.ndarray, n_total: int, npml: int,
                  cell: float, dt: float):
    """CPML (b, c, 1/kappa) at the given node positions along one axis.

    ``positions`` are in cell units; 0 is the low PEC wall and
    ``n_total - 1`` the high wall.  Conductivity, stretching, and shift are
    polynomially graded from the PML/interior interface (depth 0) to the
    walls (depth ``npml``): ``sigma = sigma_max * rho**m``,
    ``kappa = 1 + (kappa_max - 1) * rho**m``, ``alpha = alpha_max * (1 - rho)``.
    """
    sigma_max = 0.8 * (CPML_ORDER + 1) / (ETA0 * cell)
    depth_low = npml - positions
    depth_high = positions - (n_total - 1 - npml)
    rho = np.maximum(depth_low, depth_high) / npml
    rho = np.clip(rho, 0.0, 1.0)

    sigma = sigma_max * rho ** CPML_ORDER
    kappa = 1.0 + (CPML_KAPPA_MAX - 1.0) * rho ** CPML_ORDER
    alpha = np.where(rho > 0.0, CPML_ALPHA_MAX * (1.0 - rho), 0.0)

    b = np.exp(-(sigma / kappa + alpha) * dt / EPS0)
    denom = kappa * (sigma + kappa * alpha)
    c = np.where(denom > 0.0, sigma * (b - 1.0) / np.where(denom > 0, denom, 1.0), 0.0)
    return b, c, 1.0 / kappa


# ---------------------------------------------------------------------------
# Core stepping engine
# ---------------------------------------------------------------------------

class _Simulation:
    """Preassembled coefficient arrays for one material layout."""

    def __init__(self, eps_r: np.ndarray, sigma: np.ndarray, grid: GridSpec):
        eps_r = np.asarray(eps_r, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        rows, cols = grid.interior_shape()
        if eps_r.shape != (rows, cols) or sigma.shape != (rows, cols):
            raise InvalidRange(
                f"material grids {eps_r.shape} do not match the interior "
                f"{(rows, cols)} implied by the grid spec")
        if not (np.isfinite(eps_r).all() and np.isfinite(sigma).all()):
            raise OutOfRange("material grids must be finite")
        if eps_r.min() < 1.0:
            raise OutOfRange(f"eps_r must be >= 1 everywhere, min {eps_r.min()}")
        if sigma.min() < 0.0:
            raise OutOfRange("sigma must be >= 0 everywhere")

        self.grid = grid
        npml = grid.pml_cells
        self.npml = npml
        # scene rows run top-down; the solver's j axis runs bottom-up
        interior_eps = eps_r.T[:, ::-1]
        interior_sig = sigma.T[:, ::-1]
        # PML cells continue the adjacent interior material
        pad = ((npml, npml), (npml, npml))
        full_eps = np.pad(interior_eps, pad, mode="edge") * EPS0
        full_sig = np.pad(interior_sig, pad, mode="edge")

        dt = grid.time_step
        self.dt = dt
        cell = grid.cell_size
        self.nx, self.ny = full_eps.shape
        loss = full_sig * dt / (2.0 * full_eps)
        self.ca = (1.0 - loss) / (1.0 + loss)
        self.cb = (dt / full_eps) / (1.0 + loss) / cell
        # source scaling: line current I -> current density I / cell^2;
        # the update multiplies by cb which already includes 1/cell
        self.src_factor = 1.0 / cell

        ei = np.arange(1, self.nx - 1, dtype=np.float64)
        ej = np.arange(1, self.ny - 1, dtype=np.float64)
        hi = np.arange(self.nx - 1, dtype=np.float64) + 0.5
        hj = np.arange(self.ny - 1, dtype=np.float64) + 0.5
        self.bex, self.cex, self.ikex = _cpml_profile(ei, self.nx, npml, cell, dt)
        self.bey, self.cey, self.ikey = _cpml_profile(ej, self.ny, npml, cell, dt)
        self.bhx, self.chx, self.ikhx = _cpml_profile(hi, self.nx, npml, cell, dt)
        self.bhy, self.chy, self.ikhy = _cpml_profile(hj, self.ny, npml, cell, dt)

    def node(self, x: float, y: float) -> tuple[int, int]:
        """Map interior physical coordinates to a full-grid Ez node."""
        grid = self.grid
        rows, cols = grid.interior_shape()
        i = int(round(x / grid.cell_size - 0.5))
        j = int(round(y / grid.cell_size - 0.5))
        if not (0 <= i < cols and 0 <= j < rows):
            raise OutOfRange(
                f"position ({x}, {y}) m lies outside the interior domain "
                f"{grid.soil_width} x {grid.soil_depth + grid.air_height} m")
        return i + self.npml, j + self.npml

    def run(self, tx_xy: tuple[float, float],
            probes: list[tuple[float, float]],
            source: SourceSpec) -> np.ndarray:
        """Step the fields and return raw Ez recordings [n_steps, n_probes]."""
        nx, ny = self.nx, self.ny
        dt, cell = self.dt, self.grid.cell_size
        n_steps = self.grid.n_steps
        ti, tj = self.node(*tx_xy)
        probe_ij = [self.node(*p) for p in probes]

        ez = np.zeros((nx, ny))
        hx = np.zeros((nx, ny - 1))
        hy = np.zeros((nx - 1, ny))
        psi_exl = np.zeros((self.npml, ny - 2))
        psi_exr = np.zeros((self.npml, ny - 2))
        psi_eyb = np.zeros((nx - 2, self.npml))
        psi_eyt = np.zeros((nx - 2, self.npml))
        psi_hxl = np.zeros((self.npml, ny))
        psi_hxr = np.zeros((self.npml, ny))
        psi_hyb = np.zeros((nx, self.npml))
        psi_hyt = np.zeros((nx, self.npml))

        npml = self.npml
        dtm = dt / (MU0 * cell)
        ca_i = self.ca[1:-1, 1:-1]
        cb_i = self.cb[1:-1, 1:-1]
        cb_src = self.cb[ti, tj] * self.src_factor
        ikex = self.ikex[:, None]
        ikey = self.ikey[None, :]
        ikhx = self.ikhx[:, None]
        ikhy = self.ikhy[None, :]

        # waveform sampled at E-update times (mid-step current)
        t_src = (np.arange(n_steps) + 0.5) * dt
        wave = gaussian_waveform(t_src, source.amplitude, source.center_frequency)
        source_active = t_src <= 2.0 / source.center_frequency

        out = np.zeros((n_steps, len(probe_ij)))
        src_peak = 0.0

        for n in range(n_steps):
            # H update from curl of Ez
            dez_dy = ez[:, 1:] - ez[:, :-1]
            psi_hyb *= self.bhy[None, :npml]
            psi_hyb += self.chy[None, :npml] * dez_dy[:, :npml]
            psi_hyt *= self.bhy[None, -npml:]
            psi_hyt += self.chy[None, -npml:] * dez_dy[:, -npml:]
            hx -= dtm * (dez_dy * ikhy)
            hx[:, :npml] -= dtm * psi_hyb
            hx[:, -npml:] -= dtm * psi_hyt

            dez_dx = ez[1:, :] - ez[:-1, :]
            psi_hxl *= self.bhx[:npml, None]
            psi_hxl += self.chx[:npml, None] * dez_dx[:npml, :]
            psi_hxr *= self.bhx[-npml:, None]
            psi_hxr += self.chx[-npml:, None] * dez_dx[-npml:, :]
            hy += dtm * (dez_dx * ikhx)
            hy[:npml, :] += dtm * psi_hxl
            hy[-npml:, :] += dtm * psi_hxr

            # E update from curl of H plus the soft source
            dhy_dx = hy[1:, 1:-1] - hy[:-1, 1:-1]
            dhx_dy = hx[1:-1, 1:] - hx[1:-1, :-1]
            psi_exl *= self.bex[:npml, None]
            psi_exl += self.cex[:npml, None] * dhy_dx[:npml, :]
            psi_exr *= self.bex[-npml:, None]
            psi_exr += self.cex[-npml:, None] * dhy_dx[-npml:, :]
            psi_eyb *= self.bey[None, :npml]
            psi_eyb += self.cey[None, :npml] * dhx_dy[:, :npml]
            psi_eyt *= self.bey[None, -npml:]
            psi_eyt += self.cey[None, -npml:] * dhx_dy[:, -npml:]

            curl = dhy_dx * ikex
            curl -= dhx_dy * ikey
            curl[:npml, :] += psi_exl
            curl[-npml:, :] += psi_exr
            curl[:, :npml] -= psi_eyb
            curl[:, -npml:] -= psi_eyt

            ez[1:-1, 1:-1] = ca_i * ez[1:-1, 1:-1] + cb_i * curl
            ez[ti, tj] -= cb_src * wave[n]

            for k, (pi, pj) in enumerate(probe_ij):
                out[n, k] = ez[pi, pj]

            if source_active[n]:
                src_peak = max(src_peak, abs(ez[ti, tj]))
            if (n + 1) % INSTABILITY_CHECK_EVERY == 0 or n == n_steps - 1:
                peak = abs(ez).max()
                limit = INSTABILITY_FACTOR * max(src_peak, 1e-300)
                if not math.isfinite(peak) or peak > limit:
                    raise Instability(
                        f"field blow-up at step {n + 1}/{n_steps}: "
                        f"max |Ez| = {peak:.3e} vs source peak {src_peak:.3e}")
        return out


def _resample(raw: np.ndarray, dt: float, grid: GridSpec) -> np.ndarray:
    """Linearly resample raw per-step recordings onto the output time axis."""
    n_steps = raw.shape[0]
    t_native = (np.arange(n_steps) + 1.0) * dt
    t_out = np.linspace(0.0, grid.time_window, grid.trace_samples)
    if raw.ndim == 1:
        return np.interp(t_out, t_native, raw, left=0.0)
    return np.stack([np.interp(t_out, t_native, raw[:, k], left=0.0)
                     for k in range(raw.shape[1])], axis=1)


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------

def run_probes(eps_r: np.ndarray, sigma: np.ndarray, grid: GridSpec,
               source: SourceSpec, tx_xy: tuple[float, float],
               probes: list[tuple[float, float]]) -> np.ndarray:
    """Single-shot simulation with multiple Ez probes.

    Material grids follow the scene convention ([row, col], row 0 at the
    top of the air layer).  Returns resampled traces
    ``[grid.trace_samples, len(probes)]``.
    """
    sim = _Simulation(eps_r, sigma, grid)
    raw = sim.run(tx_xy, list(probes), source)
    return _resample(raw, sim.dt, grid)


def run_ascan(eps_r: np.ndarray, sigma: np.ndarray, grid: GridSpec,
              source: SourceSpec, tx_xy: tuple[float, float],
              rx_xy: tuple[float, float]) -> AScan:
    """Simulate one trace for an explicit transmitter/receiver pair."""
    traces = run_probes(eps_r, sigma, grid, source, tx_xy, [rx_xy])
    return AScan(trace=traces[:, 0], dt=grid.time_window / (grid.trace_samples - 1))


def run_bscan(scenario, grid: GridSpec, source: SourceSpec, scan: ScanSpec,
              material_field=None, progress=None) -> BScan:
    """Simulate a full B-scan of a scene.

    The scenario's soil block must match the grid spec's soil dimensions.
    ``material_field`` may be passed to reuse a cached fractal soil (it is
    rebuilt from the scenario otherwise).  ``progress`` is an optional
    ``callable(position_index, n_positions)`` invoked after each trace.
    """
    from . import scene as _scene

    if (abs(scenario.soil_width - grid.soil_width) > 1e-9
            or abs(scenario.soil_depth - grid.soil_depth) > 1e-9
            or abs(scenario.cell_size - grid.cell_size) > 1e-12):
        raise InvalidRange("scenario and grid spec disagree on the soil block")
    air_rows = grid.interior_shape()[0] - scenario.grid_shape()[0]
    if material_field is None:
        material_field = _scene.build_material_field(
            scenario, frequency=source.center_frequency)
    eps, sig = _scene.embed_objects(scenario, material_field, air_rows=air_rows)

    sim = _Simulation(eps, sig, grid)
    y_ant = grid.soil_depth + source.elevation
    positions = scan.positions()
    traces = np.zeros((grid.trace_samples, len(positions)))
    for k, p in enumerate(positions):
        raw = sim.run((p + source.tx_offset_x, y_ant),
                      [(p + source.rx_offset_x, y_ant)], source)
        traces[:, k] = _resample(raw[:, 0], sim.dt, grid)
        if progress is not None:
            progress(k, len(positions))
    return BScan(traces=traces, scan_step=scan.step,
                 first_position=scan.first_position)
