"""Simulated-annealing full-waveform inversion baseline.

Given one observed (mean-subtracted) B-scan and the number/shapes of the
buried objects, a single annealing chain searches the object-parameter
space — centers, sizes, orientation, permittivity — rerunning the FDTD
forward model once per proposal and accepting moves by the Metropolis
rule under a geometrically cooled temperature.

The optimizer does not get the true heterogeneous soil: by default the
forward model uses a homogeneous soil at the mean of the scenario's
binned soil materials, which is what makes this baseline realistically
hard.  Passing ``field_seed`` reconstructs a specific fractal soil field
instead (used by self-consistency tests).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import scene as _scene
from .dataset import mean_subtract
from .errors import EmptySpec, NoProgress, OutOfRange
from .fdtd import BScan, GridSpec, ScanSpec, SourceSpec, run_bscan

_FWI_PURPOSE = 301

# per-shape parameter vector layout (names map to ObjectSpec fields)
_CIRCLE_FAMILY_PARAMS = ("center_x", "center_y", "radius", "orientation_deg",
                         "eps_r")
_RECTANGLE_PARAMS = ("center_x", "center_y", "length", "width",
                     "orientation_deg", "eps_r")


def shape_parameters(shape: str) -> tuple[str, ...]:
    """Ordered free parameters of one object of the given shape."""
    if shape == "rectangle":
        return _RECTANGLE_PARAMS
    if shape in ("circle", "semicircle", "triangle"):
        return _CIRCLE_FAMILY_PARAMS
    raise OutOfRange(f"cannot invert objects of shape {shape!r}")


def _parameter_bounds(shape: str,
                      ranges: _scene.ObjectRanges) -> list[tuple[float, float]]:
    if shape == "rectangle":
        return [ranges.rect_center_x, ranges.rect_center_y,
                ranges.rect_length, ranges.rect_width,
                ranges.orientation_deg, ranges.eps_r]
    return [ranges.center_x, ranges.center_y, ranges.size,
            ranges.orientation_deg, ranges.eps_r]


@dataclass
class FwiState:
    """A point in object-parameter space: shapes plus one flat vector."""

    shapes: tuple[str, ...]
    vector: np.ndarray
    lows: np.ndarray
    highs: np.ndarray

    def objects(self) -> list[_scene.ObjectSpec]:
        out = []
        k = 0
        for shape in self.shapes:
            names = shape_parameters(shape)
            vals = dict(zip(names, self.vector[k:k + len(names)]))
            k += len(names)
            if shape == "rectangle":
                out.append(_scene.ObjectSpec(
                    shape=shape, center_x=vals["center_x"],
                    center_y=vals["center_y"], eps_r=vals["eps_r"],
                    length=vals["length"], width=vals["width"],
                    orientation_deg=vals["orientation_deg"]))
            else:
                out.append(_scene.ObjectSpec(
                    shape=shape, center_x=vals["center_x"],
                    center_y=vals["center_y"], eps_r=vals["eps_r"],
                    radius=vals["radius"],
                    orientation_deg=vals["orientation_deg"]))
        return out


def make_state(objects: list[_scene.ObjectSpec],
               ranges: _scene.ObjectRanges) -> FwiState:
    """Pack concrete objects into a state, validating against the bounds."""
    if not objects:
        raise EmptySpec("FWI needs at least one object")
    shapes = tuple(o.shape for o in objects)
    vec, lows, highs = [], [], []
    for o in objects:
        names = shape_parameters(o.shape)
        bounds = _parameter_bounds(o.shape, ranges)
        for name, (lo, hi) in zip(names, bounds):
            v = float(getattr(o, name))
            if not (lo <= v <= hi):
                raise OutOfRange(
                    f"object parameter {name}={v} outside bounds "
                    f"[{lo}, {hi}]")
            vec.append(v)
            lows.append(lo)
            highs.append(hi)
    return FwiState(shapes=shapes, vector=np.array(vec),
                    lows=np.array(lows), highs=np.array(highs))


def random_state(shapes: tuple[str, ...], ranges: _scene.ObjectRanges,
                 rng: np.random.Generator) -> FwiState:
    """Uniform draw of every parameter within its bounds."""
    if not shapes:
        raise EmptySpec("FWI needs at least one object")
    vec, lows, highs = [], [], []
    for shape in shapes:
        for lo, hi in _parameter_bounds(shape, ranges):
            vec.append(float(rng.uniform(lo, hi)))
            lows.append(lo)
            highs.append(hi)
    return FwiState(shapes=tuple(shapes), vector=np.array(vec),
                    lows=np.array(lows), highs=np.array(highs))


# ---------------------------------------------------------------------------
# Forward model and objective
# ---------------------------------------------------------------------------

def mean_soil_material(soil: _scene.SoilSpec,
                       frequency: float = 1e9) -> _scene.Material:
    """Arithmetic mean of the soil's binned dielectric materials."""
    mats = _scene.soil_materials(soil, frequency)
    return _scene.Material(
        eps_r=float(np.mean([m.eps_r for m in mats])),
        sigma=float(np.mean([m.sigma for m in mats])))


@dataclass
class FwiSimConfig:
    """Forward-model configuration for the inversion.

    With ``field_seed`` None the soil is homogeneous at the mean binned
    material (the optimizer is not given the true heterogeneity);
    otherwise the specified fractal field is reconstructed exactly.
    """

    soil: _scene.SoilSpec = field(default_factory=_scene.SoilSpec)
    ranges: _scene.ObjectRanges = field(default_factory=_scene.ObjectRanges)
    grid: GridSpec = field(default_factory=GridSpec)
    source: SourceSpec = field(default_factory=SourceSpec)
    scan: ScanSpec = field(default_factory=ScanSpec)
    field_seed: int | None = None

    def material_field(self) -> _scene.MaterialField:
        scenario = self.scenario([])
        if self.field_seed is None:
            rows, cols = scenario.grid_shape()
            return _scene.MaterialField(
                bin_index=np.zeros((rows, cols), dtype=np.int16),
                materials=[mean_soil_material(
                    self.soil, self.source.center_frequency)])
        return _scene.build_material_field(
            scenario, frequency=self.source.center_frequency)

    def scenario(self, objects: list[_scene.ObjectSpec]) -> _scene.Scenario:
        return _scene.Scenario(
            soil=self.soil, field_seed=self.field_seed or 0, objects=objects,
            soil_width=self.grid.soil_width, soil_depth=self.grid.soil_depth,
            cell_size=self.grid.cell_size)


def objective(observed: BScan, state: FwiState, sim: FwiSimConfig,
              material_field: _scene.MaterialField | None = None) -> float:
    """Mean squared misfit between the observed B-scan and the state's.

    ``observed`` must already be mean-subtracted; the synthetic B-scan is
    mean-subtracted here so both sides get identical preprocessing.
    """
    if material_field is None:
        material_field = sim.material_field()
    synthetic = run_bscan(sim.scenario(state.objects()), sim.grid, sim.source,
                          sim.scan, material_field=material_field)
    diff = mean_subtract(synthetic).traces - observed.traces
    return float(np.mean(diff * diff))


# ---------------------------------------------------------------------------
# Annealing
# ---------------------------------------------------------------------------

@dataclass
class AnnealSchedule:
    """Cooling and termination knobs for one annealing chain.

    ``t0`` None sets the initial temperature to 0.1 x the starting
    objective.  Proposal step sizes default to ``proposal_fraction`` of
    each parameter's bound width; an explicit ``proposal_scales`` array
    overrides them (not allowed with ``search_shapes``, where the
    parameter count can change mid-run).

    Step sizes shrink with the temperature schedule (adaptive
    neighbourhood): at cooling step k every scale is multiplied by
    ``max(proposal_decay ** k, proposal_floor)``, so early iterations
    explore the whole box while late ones refine the best basin.  The
    default ``proposal_decay`` 1.0 keeps steps constant.
    """

    t0: float | None = None
    gamma: float = 0.95
    proposal_fraction: float = 0.05
    proposal_scales: np.ndarray | None = None
    proposal_decay: float = 1.0
    proposal_floor: float = 0.05
    max_iters: int = 200
    stall_limit: int = 50
    target_objective: float = 1e-12
    search_shapes: bool = False
    shape_proposal_prob: float = 0.1

    def __post_init__(self):
        if self.t0 is not None and not self.t0 > 0:
            raise OutOfRange("t0 must be positive (or None for automatic)")
        if not (0.0 < self.gamma < 1.0):
            raise OutOfRange("gamma must lie in (0, 1)")
        if self.proposal_fraction <= 0:
            raise OutOfRange("proposal_fraction must be positive")
        if not (0.0 < self.proposal_decay <= 1.0):
            raise OutOfRange("proposal_decay must lie in (0, 1]")
        if not (0.0 < self.proposal_floor <= 1.0):
            raise OutOfRange("proposal_floor must lie in (0, 1]")
        if self.max_iters < 1 or self.stall_limit < 1:
            raise OutOfRange("max_iters and stall_limit must be >= 1")
        if self.target_objective < 0:
            raise OutOfRange("target_objective must be >= 0")

    def step_scale(self, k: int) -> float:
        """Proposal-scale multiplier at cooling step ``k``."""
        if k < 0:
            raise OutOfRange("cooling step k must be >= 0")
        return max(self.proposal_decay ** k, self.proposal_floor)


def anneal_accept(delta: float, temperature: float, u: float) -> bool:
    """Metropolis rule: downhill always, uphill with probability e^(-d/T)."""
    if temperature <= 0:
        raise OutOfRange("temperature must be positive")
    if not (0.0 <= u < 1.0):
        raise OutOfRange("u must lie in [0, 1)")
    if delta <= 0:
        return True
    return u < math.exp(-delta / temperature)


@dataclass
class TraceRow:
    iteration: int
    objective: float
    temperature: float
    accepted: bool


@dataclass
class FwiResult:
    best_state: FwiState
    best_objective: float
    n_iterations: int
    trace: list[TraceRow]
    perm_map: _scene.PermittivityMap


TRACE_CSV_HEADER = "iteration,objective,temperature,accepted"


def write_trace_csv(result: FwiResult, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(TRACE_CSV_HEADER + "\n")
        for row in result.trace:
            f.write(f"{row.iteration},{row.objective!r},"
                    f"{row.temperature!r},{int(row.accepted)}\n")


def _propose(state: FwiState, scales: np.ndarray | None,
             schedule: AnnealSchedule, ranges: _scene.ObjectRanges,
             rng: np.random.Generator, k: int = 0) -> FwiState:
    if (schedule.search_shapes
            and rng.uniform() < schedule.shape_proposal_prob):
        # resample the shape of one object uniformly; its parameters are
        # redrawn within the new shape's bounds, the other objects keep theirs
        which = int(rng.integers(len(state.shapes)))
        shapes = list(state.shapes)
        shapes[which] = str(rng.choice(list(ranges.shapes)))
        kept = []
        k = 0
        for i, old_shape in enumerate(state.shapes):
            n = len(shape_parameters(old_shape))
            if i != which:
                kept.append(state.vector[k:k + n])
            k += n
        new_state = random_state(tuple(shapes), ranges, rng)
        vec = new_state.vector.copy()
        k = 0
        j = 0
        for i, shape in enumerate(shapes):
            n = len(shape_parameters(shape))
            if i != which:
                vec[k:k + n] = kept[j]
                j += 1
            k += n
        return replace(new_state, vector=vec)
    if scales is None:
        scales = schedule.proposal_fraction * (state.highs - state.lows)
    step = scales * schedule.step_scale(k)
    vec = state.vector + rng.normal(size=state.vector.shape) * step
    vec = np.clip(vec, state.lows, state.highs)
    return replace(state, vector=vec)


def fwi_invert(observed: BScan, n_objects: int, shapes: tuple[str, ...],
               schedule: AnnealSchedule, sim: FwiSimConfig, seed: int = 0,
               initial: FwiState | None = None, progress=None) -> FwiResult:
    """Run one annealing chain against an observed mean-subtracted B-scan.

    ``shapes`` gives the shape code of each of the ``n_objects`` sought
    objects.  The chain starts from ``initial`` when given, otherwise
    from a uniform random draw within the bounds.  One iteration is one
    forward FDTD simulation; the initial evaluation counts as iteration
    1.  The chain stops at ``target_objective``, after ``stall_limit``
    iterations without improving the best objective, or at
    ``max_iters``.  Emits a ``NoProgress`` warning if the best objective
    never improved on the start.
    """
    if n_objects not in (1, 2):
        raise OutOfRange(f"n_objects must be 1 or 2, got {n_objects}")
    if len(shapes) != n_objects:
        raise OutOfRange(
            f"got {len(shapes)} shape codes for {n_objects} objects")
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((seed, _FWI_PURPOSE))))
    if initial is None:
        initial = random_state(tuple(shapes), sim.ranges, rng)
    elif initial.shapes != tuple(shapes):
        raise OutOfRange(
            f"initial state shapes {initial.shapes} do not match {shapes}")
    material_field = sim.material_field()

    scales = None
    if schedule.proposal_scales is not None:
        if schedule.search_shapes:
            raise OutOfRange(
                "explicit proposal_scales cannot be combined with "
                "search_shapes: the parameter count may change mid-run")
        scales = np.asarray(schedule.proposal_scales, dtype=float)
        if scales.shape != initial.vector.shape:
            raise OutOfRange(
                f"proposal_scales has shape {scales.shape}, state has "
                f"{initial.vector.shape}")

    current = initial
    current_obj = objective(observed, current, sim, material_field)
    t0 = schedule.t0 if schedule.t0 is not None else 0.1 * max(
        current_obj, 1e-300)
    best = current
    best_obj = current_obj
    n_it = 1
    trace = [TraceRow(1, current_obj, t0, True)]
    improved = False
    since_best = 0
    k = 0
    while (n_it < schedule.max_iters and best_obj > schedule.target_objective
           and since_best < schedule.stall_limit):
        temperature = t0 * schedule.gamma ** k
        prop = _propose(current, scales, schedule, sim.ranges, rng, k)
        k += 1
        prop_obj = objective(observed, prop, sim, material_field)
        n_it += 1
        accepted = anneal_accept(prop_obj - current_obj, temperature,
                                 float(rng.uniform()))
        if accepted:
            current, current_obj = prop, prop_obj
        if prop_obj < best_obj:
            best, best_obj = prop, prop_obj
            improved = True
            since_best = 0
        else:
            since_best += 1
        trace.append(TraceRow(n_it, prop_obj, temperature, accepted))
        if progress is not None:
            progress(n_it, best_obj)
    if not improved and n_it > 1:
        warnings.warn("annealing never improved on its starting objective",
                      NoProgress)
    perm = _scene.rasterize_scene(sim.scenario(best.objects()))
    return FwiResult(best_state=best, best_objective=best_obj,
                     n_iterations=n_it, trace=trace, perm_map=perm)
