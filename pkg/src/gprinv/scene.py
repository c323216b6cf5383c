"""Subsurface scene construction.

A scene is a rectangular block of heterogeneous soil with zero or more
buried dielectric objects.  Soil heterogeneity is modelled as a fractal
(power-law spectrum) volumetric-water-fraction field quantized into a fixed
number of discrete materials; each material's permittivity and conductivity
come from the Peplinski semi-empirical dielectric mixing model for
sand/clay soils in the 0.3-1.3 GHz band.

Grid convention: scene arrays are indexed ``[row, col]`` with row 0 at the
soil surface and column 0 at ``x = 0``.  Cell ``(r, c)`` is centred at
``x = (c + 0.5) * cell_size`` and height ``y = soil_depth - (r + 0.5) *
cell_size`` above the bottom of the soil block.  Object positions use the
same physical frame: ``center_y`` is height above the soil bottom.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySpec, InvalidRange, ObjectOutOfBounds, OutOfRange

# Debye parameters of free water at room temperature.
WATER_EPS_STATIC = 80.1
WATER_EPS_INF = 4.9
WATER_RELAXATION_TIME = 9.23e-12  # seconds

# Shape exponent of the semi-empirical mixing rule.
MIXING_ALPHA = 0.65

# Validity band of the soil dielectric model.
PEPLINSKI_FREQ_MIN = 0.3e9
PEPLINSKI_FREQ_MAX = 1.3e9

OBJECT_SHAPES = ("circle", "semicircle", "triangle", "rectangle", "mask")


# ---------------------------------------------------------------------------
# Soil materials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SoilSpec:
    """Bulk description of a sand/clay soil and its moisture variability.

    Parameters
    ----------
    sand_fraction, clay_fraction:
        Mass fractions of the mineral phase, each in [0, 1] with a sum
        of at most 1.
    bulk_density, particle_density:
        Densities in g/cm^3; particle density must exceed bulk density.
    water_fraction_min, water_fraction_max:
        Bounds of the volumetric water fraction spanned by the soil.
    n_materials:
        Number of discrete moisture levels (quantization bins).
    fractal_dimension:
        Roughness of the moisture field; spectral exponent is
        ``8 - 2 * fractal_dimension``.
    """

    sand_fraction: float = 0.5
    clay_fraction: float = 0.5
    bulk_density: float = 2.0
    particle_density: float = 2.66
    water_fraction_min: float = 0.001
    water_fraction_max: float = 0.20
    n_materials: int = 20
    fractal_dimension: float = 1.5

    def __post_init__(self):
        if not (0.0 <= self.sand_fraction <= 1.0 and 0.0 <= self.clay_fraction <= 1.0):
            raise OutOfRange("sand/clay fractions must lie in [0, 1]")
        if self.sand_fraction + self.clay_fraction > 1.0 + 1e-12:
            raise OutOfRange("sand + clay fractions exceed 1")
        if not (0.0 < self.bulk_density < self.particle_density):
            raise OutOfRange("need 0 < bulk_density < particle_density")
        if not (0.0 < self.water_fraction_min < self.water_fraction_max):
            raise InvalidRange("need 0 < water_fraction_min < water_fraction_max")
        if self.water_fraction_max > 1.0:
            raise OutOfRange("water_fraction_max exceeds 1")
        if self.n_materials < 1:
            raise OutOfRange("n_materials must be >= 1")
        if not (0.0 < self.fractal_dimension < 4.0):
            raise OutOfRange("fractal_dimension out of range (0, 4)")


@dataclass(frozen=True)
class Material:
    """A non-dispersive dielectric: relative permittivity and conductivity."""

    eps_r: float
    sigma: float = 0.0

    def __post_init__(self):
        if not (self.eps_r >= 1.0 and math.isfinite(self.eps_r)):
            raise OutOfRange(f"eps_r must be finite and >= 1, got {self.eps_r}")
        if not (self.sigma >= 0.0 and math.isfinite(self.sigma)):
            raise OutOfRange(f"sigma must be finite and >= 0, got {self.sigma}")


def peplinski_material(soil: SoilSpec, water_fraction: float,
                       frequency: float = 1.0e9) -> Material:
    """Evaluate the Peplinski soil mixing model at one water fraction.

    Returns the instantaneous (relaxed) relative permittivity of the
    equivalent single-relaxation medium together with its static
    conductivity.  The water relaxation pole itself is deliberately not
    folded into ``eps_r``: a non-dispersive solver driven with these values
    reproduces the conventional tabulated permittivity/conductivity ranges
    for such soils.

    Parameters
    ----------
    soil:
        Bulk soil description.
    water_fraction:
        Volumetric water fraction; must lie within the soil's declared
        moisture bounds.
    frequency:
        Evaluation frequency in Hz, within the 0.3-1.3 GHz validity band.

    Raises
    ------
    OutOfRange
        If ``water_fraction`` or ``frequency`` is outside its valid band.
    """
    if not (PEPLINSKI_FREQ_MIN <= frequency <= PEPLINSKI_FREQ_MAX):
        raise OutOfRange(
            f"frequency {frequency:.3g} Hz outside model band "
            f"[{PEPLINSKI_FREQ_MIN:.1e}, {PEPLINSKI_FREQ_MAX:.1e}]")
    if not (soil.water_fraction_min <= water_fraction <= soil.water_fraction_max):
        raise OutOfRange(
            f"water fraction {water_fraction} outside soil bounds "
            f"[{soil.water_fraction_min}, {soil.water_fraction_max}]")

    sand, clay = soil.sand_fraction, soil.clay_fraction
    rho_b, rho_s = soil.bulk_density, soil.particle_density
    mv = water_fraction
    a = MIXING_ALPHA

    omega_tau = 2.0 * math.pi * frequency * WATER_RELAXATION_TIME
    pole = 1.0 + omega_tau * omega_tau
    eps_fw_real = WATER_EPS_INF + (WATER_EPS_STATIC - WATER_EPS_INF) / pole

    eps_solid = (1.01 + 0.44 * rho_s) ** 2 - 0.062
    beta_real = 1.2748 - 0.519 * sand - 0.152 * clay
    beta_imag = 1.33797 - 0.603 * sand - 0.166 * clay

    bracket = (1.0
               + (rho_b / rho_s) * (eps_solid ** a - 1.0)
               + mv ** beta_real * eps_fw_real ** a
               - mv)
    eps_real = 1.15 * bracket ** (1.0 / a) - 0.68

    # Split off the water relaxation: the pole's strength mixed into the
    # soil, and the remaining instantaneous permittivity.
    delta_eps = mv ** (beta_imag / a) * (WATER_EPS_STATIC - WATER_EPS_INF)
    eps_inf_soil = eps_real - delta_eps / pole

    # Static (ionic) conductivity term of the mixture.
    sigma_eff = 0.0467 + 0.2204 * rho_b - 0.4111 * sand + 0.6614 * clay
    sigma = sigma_eff * (rho_s - rho_b) / rho_s * mv ** (beta_imag / a - 1.0)

    return Material(eps_r=eps_inf_soil, sigma=sigma)


def soil_bin_water_fractions(soil: SoilSpec) -> np.ndarray:
    """Water fraction of each discrete soil material.

    The moisture interval is divided into ``n_materials`` equal-width bins
    and each material takes the midpoint of its bin.  (Midpoints, rather
    than an inclusive end-point grid, are what keep the resulting material
    tables inside the conventional quoted ranges.)
    """
    lo, hi = soil.water_fraction_min, soil.water_fraction_max
    n = soil.n_materials
    edges = np.linspace(lo, hi, n + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def soil_materials(soil: SoilSpec, frequency: float = 1.0e9) -> list[Material]:
    """Evaluate all discrete soil materials, driest (bin 0) to wettest."""
    return [peplinski_material(soil, float(mv), frequency)
            for mv in soil_bin_water_fractions(soil)]


# ---------------------------------------------------------------------------
# Fractal moisture field
# ---------------------------------------------------------------------------

def generate_fractal_field(shape: tuple[int, int], fractal_dimension: float,
                           n_bins: int, seed: int) -> np.ndarray:
    """Generate a quantized isotropic fractal field.

    A white-noise field is shaped in the Fourier domain with an isotropic
    power-law filter (power spectral density ``k**-(8 - 2*fractal_dimension)``,
    equal weight on both axes) and then rank-quantized into ``n_bins``
    equal-population bins: bin 0 holds the lowest values.  Equal population
    guarantees every material occurs with near-uniform frequency regardless
    of the field's value distribution.

    Returns
    -------
    numpy.ndarray of int16, shape ``shape``, values in ``[0, n_bins)``.
    """
    rows, cols = int(shape[0]), int(shape[1])
    if rows < 1 or cols < 1:
        raise InvalidRange(f"field shape must be positive, got {shape}")
    if n_bins < 1:
        raise OutOfRange("n_bins must be >= 1")
    if rows * cols < n_bins:
        raise InvalidRange(
            f"grid of {rows * cols} cells cannot populate {n_bins} bins")

    beta = 8.0 - 2.0 * fractal_dimension
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    noise = rng.standard_normal((rows, cols))

    spectrum = np.fft.rfft2(noise)
    ky = np.fft.fftfreq(rows)[:, None]
    kx = np.fft.rfftfreq(cols)[None, :]
    k = np.hypot(ky, kx)
    k[0, 0] = np.inf  # zero out the DC component
    spectrum *= k ** (-beta / 2.0)
    fieldvals = np.fft.irfft2(spectrum, s=(rows, cols))

    flat = fieldvals.ravel()
    order = np.argsort(flat, kind="stable")
    ranks = np.empty(flat.size, dtype=np.int64)
    ranks[order] = np.arange(flat.size)
    bins = (ranks * n_bins) // flat.size
    return bins.reshape(rows, cols).astype(np.int16)


@dataclass
class MaterialField:
    """A quantized soil-material layout plus the material table.

    ``bin_index[r, c]`` selects ``materials[bin_index[r, c]]`` for the soil
    cell at row ``r`` (row 0 at the surface), column ``c``.
    """

    bin_index: np.ndarray
    materials: list[Material]

    def __post_init__(self):
        if self.bin_index.ndim != 2:
            raise InvalidRange("bin_index must be 2D")
        if len(self.materials) == 0:
            raise EmptySpec("material table is empty")
        if self.bin_index.min() < 0 or self.bin_index.max() >= len(self.materials):
            raise OutOfRange("bin_index references a missing material")


# ---------------------------------------------------------------------------
# Buried objects
# ---------------------------------------------------------------------------

@dataclass
class ObjectSpec:
    """Geometry and dielectric constant of one buried object.

    ``shape`` selects which size fields apply:

    - ``circle``: ``radius``
    - ``semicircle``: ``radius`` (half-disk; the flat side passes through
      the centre, the arc bulges toward local +y before rotation)
    - ``triangle``: ``radius`` (equilateral, circumscribed-circle radius;
      one vertex points toward local +y before rotation)
    - ``rectangle``: ``length`` (local x extent) and ``width`` (local y)
    - ``mask``: ``mask`` (2D boolean array, row 0 on top) with square
      pixels of ``mask_cell`` metres, centred on the object centre

    ``orientation_deg`` rotates the shape counter-clockwise about its
    centre.  ``center_y`` is height above the soil bottom in metres.
    """

    shape: str
    center_x: float
    center_y: float
    eps_r: float
    radius: float = 0.0
    length: float = 0.0
    width: float = 0.0
    mask: np.ndarray | None = None
    mask_cell: float = 0.0
    orientation_deg: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.shape not in OBJECT_SHAPES:
            raise OutOfRange(f"unknown shape {self.shape!r}; expected one of {OBJECT_SHAPES}")
        if not (self.eps_r >= 1.0 and math.isfinite(self.eps_r)):
            raise OutOfRange(f"object eps_r must be finite and >= 1, got {self.eps_r}")
        if self.sigma < 0.0:
            raise OutOfRange("object sigma must be >= 0")
        if self.shape in ("circle", "semicircle", "triangle"):
            if self.radius <= 0.0:
                raise OutOfRange(f"{self.shape} needs a positive radius")
        elif self.shape == "rectangle":
            if self.length <= 0.0 or self.width <= 0.0:
                raise OutOfRange("rectangle needs positive length and width")
        else:  # mask
            if self.mask is None or np.asarray(self.mask).ndim != 2:
                raise OutOfRange("mask shape needs a 2D boolean mask")
            if not np.asarray(self.mask).any():
                raise EmptySpec("mask has no set pixels")
            if self.mask_cell <= 0.0:
                raise OutOfRange("mask shape needs a positive mask_cell")


def _rotate_local(obj: ObjectSpec, x, y):
    """Map world coordinates into the object's unrotated local frame."""
    theta = math.radians(obj.orientation_deg)
    c, s = math.cos(theta), math.sin(theta)
    dx = np.asarray(x, dtype=float) - obj.center_x
    dy = np.asarray(y, dtype=float) - obj.center_y
    # Inverse of a CCW rotation by theta.
    return c * dx + s * dy, -s * dx + c * dy


def point_in_object(obj: ObjectSpec, x, y) -> np.ndarray:
    """Vectorized coverage predicate: True where (x, y) lies in the object."""
    lx, ly = _rotate_local(obj, x, y)
    if obj.shape == "circle":
        return lx * lx + ly * ly <= obj.radius ** 2
    if obj.shape == "semicircle":
        return (lx * lx + ly * ly <= obj.radius ** 2) & (ly >= 0.0)
    if obj.shape == "triangle":
        # Equilateral triangle, vertices on the circumscribed circle at
        # 90/210/330 degrees.  Interior = intersection of three half-planes.
        r = obj.radius
        verts = [(r * math.cos(a), r * math.sin(a))
                 for a in (math.pi / 2, math.pi * 7 / 6, math.pi * 11 / 6)]
        inside = np.ones(np.broadcast(lx, ly).shape, dtype=bool)
        for i in range(3):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % 3]
            # Cross product of edge vector with point offset; interior is
            # on the left of each CCW edge.
            cross = (x1 - x0) * (ly - y0) - (y1 - y0) * (lx - x0)
            inside &= cross >= 0.0
        return inside
    if obj.shape == "rectangle":
        return (np.abs(lx) <= obj.length / 2.0) & (np.abs(ly) <= obj.width / 2.0)
    # mask
    mask = np.asarray(obj.mask, dtype=bool)
    mrows, mcols = mask.shape
    u = lx / obj.mask_cell + mcols / 2.0
    v = mrows / 2.0 - ly / obj.mask_cell
    iu = np.floor(u).astype(np.int64)
    iv = np.floor(v).astype(np.int64)
    ok = (iu >= 0) & (iu < mcols) & (iv >= 0) & (iv < mrows)
    out = np.zeros(np.broadcast(lx, ly).shape, dtype=bool)
    out[ok] = mask[iv[ok], iu[ok]]
    return out


def _boundary_points(obj: ObjectSpec, n: int = 720) -> np.ndarray:
    """Sample the object's boundary (local frame) as an (m, 2) array."""
    if obj.shape == "circle":
        a = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
        return obj.radius * np.column_stack([np.cos(a), np.sin(a)])
    if obj.shape == "semicircle":
        a = np.linspace(0.0, math.pi, n // 2)
        arc = obj.radius * np.column_stack([np.cos(a), np.sin(a)])
        t = np.linspace(-obj.radius, obj.radius, n // 2)[:, None]
        diam = np.hstack([t, np.zeros_like(t)])
        return np.vstack([arc, diam])
    if obj.shape == "triangle":
        r = obj.radius
        verts = np.array([(r * math.cos(a), r * math.sin(a))
                          for a in (math.pi / 2, math.pi * 7 / 6, math.pi * 11 / 6)])
        t = np.linspace(0.0, 1.0, n // 3)[:, None]
        return np.vstack([verts[i] + t * (verts[(i + 1) % 3] - verts[i])
                          for i in range(3)])
    if obj.shape == "rectangle":
        hx, hy = obj.length / 2.0, obj.width / 2.0
        corners = np.array([(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)])
        t = np.linspace(0.0, 1.0, n // 4)[:, None]
        return np.vstack([corners[i] + t * (corners[(i + 1) % 4] - corners[i])
                          for i in range(4)])
    # mask: corners of the set-pixel bounding box (conservative hull)
    mask = np.asarray(obj.mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    mrows, mcols = mask.shape
    x0 = (cols.min() - mcols / 2.0) * obj.mask_cell
    x1 = (cols.max() + 1 - mcols / 2.0) * obj.mask_cell
    y1 = (mrows / 2.0 - rows.min()) * obj.mask_cell
    y0 = (mrows / 2.0 - (rows.max() + 1)) * obj.mask_cell
    return np.array([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


def check_object_bounds(obj: ObjectSpec, soil_width: float, soil_depth: float,
                        index: int | None = None) -> None:
    """Raise ObjectOutOfBounds if the rotated object exits the soil block."""
    pts = _boundary_points(obj)
    theta = math.radians(obj.orientation_deg)
    c, s = math.cos(theta), math.sin(theta)
    wx = obj.center_x + c * pts[:, 0] - s * pts[:, 1]
    wy = obj.center_y + s * pts[:, 0] + c * pts[:, 1]
    if (wx.min() < 0.0 or wx.max() > soil_width
            or wy.min() < 0.0 or wy.max() > soil_depth):
        label = f"object {index}" if index is not None else "object"
        raise ObjectOutOfBounds(
            f"{label} ({obj.shape}) extends outside the soil block: "
            f"x [{wx.min():.4f}, {wx.max():.4f}] of [0, {soil_width}], "
            f"y [{wy.min():.4f}, {wy.max():.4f}] of [0, {soil_depth}]")


# ---------------------------------------------------------------------------
# Object sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectRanges:
    """Uniform sampling ranges for random buried objects (metres/degrees)."""

    shapes: tuple[str, ...] = ("circle", "semicircle", "triangle", "rectangle")
    center_x: tuple[float, float] = (0.25, 1.25)
    center_y: tuple[float, float] = (0.25, 0.40)
    size: tuple[float, float] = (0.05, 0.08)
    eps_r: tuple[float, float] = (2.0, 32.0)
    rect_center_x: tuple[float, float] = (0.5, 1.0)
    rect_center_y: tuple[float, float] = (0.25, 0.30)
    rect_width: tuple[float, float] = (0.04, 0.06)
    rect_length: tuple[float, float] = (0.12, 0.16)
    orientation_deg: tuple[float, float] = (0.0, 360.0)

    def __post_init__(self):
        if len(self.shapes) == 0:
            raise EmptySpec("shapes tuple is empty")
        for name in self.shapes:
            if name not in OBJECT_SHAPES or name == "mask":
                raise OutOfRange(f"cannot sample shape {name!r}")
        for fname in ("center_x", "center_y", "size", "eps_r", "rect_center_x",
                      "rect_center_y", "rect_width", "rect_length",
                      "orientation_deg"):
            lo, hi = getattr(self, fname)
            if not (lo <= hi):
                raise InvalidRange(f"{fname} range is reversed: {lo} > {hi}")


def sample_objects(seed: int, n_objects: int,
                   ranges: ObjectRanges = ObjectRanges()) -> list[ObjectSpec]:
    """Draw random buried objects.

    The draw order per object is fixed (shape, orientation, eps_r, then the
    shape's geometry fields) so a given seed always produces the same
    objects.  Objects may overlap one another; geometry-versus-domain
    bounds are checked at rasterization time, not here.
    """
    if n_objects < 0:
        raise OutOfRange("n_objects must be >= 0")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    out: list[ObjectSpec] = []
    for _ in range(n_objects):
        shape = str(rng.choice(list(ranges.shapes)))
        orientation = float(rng.uniform(*ranges.orientation_deg))
        eps_r = float(rng.uniform(*ranges.eps_r))
        if shape == "rectangle":
            cx = float(rng.uniform(*ranges.rect_center_x))
            cy = float(rng.uniform(*ranges.rect_center_y))
            width = float(rng.uniform(*ranges.rect_width))
            length = float(rng.uniform(*ranges.rect_length))
            out.append(ObjectSpec(shape=shape, center_x=cx, center_y=cy,
                                  eps_r=eps_r, length=length, width=width,
                                  orientation_deg=orientation))
        else:
            cx = float(rng.uniform(*ranges.center_x))
            cy = float(rng.uniform(*ranges.center_y))
            size = float(rng.uniform(*ranges.size))
            out.append(ObjectSpec(shape=shape, center_x=cx, center_y=cy,
                                  eps_r=eps_r, radius=size,
                                  orientation_deg=orientation))
    return out


# ---------------------------------------------------------------------------
# Scenario and rasterization
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    """Everything needed to rebuild one scene deterministically."""

    soil: SoilSpec
    field_seed: int
    objects: list[ObjectSpec]
    soil_width: float = 1.5
    soil_depth: float = 0.5
    cell_size: float = 0.0025

    def __post_init__(self):
        if self.soil_width <= 0 or self.soil_depth <= 0 or self.cell_size <= 0:
            raise OutOfRange("scenario dimensions must be positive")

    def grid_shape(self) -> tuple[int, int]:
        """(rows, cols) of the soil grid; dimensions must divide evenly."""
        rows = self.soil_depth / self.cell_size
        cols = self.soil_width / self.cell_size
        if abs(rows - round(rows)) > 1e-6 or abs(cols - round(cols)) > 1e-6:
            raise InvalidRange(
                f"soil block {self.soil_width} x {self.soil_depth} m is not "
                f"an integer number of {self.cell_size} m cells")
        return int(round(rows)), int(round(cols))


@dataclass
class PermittivityMap:
    """Ground-truth label image: 0 in soil, object eps_r inside objects."""

    values: np.ndarray
    cell_size: float


def _cell_centers(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = scenario.grid_shape()
    x = (np.arange(cols) + 0.5) * scenario.cell_size
    y = scenario.soil_depth - (np.arange(rows) + 0.5) * scenario.cell_size
    return np.broadcast_arrays(x[None, :], y[:, None])


def rasterize_scene(scenario: Scenario) -> PermittivityMap:
    """Paint object permittivities onto the soil grid.

    Soil cells are labelled 0; cells covered by an object take that
    object's eps_r, with later objects in the list drawn over earlier
    ones.  Coverage is decided at cell centres.

    Raises
    ------
    ObjectOutOfBounds
        If any object's rotated geometry exits the soil block.
    """
    xs, ys = _cell_centers(scenario)
    values = np.zeros(xs.shape, dtype=np.float64)
    for i, obj in enumerate(scenario.objects):
        check_object_bounds(obj, scenario.soil_width, scenario.soil_depth, index=i)
        values[point_in_object(obj, xs, ys)] = obj.eps_r
    return PermittivityMap(values=values, cell_size=scenario.cell_size)


def build_material_field(scenario: Scenario,
                         frequency: float = 1.0e9) -> MaterialField:
    """Generate the scenario's quantized fractal soil-material layout."""
    shape = scenario.grid_shape()
    bins = generate_fractal_field(shape, scenario.soil.fractal_dimension,
                                  scenario.soil.n_materials, scenario.field_seed)
    return MaterialField(bin_index=bins,
                         materials=soil_materials(scenario.soil, frequency))


def embed_objects(scenario: Scenario, material_field: MaterialField,
                  air_rows: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Build per-cell (eps_r, sigma) grids for simulation.

    The soil block takes its fractal materials, object cells override them
    (the exact cell set painted by :func:`rasterize_scene`), and
    ``air_rows`` rows of free space (eps_r 1, sigma 0) are stacked on top.
    Row 0 of the result is the top of the air region.
    """
    rows, cols = scenario.grid_shape()
    if material_field.bin_index.shape != (rows, cols):
        raise InvalidRange(
            f"material field shape {material_field.bin_index.shape} does not "
            f"match scenario grid {(rows, cols)}")
    if air_rows < 0:
        raise OutOfRange("air_rows must be >= 0")

    eps_table = np.array([m.eps_r for m in material_field.materials])
    sig_table = np.array([m.sigma for m in material_field.materials])
    soil_eps = eps_table[material_field.bin_index]
    soil_sig = sig_table[material_field.bin_index]

    xs, ys = _cell_centers(scenario)
    for i, obj in enumerate(scenario.objects):
        check_object_bounds(obj, scenario.soil_width, scenario.soil_depth, index=i)
        covered = point_in_object(obj, xs, ys)
        soil_eps[covered] = obj.eps_r
        soil_sig[covered] = obj.sigma

    eps = np.vstack([np.ones((air_rows, cols)), soil_eps])
    sigma = np.vstack([np.zeros((air_rows, cols)), soil_sig])
    return eps, sigma


# ---------------------------------------------------------------------------
# Serialization (manifest-friendly plain dicts)
# ---------------------------------------------------------------------------

def object_to_dict(obj: ObjectSpec) -> dict:
    d = dataclasses.asdict(obj)
    if obj.mask is not None:
        d["mask"] = np.asarray(obj.mask, dtype=bool).astype(int).tolist()
    return d


def object_from_dict(d: dict) -> ObjectSpec:
    d = dict(d)
    if d.get("mask") is not None:
        d["mask"] = np.asarray(d["mask"], dtype=bool)
    return ObjectSpec(**d)


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "soil": dataclasses.asdict(scenario.soil),
        "field_seed": scenario.field_seed,
        "objects": [object_to_dict(o) for o in scenario.objects],
        "soil_width": scenario.soil_width,
        "soil_depth": scenario.soil_depth,
        "cell_size": scenario.cell_size,
    }


def scenario_from_dict(d: dict) -> Scenario:
    return Scenario(
        soil=SoilSpec(**d["soil"]),
        field_seed=int(d["field_seed"]),
        objects=[object_from_dict(o) for o in d["objects"]],
        soil_width=float(d["soil_width"]),
        soil_depth=float(d["soil_depth"]),
        cell_size=float(d["cell_size"]),
    )
