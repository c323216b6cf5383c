"""Training-data construction and on-disk formats.

Each training sample is a triplet of images derived from one simulated
scene:

- **noisy**: the mean-subtracted B-scan of the full scene (soil clutter
  plus buried objects),
- **denoised**: the same B-scan with the soil-only clutter response
  subtracted (what a perfect clutter remover would output),
- **perm**: the ground-truth permittivity label map (0 in soil, object
  eps_r inside objects).

The noisy image is stored as ``denoised + clutter`` recomputed in float
arithmetic, so the additive decomposition ``noisy = denoised + clutter``
holds bit-exactly on the stored arrays (the adjustment is below one ulp of
the raw subtraction).  Images are resized bilinearly (corner-aligned) to a
fixed size and normalized to [0, 1] with fixed physical bounds before
hitting disk.

Tensors use the GPRT container: ``b"GPRT"``, u32 version 1, u32 rows,
cols, channels, then row-major float32 little-endian payload.  A dataset
is a directory holding a tab-separated ``manifest.txt`` plus one GPRT file
per image.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import scene as _scene
from .errors import (CorruptFile, DataUnavailable, DegenerateRange,
                     InvalidRange, MissingId, OutOfRange, TooFewTraces)
from .fdtd import BScan, GridSpec, ScanSpec, SourceSpec, run_bscan

GPRT_MAGIC = b"GPRT"
GPRT_VERSION = 1
MANIFEST_NAME = "manifest.txt"
MANIFEST_MAGIC = "gprinv-manifest"
SAMPLE_GROUPS = ("zero", "one", "two", "three")


# ---------------------------------------------------------------------------
# GPRT tensor container
# ---------------------------------------------------------------------------

def write_gprt(path: str | Path, array: np.ndarray) -> None:
    """Write a 2D or [rows, cols, channels] float array as a GPRT file."""
    a = np.asarray(array, dtype="<f4")
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or min(a.shape) < 1:
        raise InvalidRange(f"GPRT arrays must be 2D or 3D, got shape {array.shape}")
    rows, cols, ch = a.shape
    with open(path, "wb") as f:
        f.write(GPRT_MAGIC)
        f.write(struct.pack("<IIII", GPRT_VERSION, rows, cols, ch))
        f.write(np.ascontiguousarray(a).tobytes())


def read_gprt(path: str | Path) -> np.ndarray:
    """Read a GPRT file back as float32 [rows, cols, channels].

    Raises CorruptFile on a bad magic, version, dimensions, or a payload
    whose size disagrees with the header.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CorruptFile(f"cannot read {path}: {e}") from e
    if len(blob) < 20 or blob[:4] != GPRT_MAGIC:
        raise CorruptFile(f"{path} is not a GPRT file (bad magic)")
    version, rows, cols, ch = struct.unpack("<IIII", blob[4:20])
    if version != GPRT_VERSION:
        raise CorruptFile(f"{path}: unsupported GPRT version {version}")
    if min(rows, cols, ch) < 1 or max(rows, cols, ch) > 10 ** 6:
        raise CorruptFile(f"{path}: implausible dimensions {(rows, cols, ch)}")
    expected = 20 + 4 * rows * cols * ch
    if len(blob) != expected:
        raise CorruptFile(
            f"{path}: payload is {len(blob)} bytes, header implies {expected}")
    a = np.frombuffer(blob[20:], dtype="<f4").reshape(rows, cols, ch)
    return a.copy()


# ---------------------------------------------------------------------------
# Trace post-processing
# ---------------------------------------------------------------------------

def mean_subtract(bscan: BScan) -> BScan:
    """Remove per-time-sample mean across scan positions.

    This cancels signal content that is identical at every antenna
    position — the direct air wave and flat-layer reflections — which
    otherwise dominates the B-scan.  Requires at least two positions.
    """
    traces = np.asarray(bscan.traces)
    if traces.ndim != 2 or traces.shape[1] < 2:
        raise TooFewTraces(
            f"mean subtraction needs >= 2 traces, got shape {traces.shape}")
    out = traces - traces.mean(axis=1, keepdims=True)
    return BScan(traces=out, scan_step=bscan.scan_step,
                 first_position=bscan.first_position)


def normalize(array: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Affinely map [lo, hi] to [0, 1], clamping values outside the bounds."""
    if not (hi > lo):
        raise DegenerateRange(f"normalization bounds [{lo}, {hi}] are degenerate")
    a = (np.asarray(array, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(a, 0.0, 1.0)


def inverse_normalize(array: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map [0, 1] back to physical units (inverse of :func:`normalize`)."""
    if not (hi > lo):
        raise DegenerateRange(f"normalization bounds [{lo}, {hi}] are degenerate")
    return np.asarray(array, dtype=np.float64) * (hi - lo) + lo


def resize_bilinear(array: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2D array.

    The four corner samples are preserved exactly; a same-size call
    returns an identical copy.
    """
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidRange(f"resize expects a 2D array, got shape {a.shape}")
    if out_rows < 1 or out_cols < 1:
        raise InvalidRange("output size must be positive")
    rows, cols = a.shape
    if (out_rows, out_cols) == (rows, cols):
        return a.copy()
    ri = np.linspace(0.0, rows - 1.0, out_rows) if rows > 1 else np.zeros(out_rows)
    ci = np.linspace(0.0, cols - 1.0, out_cols) if cols > 1 else np.zeros(out_cols)
    r0 = np.floor(ri).astype(np.int64)
    c0 = np.floor(ci).astype(np.int64)
    r1 = np.minimum(r0 + 1, rows - 1)
    c1 = np.minimum(c0 + 1, cols - 1)
    fr = (ri - r0)[:, None]
    fc = (ci - c0)[None, :]
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bot = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


# ---------------------------------------------------------------------------
# Normalization bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationSpec:
    """Fixed physical bounds mapped onto [0, 1] for storage/training."""

    bscan_lo: float = -50.0
    bscan_hi: float = 75.0
    perm_lo: float = 0.0
    perm_hi: float = 32.0

    def __post_init__(self):
        if not (self.bscan_hi > self.bscan_lo and self.perm_hi > self.perm_lo):
            raise DegenerateRange("normalization bounds must satisfy hi > lo")


# ---------------------------------------------------------------------------
# Sample simulation
# ---------------------------------------------------------------------------

@dataclass
class RawTriplet:
    """Pre-normalization pipeline products at native B-scan resolution.

    ``noisy == denoised + clutter`` holds bit-exactly.
    """

    noisy: np.ndarray      # [time, positions] mean-subtracted, V/m
    clutter: np.ndarray    # soil-only response, mean-subtracted, V/m
    denoised: np.ndarray   # noisy minus clutter, V/m
    perm: np.ndarray       # label map at scene resolution


def simulate_triplet(scenario: _scene.Scenario, grid: GridSpec,
                     source: SourceSpec, scan: ScanSpec,
                     material_field: _scene.MaterialField | None = None,
                     clutter_bscan: BScan | None = None,
                     progress=None) -> RawTriplet:
    """Simulate one training sample's raw arrays.

    ``clutter_bscan`` may carry a cached soil-only acquisition (raw, not
    mean-subtracted) for the scenario's material field; it is simulated
    here otherwise.  The returned noisy panel is the sum ``denoised +
    clutter`` recomputed in float arithmetic so the decomposition is exact
    on the stored values.
    """
    if material_field is None:
        material_field = _scene.build_material_field(
            scenario, frequency=source.center_frequency)
    raw_noisy = run_bscan(scenario, grid, source, scan,
                          material_field=material_field, progress=progress)
    if clutter_bscan is None:
        soil_only = dataclasses.replace(scenario, objects=[])
        clutter_bscan = run_bscan(soil_only, grid, source, scan,
                                  material_field=material_field)
    noisy_ms = mean_subtract(raw_noisy).traces
    clutter_ms = mean_subtract(clutter_bscan).traces
    denoised = noisy_ms - clutter_ms
    noisy_exact = denoised + clutter_ms
    perm = _scene.rasterize_scene(scenario).values
    return RawTriplet(noisy=noisy_exact, clutter=clutter_ms,
                      denoised=denoised, perm=perm)


def triplet_images(raw: RawTriplet, image_size: tuple[int, int],
                   norm: NormalizationSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Resize and normalize a raw triplet into storage-ready float32 images."""
    rows, cols = image_size
    noisy = normalize(resize_bilinear(raw.noisy, rows, cols),
                      norm.bscan_lo, norm.bscan_hi)
    denoised = normalize(resize_bilinear(raw.denoised, rows, cols),
                         norm.bscan_lo, norm.bscan_hi)
    perm = normalize(resize_bilinear(raw.perm, rows, cols),
                     norm.perm_lo, norm.perm_hi)
    return (noisy.astype(np.float32), denoised.astype(np.float32),
            perm.astype(np.float32))


# ---------------------------------------------------------------------------
# Dataset build
# ---------------------------------------------------------------------------

@dataclass
class DatasetBuildConfig:
    """Everything that determines a dataset, including its randomness.

    ``workers`` controls how many processes simulate samples (0 means
    one per available core, capped by the ``GPRINV_MAX_WORKERS``
    environment variable); it affects speed only, never content.
    ``config_hash`` is free-form provenance recorded in the manifest.
    """

    out_dir: str
    master_seed: int = 0
    soil: _scene.SoilSpec = field(default_factory=_scene.SoilSpec)
    ranges: _scene.ObjectRanges = field(default_factory=_scene.ObjectRanges)
    grid: GridSpec = field(default_factory=GridSpec)
    source: SourceSpec = field(default_factory=SourceSpec)
    scan: ScanSpec = field(default_factory=ScanSpec)
    n_soil_fields: int = 10
    n_zero: int = 0
    n_one: int = 8000
    n_two: int = 10000
    n_three: int = 0
    train_fraction: float = 0.9
    image_size: tuple[int, int] = (128, 128)
    norm: NormalizationSpec = field(default_factory=NormalizationSpec)
    workers: int = 0
    config_hash: str = ""

    def __post_init__(self):
        if self.n_soil_fields < 1:
            raise OutOfRange("n_soil_fields must be >= 1")
        if min(self.n_zero, self.n_one, self.n_two, self.n_three) < 0:
            raise OutOfRange("sample counts must be >= 0")
        if self.n_zero + self.n_one + self.n_two + self.n_three < 1:
            raise DataUnavailable("dataset would contain no samples")
        if not (0.0 <= self.train_fraction <= 1.0):
            raise OutOfRange("train_fraction must lie in [0, 1]")
        if self.workers < 0:
            raise OutOfRange("workers must be >= 0 (0 = one per core)")


def _derived_seed(master: int, purpose: int, index: int) -> int:
    """Deterministic child seed for (master, purpose, index)."""
    ss = np.random.SeedSequence((master, purpose, index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class SampleRecord:
    """One manifest row."""

    sample_id: str
    split: str
    group: str
    subgroup: str
    noisy_path: str
    denoised_path: str
    perm_path: str
    scenario: dict


@dataclass
class DatasetManifest:
    root: Path
    master_seed: int
    image_size: tuple[int, int]
    norm: NormalizationSpec
    records: list[SampleRecord]
    config_hash: str = ""

    def __post_init__(self):
        self.by_id = {r.sample_id: r for r in self.records}
        if len(self.by_id) != len(self.records):
            raise CorruptFile("duplicate sample ids in manifest")


def _objects_touch(scenario: _scene.Scenario) -> bool:
    """True if any two objects cover adjacent or shared cells."""
    xs, ys = _scene._cell_centers(scenario)
    masks = [_scene.point_in_object(o, xs, ys) for o in scenario.objects]
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            a = masks[i]
            # 8-neighbourhood dilation by one cell
            grown = a.copy()
            grown[1:, :] |= a[:-1, :]
            grown[:-1, :] |= a[1:, :]
            grown[:, 1:] |= a[:, :-1]
            grown[:, :-1] |= a[:, 1:]
            grown[1:, 1:] |= a[:-1, :-1]
            grown[:-1, :-1] |= a[1:, 1:]
            grown[1:, :-1] |= a[:-1, 1:]
            grown[:-1, 1:] |= a[1:, :-1]
            if (grown & masks[j]).any():
                return True
    return False


def _sample_plan(cfg: DatasetBuildConfig) -> list[tuple[str, str, str, int]]:
    """Flatten the configured counts into (id, group, split, n_objects).

    ``round(train_fraction * count)`` of each group goes to train.  When
    a group has at least two samples and the fraction is strictly inside
    (0, 1), the plan keeps at least one sample on each side, so tiny
    smoke datasets still exercise both splits.
    """
    plan = []
    for group, count, n_obj in (("zero", cfg.n_zero, 0), ("one", cfg.n_one, 1),
                                ("two", cfg.n_two, 2), ("three", cfg.n_three, 3)):
        n_train = int(round(cfg.train_fraction * count))
        if count >= 2 and 0.0 < cfg.train_fraction < 1.0:
            n_train = min(max(n_train, 1), count - 1)
        for i in range(count):
            split = "train" if i < n_train else "test"
            plan.append((f"{group}-{i:05d}", group, split, n_obj))
    return plan


def effective_workers(requested: int) -> int:
    """Resolve a worker count: 0 means one per core; the environment
    variable ``GPRINV_MAX_WORKERS`` caps the result."""
    if requested < 0:
        raise OutOfRange("workers must be >= 0")
    n = requested if requested > 0 else (os.cpu_count() or 1)
    cap = os.environ.get("GPRINV_MAX_WORKERS")
    if cap is not None:
        try:
            cap_n = int(cap)
        except ValueError as e:
            raise OutOfRange(
                f"GPRINV_MAX_WORKERS must be an integer, got {cap!r}") from e
        if cap_n < 1:
            raise OutOfRange("GPRINV_MAX_WORKERS must be >= 1")
        n = min(n, cap_n)
    return max(1, n)


@dataclass
class _SampleTask:
    """Self-contained work order for simulating one sample."""

    index: int
    sample_id: str
    group: str
    split: str
    scenario: _scene.Scenario
    field: _scene.MaterialField
    clutter: BScan
    grid: GridSpec
    source: SourceSpec
    scan: ScanSpec
    image_size: tuple[int, int]
    norm: NormalizationSpec
    out_dir: str


def _build_sample(task: _SampleTask) -> SampleRecord:
    raw = simulate_triplet(task.scenario, task.grid, task.source, task.scan,
                           material_field=task.field,
                           clutter_bscan=task.clutter)
    noisy, denoised, perm = triplet_images(raw, task.image_size, task.norm)
    paths = {}
    for role, img in (("noisy", noisy), ("denoised", denoised),
                      ("perm", perm)):
        rel = f"tensors/{task.sample_id}_{role}.gprt"
        write_gprt(Path(task.out_dir) / rel, img)
        paths[role] = rel
    subgroup = ""
    if len(task.scenario.objects) >= 2:
        subgroup = ("interfaced" if _objects_touch(task.scenario)
                    else "separated")
    return SampleRecord(
        sample_id=task.sample_id, split=task.split, group=task.group,
        subgroup=subgroup, noisy_path=paths["noisy"],
        denoised_path=paths["denoised"], perm_path=paths["perm"],
        scenario=_scene.scenario_to_dict(task.scenario))


def build_dataset(cfg: DatasetBuildConfig, progress=None) -> Path:
    """Simulate and write a complete dataset; returns the manifest path.

    Deterministic in ``cfg`` (and independent of ``workers``): soil
    fields, object draws, and acquisition are all seeded from
    ``master_seed``.  Soil-only clutter B-scans are simulated once per
    fractal field and shared by the samples that use that field (samples
    cycle through the fields round-robin).  ``progress`` is an optional
    ``callable(done, total, sample_id)``.
    """
    out = Path(cfg.out_dir)
    tensors = out / "tensors"
    tensors.mkdir(parents=True, exist_ok=True)
    plan = _sample_plan(cfg)

    base_scenario = _scene.Scenario(
        soil=cfg.soil, field_seed=0, objects=[],
        soil_width=cfg.grid.soil_width, soil_depth=cfg.grid.soil_depth,
        cell_size=cfg.grid.cell_size)

    field_seeds = [_derived_seed(cfg.master_seed, 0, k)
                   for k in range(cfg.n_soil_fields)]
    fields: dict[int, _scene.MaterialField] = {}
    clutters: dict[int, BScan] = {}
    for k in range(min(cfg.n_soil_fields, len(plan))):
        soil_only = dataclasses.replace(base_scenario,
                                        field_seed=field_seeds[k])
        fields[k] = _scene.build_material_field(
            soil_only, frequency=cfg.source.center_frequency)
        clutters[k] = run_bscan(soil_only, cfg.grid, cfg.source, cfg.scan,
                                material_field=fields[k])

    tasks = []
    for idx, (sample_id, group, split, n_obj) in enumerate(plan):
        k = idx % cfg.n_soil_fields
        scenario = dataclasses.replace(
            base_scenario, field_seed=field_seeds[k],
            objects=_scene.sample_objects(
                _derived_seed(cfg.master_seed, 1, idx), n_obj, cfg.ranges))
        tasks.append(_SampleTask(
            index=idx, sample_id=sample_id, group=group, split=split,
            scenario=scenario, field=fields[k], clutter=clutters[k],
            grid=cfg.grid, source=cfg.source, scan=cfg.scan,
            image_size=cfg.image_size, norm=cfg.norm, out_dir=str(out)))

    records: list[SampleRecord] = []
    n_workers = effective_workers(cfg.workers)
    if n_workers > 1 and len(tasks) > 1:
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=n_workers) as pool:
            for record in pool.map(_build_sample, tasks, chunksize=1):
                records.append(record)
                if progress is not None:
                    progress(len(records), len(plan), record.sample_id)
    else:
        for task in tasks:
            records.append(_build_sample(task))
            if progress is not None:
                progress(len(records), len(plan), task.sample_id)

    manifest_path = out / MANIFEST_NAME
    with open(manifest_path, "w", encoding="utf-8") as f:
        f.write(f"{MANIFEST_MAGIC}\t1\n")
        f.write(f"master_seed\t{cfg.master_seed}\n")
        f.write(f"image_size\t{cfg.image_size[0]}\t{cfg.image_size[1]}\n")
        f.write("normalization\t{}\t{}\t{}\t{}\n".format(
            repr(cfg.norm.bscan_lo), repr(cfg.norm.bscan_hi),
            repr(cfg.norm.perm_lo), repr(cfg.norm.perm_hi)))
        if cfg.config_hash:
            f.write(f"config_hash\t{cfg.config_hash}\n")
        for r in records:
            scen_json = json.dumps(r.scenario, separators=(",", ":"))
            f.write("\t".join(["sample", r.sample_id, r.split, r.group,
                               r.subgroup or "-", r.noisy_path,
                               r.denoised_path, r.perm_path, scen_json]) + "\n")
    return manifest_path


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------

def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest and verify every referenced tensor file exists."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise CorruptFile(f"cannot read manifest {path}: {e}") from e
    if not lines or lines[0].split("\t") != [MANIFEST_MAGIC, "1"]:
        raise CorruptFile(f"{path} is not a dataset manifest")

    root = path.parent
    master_seed = 0
    image_size = (0, 0)
    norm = None
    config_hash = ""
    records: list[SampleRecord] = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        kind = parts[0]
        try:
            if kind == "master_seed":
                master_seed = int(parts[1])
            elif kind == "image_size":
                image_size = (int(parts[1]), int(parts[2]))
            elif kind == "normalization":
                norm = NormalizationSpec(float(parts[1]), float(parts[2]),
                                         float(parts[3]), float(parts[4]))
            elif kind == "config_hash":
                config_hash = parts[1]
            elif kind == "sample":
                _, sid, split, group, subgroup, p1, p2, p3, scen = parts
                records.append(SampleRecord(
                    sample_id=sid, split=split, group=group,
                    subgroup="" if subgroup == "-" else subgroup,
                    noisy_path=p1, denoised_path=p2, perm_path=p3,
                    scenario=json.loads(scen)))
            else:
                raise CorruptFile(f"{path}:{ln}: unknown record kind {kind!r}")
        except (IndexError, ValueError) as e:
            raise CorruptFile(f"{path}:{ln}: malformed line: {e}") from e
    if norm is None or min(image_size) < 1:
        raise CorruptFile(f"{path}: missing header records")
    for r in records:
        for rel in (r.noisy_path, r.denoised_path, r.perm_path):
            if not (root / rel).is_file():
                raise CorruptFile(f"{path}: missing tensor file {rel}")
    return DatasetManifest(root=root, master_seed=master_seed,
                           image_size=image_size, norm=norm, records=records,
                           config_hash=config_hash)


@dataclass
class SampleTriplet:
    noisy: np.ndarray
    denoised: np.ndarray
    perm: np.ndarray
    record: SampleRecord


def load_sample(manifest: DatasetManifest, sample_id: str) -> SampleTriplet:
    """Load one sample's images, validating shape and value range."""
    if sample_id not in manifest.by_id:
        raise MissingId(f"sample {sample_id!r} not in manifest")
    r = manifest.by_id[sample_id]
    imgs = []
    for rel in (r.noisy_path, r.denoised_path, r.perm_path):
        a = read_gprt(manifest.root / rel)
        if a.shape != (*manifest.image_size, 1):
            raise CorruptFile(
                f"{rel}: shape {a.shape} does not match manifest "
                f"image size {manifest.image_size}")
        if a.min() < 0.0 or a.max() > 1.0:
            raise CorruptFile(f"{rel}: values outside [0, 1]")
        imgs.append(a[:, :, 0])
    return SampleTriplet(noisy=imgs[0], denoised=imgs[1], perm=imgs[2], record=r)


def samples(manifest: DatasetManifest, split: str = "all",
            groups=None) -> list[SampleRecord]:
    """Filter manifest records by split and (optionally) group names."""
    if split not in ("train", "test", "all"):
        raise OutOfRange(f"unknown split {split!r}")
    out = [r for r in manifest.records
           if split == "all" or r.split == split]
    if groups is not None:
        groups = set(groups)
        out = [r for r in out if r.group in groups]
    if not out:
        raise DataUnavailable(f"no samples for split={split!r} groups={groups}")
    return out
