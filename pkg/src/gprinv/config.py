"""Run configuration: profiles, the key-value config file, and overrides.

A run is configured by a tree of typed sections.  Two named profiles
provide complete defaults:

- ``paper``: the full-scale acquisition and model (1.5 m x 0.5 m soil at
  2.5 mm cells, 128 x 128 images, full-width networks),
- ``desk``: a reduced profile sized for a workstation CPU (0.75 m x
  0.3 m soil at 1 cm cells, 64 x 64 images, narrow networks).

Keys are dotted ``section.field`` names; the schema is generated from
the section dataclasses, so ``schema_text()`` is always complete.  A
config file holds one ``key = value`` assignment per line (``#`` starts
a comment); command-line overrides use the same key syntax and are
applied after the file.  Unknown keys are hard errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from . import scene as _scene
from .dataset import DatasetBuildConfig, NormalizationSpec
from .dmrf import DMRFConfig, dmrf_config, smrf_config
from .errors import CorruptFile, OutOfRange, UnknownConfigKey
from .fdtd import GridSpec, ScanSpec, SourceSpec
from .fwi import AnnealSchedule, FwiSimConfig

PROFILES = ("paper", "desk")
MODELS = ("dmrf", "smrf", "nomrf")
TRAINING_MODES = ("joint", "separate")


@dataclass(frozen=True)
class RunKnobs:
    """Section ``run``: identity and plumbing of a pipeline run."""

    profile: str = "desk"
    seed: int = 0
    out_dir: str = "run"
    workers: int = 0  # 0 = one per core (generation only)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise OutOfRange(
                f"profile must be one of {PROFILES}, got {self.profile!r}")
        if self.workers < 0:
            raise OutOfRange("run.workers must be >= 0")


@dataclass(frozen=True)
class DatasetKnobs:
    """Section ``dataset``: sample counts and image geometry."""

    n_soil_fields: int = 10
    n_zero: int = 0
    n_one: int = 8000
    n_two: int = 10000
    n_three: int = 0
    train_fraction: float = 0.9
    image_rows: int = 128
    image_cols: int = 128

    def __post_init__(self):
        if self.image_rows < 1 or self.image_cols < 1:
            raise OutOfRange("image dimensions must be >= 1")


@dataclass(frozen=True)
class TrainKnobs:
    """Section ``train``: model selection and optimization settings."""

    model: str = "dmrf"
    width_factor: float = 1.0
    epochs: int = 150
    lr: float = 1e-4
    warmup_steps: int = 20
    batch: int = 4
    alpha: float = 10.0
    beta: float = 1.0
    training: str = "joint"
    auto_balance: bool = False
    two_channel_input: bool = True
    use_skips: bool = True
    fine_tune_epochs: int = 20
    fine_tune_lr: float = 1e-4

    def __post_init__(self):
        if self.model not in MODELS:
            raise OutOfRange(
                f"train.model must be one of {MODELS}, got {self.model!r}")
        if self.training not in TRAINING_MODES:
            raise OutOfRange(f"train.training must be one of "
                             f"{TRAINING_MODES}, got {self.training!r}")
        if self.width_factor <= 0:
            raise OutOfRange("train.width_factor must be positive")
        if self.warmup_steps < 0:
            raise OutOfRange("train.warmup_steps must be >= 0")
        if self.fine_tune_epochs < 0 or self.fine_tune_lr <= 0:
            raise OutOfRange("fine-tune epochs >= 0 and lr > 0 required")


@dataclass(frozen=True)
class FwiKnobs:
    """Section ``fwi``: benchmark scene and annealing schedule.

    ``truth_seed`` draws the hidden true objects (-1 = use ``run.seed``);
    ``observed_field_seed`` picks the fractal soil of the observed data
    (-1 = derive from the truth seed); ``known_field_seed`` is the soil
    given to the optimizer (-1 = not given: homogeneous mean soil).
    ``t0`` 0 selects the automatic initial temperature.
    """

    n_objects: int = 1
    shapes: tuple[str, ...] = ("circle",)
    truth_seed: int = -1
    observed_field_seed: int = -1
    known_field_seed: int = -1
    max_iters: int = 200
    gamma: float = 0.95
    t0: float = 0.0
    proposal_fraction: float = 0.05
    proposal_decay: float = 1.0
    proposal_floor: float = 0.05
    stall_limit: int = 50
    target_objective: float = 1e-12
    search_shapes: bool = False

    def __post_init__(self):
        if self.n_objects not in (1, 2):
            raise OutOfRange("fwi.n_objects must be 1 or 2")
        if self.t0 < 0:
            raise OutOfRange("fwi.t0 must be >= 0 (0 = automatic)")


@dataclass(frozen=True)
class RunConfig:
    """The complete configuration tree of one pipeline run."""

    run: RunKnobs = field(default_factory=RunKnobs)
    soil: _scene.SoilSpec = field(default_factory=_scene.SoilSpec)
    ranges: _scene.ObjectRanges = field(default_factory=_scene.ObjectRanges)
    grid: GridSpec = field(default_factory=GridSpec)
    source: SourceSpec = field(default_factory=SourceSpec)
    scan: ScanSpec = field(default_factory=ScanSpec)
    norm: NormalizationSpec = field(default_factory=NormalizationSpec)
    dataset: DatasetKnobs = field(default_factory=DatasetKnobs)
    train: TrainKnobs = field(default_factory=TrainKnobs)
    fwi: FwiKnobs = field(default_factory=FwiKnobs)


_SECTIONS: dict[str, type] = {
    "run": RunKnobs,
    "soil": _scene.SoilSpec,
    "ranges": _scene.ObjectRanges,
    "grid": GridSpec,
    "source": SourceSpec,
    "scan": ScanSpec,
    "norm": NormalizationSpec,
    "dataset": DatasetKnobs,
    "train": TrainKnobs,
    "fwi": FwiKnobs,
}

_TRUE_WORDS = ("true", "yes", "on", "1")
_FALSE_WORDS = ("false", "no", "off", "0")


def desk_profile() -> RunConfig:
    """Reduced-scale profile: every stage runs on one workstation core."""
    return RunConfig(
        run=RunKnobs(profile="desk"),
        grid=GridSpec(cell_size=0.01, soil_width=0.75, soil_depth=0.30,
                      air_height=0.20, pml_cells=10, time_window=10e-9,
                      trace_samples=256),
        source=SourceSpec(amplitude=1.0, center_frequency=0.6e9,
                          tx_offset_x=-0.05, rx_offset_x=0.05,
                          elevation=0.10),
        scan=ScanSpec(first_position=0.15, step=0.025, n_positions=19),
        ranges=_scene.ObjectRanges(
            center_x=(0.15, 0.60), center_y=(0.10, 0.20),
            size=(0.025, 0.045), eps_r=(2.0, 32.0),
            rect_center_x=(0.20, 0.55), rect_center_y=(0.10, 0.16),
            rect_width=(0.02, 0.03), rect_length=(0.06, 0.08)),
        norm=NormalizationSpec(bscan_lo=-120.0, bscan_hi=100.0,
                               perm_lo=0.0, perm_hi=32.0),
        dataset=DatasetKnobs(n_soil_fields=5, n_zero=0, n_one=8, n_two=8,
                             n_three=0, train_fraction=0.9,
                             image_rows=64, image_cols=64),
        train=TrainKnobs(width_factor=0.125, epochs=60, lr=1e-3, batch=4),
    )


def paper_profile() -> RunConfig:
    """Full-scale profile; every module's defaults are already this scale."""
    return RunConfig(run=RunKnobs(profile="paper"))


def profile_config(name: str) -> RunConfig:
    if name == "paper":
        return paper_profile()
    if name == "desk":
        return desk_profile()
    raise OutOfRange(f"unknown profile {name!r}; expected one of {PROFILES}")


# ---------------------------------------------------------------------------
# Key-value schema over the section dataclasses
# ---------------------------------------------------------------------------

def _field_types(cls: type) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _is_optional_float(tp) -> bool:
    if not isinstance(tp, types.UnionType):
        return False
    args = typing.get_args(tp)
    return set(args) == {float, type(None)}


def _parse_value(key: str, text: str, tp) -> object:
    text = text.strip()
    try:
        if tp is float:
            return float(text)
        if tp is int:
            return int(text)
        if tp is str:
            return text
        if tp is bool:
            low = text.lower()
            if low in _TRUE_WORDS:
                return True
            if low in _FALSE_WORDS:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if _is_optional_float(tp):
            return None if text.lower() in ("none", "auto") else float(text)
        origin = typing.get_origin(tp)
        if origin is tuple:
            args = typing.get_args(tp)
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if args[-1] is Ellipsis:
                elem = args[0]
                return tuple(_parse_value(key, p, elem) for p in parts)
            if len(parts) != len(args):
                raise ValueError(
                    f"expected {len(args)} comma-separated values")
            return tuple(_parse_value(key, p, a)
                         for p, a in zip(parts, args))
    except ValueError as e:
        raise OutOfRange(f"bad value for {key}: {e}") from e
    raise UnknownConfigKey(f"{key} has unsupported type {tp}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def schema_keys() -> list[str]:
    """Every valid dotted key, sorted."""
    keys = []
    for section, cls in _SECTIONS.items():
        keys.extend(f"{section}.{f.name}" for f in dataclasses.fields(cls))
    return sorted(keys)


def schema_text() -> str:
    """Human-readable schema: one line per key with type and default."""
    lines = ["configuration keys (key = value, one per line, # comments):"]
    for section, cls in sorted(_SECTIONS.items()):
        types_ = _field_types(cls)
        defaults = cls()
        for f in dataclasses.fields(cls):
            tp = types_[f.name]
            tname = getattr(tp, "__name__", str(tp))
            default = _format_value(getattr(defaults, f.name))
            lines.append(f"  {section}.{f.name} ({tname}) "
                         f"default: {default}")
    return "\n".join(lines)


def apply_assignments(cfg: RunConfig,
                      assignments: dict[str, str]) -> RunConfig:
    """Apply ``{dotted key: raw text}`` assignments to a config tree.

    ``run.profile`` cannot be reassigned here (the profile decides the
    base tree; pick it before applying overrides).  Unknown keys raise
    ``UnknownConfigKey``; invalid values raise ``OutOfRange``.
    """
    staged: dict[str, dict[str, object]] = {}
    for key, raw in assignments.items():
        if key == "run.profile":
            raise OutOfRange(
                "run.profile selects the base profile; pass it to "
                "resolve_config (or --profile) instead of overriding it")
        section, dot, name = key.partition(".")
        if not dot or section not in _SECTIONS:
            raise UnknownConfigKey(
                f"unknown config section in {key!r}; sections: "
                f"{', '.join(sorted(_SECTIONS))}")
        cls = _SECTIONS[section]
        types_ = _field_types(cls)
        if name not in types_:
            raise UnknownConfigKey(
                f"unknown config key {key!r}; valid {section}.* keys: "
                f"{', '.join(f.name for f in dataclasses.fields(cls))}")
        staged.setdefault(section, {})[name] = _parse_value(
            key, raw, types_[name])
    updates = {}
    for section, values in staged.items():
        updates[section] = dataclasses.replace(getattr(cfg, section),
                                               **values)
    return dataclasses.replace(cfg, **updates)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read ``key = value`` lines; returns the raw assignment map."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CorruptFile(f"cannot read config file {path}: {e}") from e
    out: dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, eq, value = stripped.partition("=")
        if not eq:
            raise CorruptFile(
                f"{path}:{ln}: expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(profile: str | None = None,
                   config_file: str | Path | None = None,
                   overrides: dict[str, str] | None = None) -> RunConfig:
    """Profile defaults -> config file -> explicit overrides, in order.

    The profile is taken from (most preferred first) the ``profile``
    argument, a ``run.profile`` entry in the file, or the ``desk``
    default.
    """
    file_map = dict(parse_config_file(config_file)) if config_file else {}
    file_profile = file_map.pop("run.profile", None)
    name = profile or file_profile or "desk"
    cfg = profile_config(name)
    if file_map:
        cfg = apply_assignments(cfg, file_map)
    if overrides:
        cfg = apply_assignments(cfg, overrides)
    return cfg


def resolved_text(cfg: RunConfig) -> str:
    """Canonical dump of every key; parses back to an equal config."""
    lines = []
    for section in sorted(_SECTIONS):
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = "
                         f"{_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


_HASH_EXCLUDED = ("run.out_dir", "run.profile", "run.workers")


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 over the resolved keys that can affect artifact bytes.

    Plumbing keys (``run.profile``, ``run.out_dir``, ``run.workers``)
    are excluded: they change where or how fast artifacts are produced,
    never their content, so runs differing only in plumbing share a
    hash.  Stable across processes and platforms.
    """
    lines = [ln for ln in resolved_text(cfg).splitlines(keepends=True)
             if ln.split(" =", 1)[0] not in _HASH_EXCLUDED]
    return hashlib.sha256("".join(lines).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Materializing module configurations
# ---------------------------------------------------------------------------

def dataset_build_config(cfg: RunConfig, out_dir: str | Path) -> DatasetBuildConfig:
    d = cfg.dataset
    return DatasetBuildConfig(
        out_dir=str(out_dir), master_seed=cfg.run.seed, soil=cfg.soil,
        ranges=cfg.ranges, grid=cfg.grid, source=cfg.source, scan=cfg.scan,
        n_soil_fields=d.n_soil_fields, n_zero=d.n_zero, n_one=d.n_one,
        n_two=d.n_two, n_three=d.n_three, train_fraction=d.train_fraction,
        image_size=(d.image_rows, d.image_cols), norm=cfg.norm,
        workers=cfg.run.workers, config_hash=config_hash(cfg))


def model_config(cfg: RunConfig) -> DMRFConfig:
    t = cfg.train
    common = dict(alpha=t.alpha, beta=t.beta,
                  end_to_end=(t.training == "joint"),
                  auto_balance=t.auto_balance, epochs=t.epochs, lr=t.lr,
                  warmup_steps=t.warmup_steps, batch=t.batch,
                  seed=cfg.run.seed)
    if t.model == "dmrf":
        return dmrf_config(width_factor=t.width_factor, use_mrf=True,
                           use_skips=t.use_skips,
                           two_channel_input=t.two_channel_input, **common)
    if t.model == "smrf":
        return smrf_config(width_factor=t.width_factor, use_mrf=True,
                           use_skips=t.use_skips, **common)
    return smrf_config(width_factor=t.width_factor, use_mrf=False,
                       use_skips=t.use_skips, **common)


def fwi_sim_config(cfg: RunConfig) -> FwiSimConfig:
    f = cfg.fwi
    return FwiSimConfig(
        soil=cfg.soil, ranges=cfg.ranges, grid=cfg.grid, source=cfg.source,
        scan=cfg.scan,
        field_seed=None if f.known_field_seed < 0 else f.known_field_seed)


def fwi_schedule(cfg: RunConfig) -> AnnealSchedule:
    f = cfg.fwi
    return AnnealSchedule(
        t0=None if f.t0 == 0 else f.t0, gamma=f.gamma,
        proposal_fraction=f.proposal_fraction,
        proposal_decay=f.proposal_decay, proposal_floor=f.proposal_floor,
        max_iters=f.max_iters, stall_limit=f.stall_limit,
        target_objective=f.target_objective, search_shapes=f.search_shapes)
