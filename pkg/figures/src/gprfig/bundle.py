r"""Readers for the exported figure bundle.

A bundle is a directory with an ``index.txt`` written by the inversion
workbench (tab-separated records, paths relative to the directory)::

    gprinv-figure-bundle\t1
    norm\t<bscan_lo>\t<bscan_hi>\t<perm_lo>\t<perm_hi>
    loss\t<loss CSV>
    metrics\t<metrics CSV>
    panel\t<sample id>\t<role>\t<GPRT file>

Panel roles come from the fixed enum ``ROLES``.  GPRT tensors are
``b"GPRT"``, u32 version 1, u32 rows/cols/channels, then float32
little-endian values.  Panels hold normalized units; ``Norm`` gives the
affine bounds that map them back to V/m (B-scan roles) or relative
permittivity (map roles).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = "gprinv-figure-bundle"
BUNDLE_VERSION = "1"
GPRT_MAGIC = b"GPRT"
GPRT_VERSION = 1

ROLES = ("noisy", "ground_truth", "denoised", "predicted", "fwi")
FIELD_ROLES = frozenset(("noisy", "denoised"))
ROLE_TITLES = {"noisy": "noisy", "ground_truth": "ground truth",
               "denoised": "denoised", "predicted": "predicted",
               "fwi": "FWI"}


class BundleError(Exception):
    """The bundle is missing, ill-formed, or incomplete."""


@dataclass(frozen=True)
class Norm:
    """Affine denormalization bounds recorded in the index."""

    bscan_lo: float
    bscan_hi: float
    perm_lo: float
    perm_hi: float


@dataclass(frozen=True)
class Bundle:
    root: Path
    norm: Norm
    loss_csv: Path
    metrics_csv: Path
    panels: dict[str, dict[str, Path]]  # sample id -> role -> file
    sample_ids: tuple[str, ...]         # in index order


def read_gprt(path: Path) -> np.ndarray:
    """Read one GPRT tensor as float32 [rows, cols, channels]."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise BundleError(f"cannot read {path}: {e}") from e
    if len(blob) < 20 or blob[:4] != GPRT_MAGIC:
        raise BundleError(f"{path} is not a GPRT file (bad magic)")
    version, rows, cols, ch = struct.unpack("<IIII", blob[4:20])
    if version != GPRT_VERSION:
        raise BundleError(f"{path}: unsupported GPRT version {version}")
    expected = 20 + 4 * rows * cols * ch
    if min(rows, cols, ch) < 1 or len(blob) != expected:
        raise BundleError(f"{path}: malformed GPRT dimensions or payload")
    return np.frombuffer(blob[20:], dtype="<f4").reshape(rows, cols, ch).copy()


def _resolve(root: Path, rel: str, what: str) -> Path:
    p = root / rel
    if not p.is_file():
        raise BundleError(f"index references a missing {what}: {rel}")
    return p


def read_bundle(root: str | Path) -> Bundle:
    """Parse and validate ``<root>/index.txt``."""
    root = Path(root)
    index = root / "index.txt"
    try:
        lines = index.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise BundleError(f"cannot read {index}: {e}") from e
    if not lines or lines[0].split("\t") != [MAGIC, BUNDLE_VERSION]:
        raise BundleError(
            f"{index} is not a version-{BUNDLE_VERSION} figure bundle index")

    norm = None
    loss_csv = None
    metrics_csv = None
    panels: dict[str, dict[str, Path]] = {}
    order: list[str] = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        kind = parts[0]
        try:
            if kind == "norm":
                norm = Norm(*(float(v) for v in parts[1:5]))
                if len(parts) != 5:
                    raise ValueError("expected 4 bounds")
            elif kind == "loss":
                loss_csv = _resolve(root, parts[1], "loss CSV")
            elif kind == "metrics":
                metrics_csv = _resolve(root, parts[1], "metrics CSV")
            elif kind == "panel":
                _, sid, role, rel = parts
                if role not in ROLES:
                    raise ValueError(
                        f"unknown role {role!r}; expected one of {ROLES}")
                if sid not in panels:
                    panels[sid] = {}
                    order.append(sid)
                panels[sid][role] = _resolve(root, rel, "panel image")
            else:
                raise ValueError(f"unknown record kind {kind!r}")
        except (ValueError, TypeError, IndexError) as e:
            raise BundleError(f"{index}:{ln}: {e}") from e
    if norm is None:
        raise BundleError(f"{index}: no norm record")
    if loss_csv is None:
        raise BundleError(f"{index}: no loss record")
    if metrics_csv is None:
        raise BundleError(f"{index}: no metrics record")
    return Bundle(root=root, norm=norm, loss_csv=loss_csv,
                  metrics_csv=metrics_csv, panels=panels,
                  sample_ids=tuple(order))


LOSS_COLUMNS = ("epoch", "train_loss", "train_l1", "train_l2",
                "test_loss", "test_l1", "test_l2")


def load_loss_csv(path: Path) -> dict[str, np.ndarray]:
    """Read the 7-column loss CSV into named float arrays.

    Raises ``BundleError`` on a missing/ill-formed header or when there
    are no data rows.
    """
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise BundleError(f"cannot read {path}: {e}") from e
    if not lines or tuple(lines[0].split(",")) != LOSS_COLUMNS:
        raise BundleError(
            f"{path}: expected header {','.join(LOSS_COLUMNS)}")
    rows = [ln for ln in lines[1:] if ln.strip()]
    if not rows:
        raise BundleError(f"{path}: no data rows")
    try:
        table = np.array([[float(v) for v in ln.split(",")] for ln in rows])
    except ValueError as e:
        raise BundleError(f"{path}: non-numeric cell: {e}") from e
    if table.shape[1] != len(LOSS_COLUMNS):
        raise BundleError(f"{path}: rows must have {len(LOSS_COLUMNS)} cells")
    return {name: table[:, i] for i, name in enumerate(LOSS_COLUMNS)}


def panel_image(bundle: Bundle, sample_id: str, role: str) -> np.ndarray:
    """One panel as a 2D array in physical units (V/m or eps_r)."""
    try:
        path = bundle.panels[sample_id][role]
    except KeyError:
        raise BundleError(
            f"bundle has no {role!r} panel for sample {sample_id!r}") from None
    img = read_gprt(path)[:, :, 0]
    n = bundle.norm
    lo, hi = ((n.bscan_lo, n.bscan_hi) if role in FIELD_ROLES
              else (n.perm_lo, n.perm_hi))
    return img * (hi - lo) + lo
