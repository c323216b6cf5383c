"""Image-pair quality metrics and model evaluation reports.

All metrics take the reference image first and operate on arrays in
physical units (volts/metre for B-scans, relative permittivity for label
maps).  ``ssim`` defaults to the single-statistic (global) variant:
means, variances, and covariance computed once over the whole image; a
windowed variant is available behind a flag but is not the reported
metric.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (DegenerateRange, GprinvError, IncompatibleCheckpoint,
                     NonFinite, OutOfRange, ShapeMismatch, ZeroDynamicRange)


def _pair(reference, estimate) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(reference, dtype=np.float64)
    yhat = np.asarray(estimate, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ShapeMismatch(
            f"metric inputs disagree in shape: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ShapeMismatch("metric inputs are empty")
    if not (np.isfinite(y).all() and np.isfinite(yhat).all()):
        raise NonFinite("metric inputs contain NaN or Inf")
    return y, yhat


def mse(reference, estimate) -> float:
    """Mean squared error."""
    y, yhat = _pair(reference, estimate)
    return float(np.mean((y - yhat) ** 2))


def mae(reference, estimate) -> float:
    """Mean absolute error."""
    y, yhat = _pair(reference, estimate)
    return float(np.mean(np.abs(y - yhat)))


def mre(reference, estimate) -> float:
    """Mean relative error in percent.

    Each pixel's absolute error is expressed relative to the largest
    absolute value of the *reference* image, then averaged and scaled by
    100.  An all-zero reference has no scale to be relative to and raises
    ``ZeroDynamicRange``.
    """
    y, yhat = _pair(reference, estimate)
    peak = float(np.abs(y).max())
    if peak == 0.0:
        raise ZeroDynamicRange(
            "reference image is identically zero; relative error undefined")
    return float(np.mean(np.abs(y - yhat)) / peak * 100.0)


def ssim(reference, estimate, data_range: float, *, windowed: bool = False,
         window_size: int = 7) -> float:
    """Structural similarity from image statistics.

    ``data_range`` is the nominal dynamic range of the inputs (for
    example 125 for B-scans stored in [-50, 75] V/m, or 32 for
    permittivity maps in [0, 32]).  Stabilizers follow the conventional
    choice c1 = (0.01 R)^2 and c2 = (0.03 R)^2.

    By default statistics are population moments over the full image
    (the reported metric); with ``windowed=True`` the score is instead
    the mean of local scores over every uniform ``window_size`` square
    window.  A window covering the whole image reproduces the global
    score.  Identical images score exactly 1 either way.
    """
    y, yhat = _pair(reference, estimate)
    if not data_range > 0.0:
        raise DegenerateRange(f"data_range must be positive, got {data_range}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    if windowed:
        return _ssim_windowed(y, yhat, c1, c2, window_size)
    mu_y = y.mean()
    mu_e = yhat.mean()
    var_y = y.var()
    var_e = yhat.var()
    cov = ((y - mu_y) * (yhat - mu_e)).mean()
    num = (2.0 * mu_y * mu_e + c1) * (2.0 * cov + c2)
    den = (mu_y ** 2 + mu_e ** 2 + c1) * (var_y + var_e + c2)
    return float(num / den)


def _ssim_windowed(y: np.ndarray, yhat: np.ndarray, c1: float, c2: float,
                   window_size: int) -> float:
    if y.ndim != 2:
        raise ShapeMismatch(
            f"windowed SSIM expects 2D images, got shape {y.shape}")
    if window_size < 1:
        raise OutOfRange(f"window_size must be >= 1, got {window_size}")
    if window_size > min(y.shape):
        raise ShapeMismatch(
            f"window_size {window_size} exceeds image dims {y.shape}")
    shape = (window_size, window_size)
    wy = np.lib.stride_tricks.sliding_window_view(y, shape)
    we = np.lib.stride_tricks.sliding_window_view(yhat, shape)
    mu_y = wy.mean(axis=(-2, -1))
    mu_e = we.mean(axis=(-2, -1))
    var_y = (wy * wy).mean(axis=(-2, -1)) - mu_y ** 2
    var_e = (we * we).mean(axis=(-2, -1)) - mu_e ** 2
    cov = (wy * we).mean(axis=(-2, -1)) - mu_y * mu_e
    num = (2.0 * mu_y * mu_e + c1) * (2.0 * cov + c2)
    den = (mu_y ** 2 + mu_e ** 2 + c1) * (var_y + var_e + c2)
    return float((num / den).mean())


def evaluate_pair(reference, estimate, data_range: float) -> dict[str, float]:
    """All four metrics for one image pair, keyed by metric name."""
    return {
        "mse": mse(reference, estimate),
        "mae": mae(reference, estimate),
        "mre": mre(reference, estimate),
        "ssim": ssim(reference, estimate, data_range),
    }


# ---------------------------------------------------------------------------
# Model evaluation reports
# ---------------------------------------------------------------------------

METRICS_CSV_HEADER = "id,group,ssim,mse,mae,mre_pct,stage"

_STAGES = ("denoised", "perm")
_MEAN_METRICS = ("ssim", "mse", "mae", "mre_pct")


@dataclass
class SampleMetrics:
    """Metrics of one model output against its reference image.

    ``stage`` is "denoised" (B-scan, stage-1 output) or "perm"
    (permittivity map, stage-2 output).  ``mre_pct`` is None — omitted,
    not zero — when the reference image is identically zero.
    """

    sample_id: str
    group: str
    stage: str
    ssim: float
    mse: float
    mae: float
    mre_pct: float | None


@dataclass
class MetricsReport:
    """Per-sample metrics plus per-stage arithmetic means."""

    rows: list[SampleMetrics]
    n_samples: int
    groups: tuple[str, ...]

    def stage_rows(self, stage: str) -> list[SampleMetrics]:
        return [r for r in self.rows if r.stage == stage]

    def mean(self, stage: str, metric: str) -> float | None:
        """Arithmetic mean of one metric over one stage's rows.

        For ``mre_pct`` only rows where it is defined contribute; None
        is returned when no row defines it (or the stage is absent).
        """
        if metric not in _MEAN_METRICS:
            raise OutOfRange(f"unknown metric {metric!r}")
        values = [getattr(r, metric) for r in self.stage_rows(stage)]
        values = [v for v in values if v is not None]
        if not values:
            return None
        return float(np.mean(values))

    def summary(self) -> str:
        """Fixed-width text table of per-stage mean metrics."""
        lines = [f"{'stage':<10} {'n':>5} {'ssim':>12} {'mse':>12} "
                 f"{'mae':>12} {'mre_pct':>12}"]
        for stage in _STAGES:
            rows = self.stage_rows(stage)
            if not rows:
                continue
            cells = [f"{stage:<10}", f"{len(rows):>5}"]
            for metric in _MEAN_METRICS:
                m = self.mean(stage, metric)
                cells.append(f"{'-':>12}" if m is None else f"{m:>12.6g}")
            lines.append(" ".join(cells))
        return "\n".join(lines)


def write_metrics_csv(report: MetricsReport, path: str | Path) -> None:
    """One CSV row per (sample, stage); omitted MRE becomes an empty cell."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(METRICS_CSV_HEADER + "\n")
        for r in report.rows:
            mre_cell = "" if r.mre_pct is None else repr(r.mre_pct)
            f.write(f"{r.sample_id},{r.group},{r.ssim!r},{r.mse!r},"
                    f"{r.mae!r},{mre_cell},{r.stage}\n")


def _sample_metrics(sample_id: str, group: str, stage: str, reference,
                    estimate, data_range: float) -> SampleMetrics:
    try:
        mre_pct = mre(reference, estimate)
    except ZeroDynamicRange:
        mre_pct = None
    return SampleMetrics(
        sample_id=sample_id, group=group, stage=stage,
        ssim=ssim(reference, estimate, data_range),
        mse=mse(reference, estimate), mae=mae(reference, estimate),
        mre_pct=mre_pct)


def evaluate(ckpt, manifest, split: str = "test", groups=None,
             csv_path: str | Path | None = None,
             progress=None) -> MetricsReport:
    """Score a checkpoint against every sample of a dataset split.

    Runs inference per sample and compares denormalized outputs with
    denormalized references: permittivity maps always, denoised B-scans
    when the model produces them.  ``groups`` optionally restricts to a
    subset of scene groups.  A per-sample CSV is written to ``csv_path``
    when given; per-sample failures are re-raised with the sample id
    attached.
    """
    from . import dataset as ds
    from . import dmrf

    if ckpt.norm != manifest.norm:
        raise IncompatibleCheckpoint(
            f"checkpoint normalization {ckpt.norm} does not match the "
            f"dataset's {manifest.norm}")
    records = ds.samples(manifest, split, groups)
    store = ckpt.to_store()
    norm = manifest.norm
    r_bscan = norm.bscan_hi - norm.bscan_lo
    r_perm = norm.perm_hi - norm.perm_lo
    rows: list[SampleMetrics] = []
    for i, rec in enumerate(records):
        try:
            triplet = ds.load_sample(manifest, rec.sample_id)
            result = dmrf.infer(ckpt, triplet.noisy, store=store)
            ref_perm = ds.inverse_normalize(triplet.perm, norm.perm_lo,
                                            norm.perm_hi)
            rows.append(_sample_metrics(rec.sample_id, rec.group, "perm",
                                        ref_perm, result.perm_eps, r_perm))
            if result.denoised_vm is not None:
                ref_den = ds.inverse_normalize(triplet.denoised,
                                               norm.bscan_lo, norm.bscan_hi)
                rows.append(_sample_metrics(rec.sample_id, rec.group,
                                            "denoised", ref_den,
                                            result.denoised_vm, r_bscan))
        except GprinvError as e:
            raise type(e)(f"sample {rec.sample_id!r}: {e}") from e
        if progress is not None:
            progress(i + 1, len(records))
    report = MetricsReport(rows=rows, n_samples=len(records),
                           groups=tuple(sorted({r.group for r in records})))
    if csv_path is not None:
        write_metrics_csv(report, csv_path)
    return report
