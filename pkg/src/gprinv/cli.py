r"""Command-line workbench: every pipeline stage behind one executable.

Subcommands
-----------
- ``generate``       scenes -> FDTD -> normalized GPRT training triplets
- ``train``          train a model on a generated dataset
- ``fine-tune``      resume training from a checkpoint
- ``infer``          run a checkpoint on one noisy B-scan GPRT file
- ``evaluate``       SSIM/MSE/MAE/MRE report over a dataset split
- ``fwi``            simulated-annealing full-waveform inversion benchmark
- ``export-figures`` write the CSV/GPRT bundle the figure scripts consume
- ``selftest``       fast oracle suite: physics, gradients, metric identities

Exit codes: 0 success, 2 usage or configuration error (the configuration
schema is printed to stderr), 1 runtime failure.

Every run echoes its resolved configuration, the configuration hash, and
the master seed, and writes the same text to ``run-config.txt`` inside
its artifact directory, so every artifact names the exact configuration
that produced it.  Reruns with identical inputs write identical bytes.

Artifact layout (under ``run.out_dir``, overridable per command)::

    dataset/         manifest.txt + tensors/*.gprt        (generate)
    train/           model.ckpt + loss.csv                (train)
    fine-tune/       fine_tuned.ckpt + fine_tune.csv      (fine-tune)
    infer/           denoised.gprt + perm.gprt            (infer)
    evaluate/        metrics.csv                          (evaluate)
    fwi/             trace.csv + reconstruction.gprt ...  (fwi)
    figures-bundle/  index.txt + loss.csv + metrics.csv + panels/*.gprt

Figure-bundle index format (``index.txt``, tab-separated, one record per
line; paths are relative to the bundle directory)::

    gprinv-figure-bundle\t1
    norm\t<bscan_lo>\t<bscan_hi>\t<perm_lo>\t<perm_hi>
    loss\t<path to loss CSV>
    metrics\t<path to metrics CSV>
    panel\t<sample id>\t<role>\t<path to GPRT>

Panel roles are exactly ``noisy``, ``ground_truth``, ``denoised``,
``predicted``, and ``fwi``.  All panels are stored in normalized units;
the ``norm`` record gives the bounds that denormalize them.  Dataset
panels (``noisy``, ``ground_truth``) and the ``fwi`` reconstruction lie
in [0, 1]; model outputs (``denoised``, ``predicted``) are raw network
values and may stray outside, clipping at the renderer's fixed color
scale.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as cf
from . import dataset as ds
from . import dmrf
from . import fdtd as fd
from . import fwi
from . import metrics as mx
from . import scene
from .errors import (DataUnavailable, GprinvError, OutOfRange,
                     ZeroDynamicRange)

PROG = "gprinv"


# ---------------------------------------------------------------------------
# Option plumbing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=cf.PROFILES, default=None,
                   help="base configuration profile (default: desk, or the "
                        "config file's run.profile)")
    p.add_argument("--config", metavar="FILE", default=None,
                   help="key = value configuration file")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="override one configuration key (repeatable)")
    p.add_argument("--seed", type=int, default=None, metavar="N",
                   help="master seed (run.seed)")
    p.add_argument("--out", default=None, metavar="DIR",
                   help="artifact root directory (run.out_dir)")


def _collect_overrides(args: argparse.Namespace) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in args.set:
        key, eq, value = item.partition("=")
        if not eq:
            raise OutOfRange(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["run.seed"] = str(args.seed)
    if args.out is not None:
        out["run.out_dir"] = args.out
    for attr, key in getattr(args, "shorthands", {}).items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = str(value)
    n = getattr(args, "samples", None)
    if n is not None:
        out["dataset.n_zero"] = "0"
        out["dataset.n_three"] = "0"
        out["dataset.n_one"] = str(n - n // 2)
        out["dataset.n_two"] = str(n // 2)
    return out


def _announce(command: str, cfg: cf.RunConfig,
              artifact_dir: Path | None) -> None:
    """Echo the resolved configuration; persist it next to the artifacts."""
    header = (f"# {PROG} {command}\n"
              f"# config hash: {cf.config_hash(cfg)}\n"
              f"# master seed: {cfg.run.seed}\n")
    text = header + cf.resolved_text(cfg)
    sys.stdout.write(text)
    sys.stdout.flush()
    if artifact_dir is not None:
        artifact_dir.mkdir(parents=True, exist_ok=True)
        (artifact_dir / "run-config.txt").write_text(text, encoding="utf-8")


def _out_dir(cfg: cf.RunConfig, name: str) -> Path:
    return Path(cfg.run.out_dir) / name


def _data_dir(args: argparse.Namespace, cfg: cf.RunConfig) -> Path:
    return Path(args.data) if args.data else _out_dir(cfg, "dataset")


def _checkpoint_path(args: argparse.Namespace, cfg: cf.RunConfig) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    return _out_dir(cfg, "train") / "model.ckpt"


def _describe(o: scene.ObjectSpec) -> str:
    if o.shape == "rectangle":
        geom = f"length {o.length:.4f} m, width {o.width:.4f} m"
    else:
        geom = f"radius {o.radius:.4f} m"
    return (f"{o.shape} at ({o.center_x:.4f}, {o.center_y:.4f}) m, {geom}, "
            f"eps_r {o.eps_r:.3f}, orientation {o.orientation_deg:.1f} deg")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_generate(args: argparse.Namespace, cfg: cf.RunConfig) -> int:
    data_dir = _data_dir(args, cfg)
    _announce("generate", cfg, data_dir)
    build = cf.dataset_build_config(cfg, data_dir)

    def progress(done: int, total: int, sample_id: str) -> None:
        if done == total or done % 25 == 0:
            print(f"  built {done}/{total} ({sample_id})")

    manifest_path = ds.build_dataset(build, progress=progress)
    print(f"wrote {manifest_path}")
    return 0


def _cmd_train(args: argparse.Namespace, cfg: cf.RunConfig) -> int:
    run_dir = _out_dir(cfg, "train")
    _announce("train", cfg, run_dir)
    manifest = ds.load_manifest(_data_dir(args, cfg))
    model = cf.model_config(cfg)
    print(f"model {cfg.train.model}: "
          f"{dmrf.init_params(model).n_parameters()} parameters")

    def progress(epoch: int, phase: str, train_loss: float,
                 test_loss: float) -> None:
        print(f"  epoch {epoch:4d} [{phase}] "
              f"train {train_loss:.6f}  test {test_loss:.6f}")

    ckpt, csv_path = dmrf.train(manifest, model, run_dir, progress=progress)
    print(f"best test loss {ckpt.best_test_loss:.6f} (epoch {ckpt.epoch})")
    print(f"wrote {run_dir / 'model.ckpt'}")
    print(f"wrote {csv_path}")
    return 0


def _cmd_fine_tune(args: argparse.Namespace, cfg: cf.RunConfig) -> int:
    out_dir = _out_dir(cfg, "fine-tune")
    _announce("fine-tune", cfg, out_dir)
    ckpt = dmrf.load_checkpoint(_checkpoint_path(args, cfg))
    manifest = ds.load_manifest(_data_dir(args, cfg))

    def progress(epoch: int, phase: str, train_loss: float,
                 test_loss: float) -> None:
        print(f"  epoch {epoch:4d} [{phase}] "
              f"train {train_loss:.6f}  test {test_loss:.6f}")

    tuned, csv_path = dmrf.fine_tune(
        ckpt, manifest, epochs=cfg.train.fine_tune_epochs,
        lr0=cfg.train.fine_tune_lr, out_dir=out_dir, progress=progress)
    if csv_path is None:
        print("0 epochs requested; checkpoint left unchanged")
        return 0
    print(f"best test loss {tuned.best_test_loss:.6f} (epoch {tuned.epoch})")
    print(f"wrote {out_dir / 'fine_tuned.ckpt'}")
    print(f"wrote {csv_path}")
    return 0


def _cmd_infer(args: argparse.Namespace, cfg: cf.RunConfig) -> int:
    out_dir = _out_dir(cfg, "infer")
    _announce("infer", cfg, out_dir)
    ckpt = dmrf.load_checkpoint(_checkpoint_path(args, cfg))
    result = dmrf.infer(ckpt, args.input)
    ds.write_gprt(out_dir / "perm.gprt", result.perm)
    print(f"wrote {out_dir / 'perm.gprt'} "
          f"(eps_r {result.perm_eps.min():.2f}..{result.perm_eps.max():.2f})")
    if result.denoised is not None:
        ds.write_gprt(out_dir / "denoised.gprt", result.denoised)
        print(f"wrote {out_dir / 'denoised.gprt'}")
    return 0


def _cmd_evaluate(args: argparse.Namespace, cfg: cf.RunConfig) -> int:
    out_dir = _out_dir(cfg, "evaluate")
    _announce("evaluate", cfg, out_dir)
    ckpt = dmrf.load_checkpoint(_checkpoint_path(args, cfg))
    manifest = ds.load_manifest(_data_dir(args, cfg))
    groups = tuple(g for g in args.groups.split(",") if g) \
        if args.groups else None
    csv_path = out_dir / "metrics.csv"
    report = mx.evaluate(ckpt, manifest, split=args.split, groups=groups,
                         csv_path=csv_path)
    print(report.summary())
    print(f"wrote {csv_path}")
    return 0


def _fwi_observed(cfg: cf.RunConfig) -> tuple[list[scene.ObjectSpec],
                                              scene.Scenario, fd.BScan]:
    """Simulate the hidden truth the ``fwi`` benchmark inverts."""
    k = cfg.fwi
    truth_seed = k.truth_seed if k.truth_seed >= 0 else cfg.run.seed
    ranges = replace(cfg.ranges, shapes=k.shapes)
    truth = scene.sample_objects(truth_seed, k.n_objects, ranges)
    field_seed = (k.observed_field_seed if k.observed_field_seed >= 0 else
                  int(np.random.SeedSequence((truth_seed, 17))
                      .generate_state(1)[0]))
    scenario = scene.Scenario(
        soil=cfg.soil, field_seed=field_seed, objects=truth,
        soil_width=cfg.grid.soil_width, soil_depth=cfg.grid.soil_depth,
        cell_size=cfg.grid.cell_size)
    field = scene.build_material_field(
        scenario, frequency=cfg.source.center_frequency)
    observed = ds.mean_subtract(fd.run_bscan(
        scenario, cfg.grid, cfg.source, cfg.scan, material_field=field))
    return truth, scenario, observed


def _cmd_fwi(args: argparse.Namespace, cfg: cf.RunConfig) -> int:
    out_dir = _out_dir(cfg, "fwi")
    _announce("fwi", cfg, out_dir)
    truth, scenario, observed = _fwi_observed(cfg)
    print("hidden truth:")
    for o in truth:
        print(f"  {_describe(o)}")

    def progress(iteration: int, best: float) -> None:
        if iteration % 10 == 0:
            print(f"  iteration {iteration:4d}  best objective {best:.6e}")

    result = fwi.fwi_invert(
        observed, cfg.fwi.n_objects, tuple(o.shape for o in truth),
        cf.fwi_schedule(cfg), cf.fwi_sim_config(cfg), seed=cfg.run.seed,
        progress=progress)

    fwi.write_trace_csv(result, out_dir / "trace.csv")
    recon = ds.normalize(result.perm_map.values,
                         cfg.norm.perm_lo, cfg.norm.perm_hi)
    ds.write_gprt(out_dir / "reconstruction.gprt", recon)
    truth_map = ds.normalize(scene.rasterize_scene(scenario).values,
                             cfg.norm.perm_lo, cfg.norm.perm_hi)
    ds.write_gprt(out_dir / "truth.gprt", truth_map)

    recovered = result.best_state.objects()
    lines = [f"iterations = {result.n_iterations}",
             f"best_objective = {result.best_objective!r}"]
    for i, (t, r) in enumerate(zip(truth, recovered)):
        lines.append(f"truth[{i}] = {_describe(t)}")
        lines.append(f"recovered[{i}] = {_describe(r)}")
        lines.append(f"eps_error_pct[{i}] = "
                     f"{100.0 * abs(r.eps_r - t.eps_r) / t.eps_r:.2f}")
    text = "\n".join(lines) + "\n"
    (out_dir / "result.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    print(f"wrote {out_dir / 'trace.csv'}")
    print(f"wrote {out_dir / 'reconstruction.gprt'}")
    return 0


_PANEL_ROLES = ("noisy", "ground_truth", "denoised", "predicted", "fwi")


def _cmd_export_figures(args: argparse.Namespace, cfg: cf.RunConfig) -> int:
    bundle = Path(args.bundle) if args.bundle \
        else _out_dir(cfg, "figures-bundle")
    train_dir = Path(args.run) if args.run else _out_dir(cfg, "train")
    _announce("export-figures", cfg, bundle)

    manifest = ds.load_manifest(_data_dir(args, cfg))
    ckpt = dmrf.load_checkpoint(
        Path(args.checkpoint) if args.checkpoint
        else train_dir / "model.ckpt")

    loss_src = train_dir / "loss.csv"
    if not loss_src.exists():
        raise DataUnavailable(f"no loss CSV at {loss_src}; train first or "
                              f"point --run at a training run directory")
    (bundle / "loss.csv").write_bytes(loss_src.read_bytes())
    mx.evaluate(ckpt, manifest, split="test",
                csv_path=bundle / "metrics.csv")

    records = [r for r in ds.samples(manifest, "test")
               if r.group in ("one", "two")][:args.panels]
    if len(records) < args.panels:
        raise DataUnavailable(
            f"need {args.panels} test samples with one or two objects, "
            f"dataset has {len(records)}")

    panels_dir = bundle / "panels"
    panels_dir.mkdir(parents=True, exist_ok=True)
    store = ckpt.to_store()
    sim = cf.fwi_sim_config(cfg)
    schedule = cf.fwi_schedule(cfg)
    norm = manifest.norm
    rows, cols = manifest.image_size
    index: list[str] = []

    for rec in records:
        triplet = ds.load_sample(manifest, rec.sample_id)
        result = dmrf.infer(ckpt, triplet.noisy, store=store)
        if result.denoised is None:
            raise DataUnavailable(
                "the denoised panel role needs a two-stage checkpoint; "
                f"this one is single-stage (kind {ckpt.config.kind!r})")
        scenario = scene.scenario_from_dict(rec.scenario)
        field = scene.build_material_field(
            scenario, frequency=cfg.source.center_frequency)
        observed = ds.mean_subtract(fd.run_bscan(
            scenario, cfg.grid, cfg.source, cfg.scan, material_field=field))
        shapes = tuple(o.shape for o in scenario.objects)
        inversion = fwi.fwi_invert(observed, len(shapes), shapes, schedule,
                                   sim, seed=cfg.run.seed)
        recon = ds.normalize(
            ds.resize_bilinear(inversion.perm_map.values, rows, cols),
            norm.perm_lo, norm.perm_hi)
        images = {"noisy": triplet.noisy, "ground_truth": triplet.perm,
                  "denoised": result.denoised, "predicted": result.perm,
                  "fwi": recon}
        for role in _PANEL_ROLES:
            rel = f"panels/{rec.sample_id}-{role}.gprt"
            ds.write_gprt(bundle / rel, images[role])
            index.append(f"panel\t{rec.sample_id}\t{role}\t{rel}")
        print(f"  exported {rec.sample_id} "
              f"(fwi best objective {inversion.best_objective:.3e})")

    head = ["gprinv-figure-bundle\t1",
            f"norm\t{norm.bscan_lo!r}\t{norm.bscan_hi!r}"
            f"\t{norm.perm_lo!r}\t{norm.perm_hi!r}",
            "loss\tloss.csv", "metrics\tmetrics.csv"]
    (bundle / "index.txt").write_text(
        "\n".join(head + index) + "\n", encoding="utf-8")
    print(f"wrote {bundle / 'index.txt'} "
          f"({len(records)} samples x {len(_PANEL_ROLES)} roles)")
    return 0


# ---------------------------------------------------------------------------
# Selftest oracle suite
# ---------------------------------------------------------------------------

def _selftest_metrics() -> None:
    rng = np.random.default_rng(0)
    y = rng.random((24, 24))
    for windowed in (False, True):
        s = mx.ssim(y, y, 1.0, windowed=windowed)
        if abs(s - 1.0) > 1e-12:
            raise AssertionError(f"ssim(y, y) = {s!r}, expected 1.0")
    if mx.mse(y, y) != 0.0 or mx.mae(y, y) != 0.0 or mx.mre(y, y) != 0.0:
        raise AssertionError("error metrics non-zero on identical inputs")
    try:
        mx.mre(np.zeros((4, 4)), y[:4, :4])
    except ZeroDynamicRange:
        pass
    else:
        raise AssertionError("mre accepted an all-zero reference")


def _selftest_gradients() -> None:
    rng = np.random.default_rng(1)
    store = ad.ParamStore(dtype=np.float64)
    module = dmrf.MRFModuleConfig(in_channels=2, stage_width=2)
    dmrf.init_mrf_module(store, "m", module, rng)
    x = ad.Tensor4(rng.standard_normal((1, 2, 8, 8)))
    target = ad.Tensor4(rng.standard_normal((1, 2, 8, 8)))
    report = ad.grad_check(lambda: ad.mse(dmrf.mrf_forward(x, store, "m"),
                                          target),
                           store, elems_per_tensor=2, seed=0)
    if report.max_rel_error >= 1e-4:
        raise AssertionError(
            f"MRF module gradient error {report.max_rel_error:.3e}")

    chain = ad.ParamStore(dtype=np.float64)
    chain.add("w1", 0.5 * rng.standard_normal((3, 1, 3, 3)))
    chain.add("b1", 0.1 * rng.standard_normal((1, 3, 1, 1)))
    chain.add("wu", 0.5 * rng.standard_normal((2, 3, 2, 2)))
    x2 = ad.Tensor4(rng.standard_normal((2, 1, 8, 8)))
    t2 = ad.Tensor4(rng.standard_normal((2, 5, 8, 8)))

    def loss() -> ad.Tensor4:
        p = chain.params
        h = ad.elu(ad.conv2d(x2, p["w1"], p["b1"]))
        u = ad.upconv2(ad.maxpool2(h), p["wu"])
        return ad.mse(ad.concat_channels([u, h]), t2)

    report = ad.grad_check(loss, chain, elems_per_tensor=3, seed=1)
    if report.max_rel_error >= 1e-4:
        raise AssertionError(
            f"layer-chain gradient error {report.max_rel_error:.3e}")


def _first_arrival(trace: np.ndarray, grid: fd.GridSpec) -> float:
    """Interpolated time at which |trace| first reaches 5% of its peak."""
    dt = grid.time_window / (grid.trace_samples - 1)
    magnitude = np.abs(trace)
    threshold = 0.05 * magnitude.max()
    i = int(np.argmax(magnitude >= threshold))
    if i == 0:
        return 0.0
    frac = (threshold - magnitude[i - 1]) / (magnitude[i] - magnitude[i - 1])
    return (i - 1 + frac) * dt


def _selftest_first_arrival() -> None:
    grid = fd.GridSpec(cell_size=0.01, soil_width=0.8, soil_depth=0.2,
                       air_height=0.2, pml_cells=10, time_window=5e-9,
                       trace_samples=2048)
    rows, cols = grid.interior_shape()
    eps = np.ones((rows, cols))
    sigma = np.zeros((rows, cols))
    source = fd.SourceSpec(center_frequency=1.0e9)
    traces = fd.run_probes(eps, sigma, grid, source, (0.10, 0.30),
                           [(0.30, 0.30), (0.60, 0.30)])
    measured = _first_arrival(traces[:, 1], grid) \
        - _first_arrival(traces[:, 0], grid)
    expected = 0.30 / fd.C0
    error = abs(measured - expected) / expected
    if error >= 0.02:
        raise AssertionError(
            f"free-space arrival off by {100 * error:.2f}% "
            f"(measured {measured:.4e} s, expected {expected:.4e} s)")


def _selftest_pml() -> None:
    grid = fd.GridSpec(cell_size=0.01, soil_width=0.6, soil_depth=0.2,
                       air_height=0.2, pml_cells=10, time_window=12e-9,
                       trace_samples=1024)
    rows, cols = grid.interior_shape()
    eps = np.ones((rows, cols))
    sigma = np.zeros((rows, cols))
    source = fd.SourceSpec(center_frequency=1.0e9)
    trace = fd.run_probes(eps, sigma, grid, source, (0.20, 0.30),
                          [(0.40, 0.30)])[:, 0]
    t = np.linspace(0.0, grid.time_window, grid.trace_samples)
    # by 6 ns the direct pulse and any single boundary bounce have passed
    tail = trace[t >= 6e-9]
    ratio = float(np.sum(tail ** 2) / np.sum(trace ** 2))
    if ratio >= 0.01:
        raise AssertionError(
            f"boundary residual energy {100 * ratio:.3f}% of trace energy")


def _cmd_selftest(args: argparse.Namespace, cfg: cf.RunConfig) -> int:
    _announce("selftest", cfg, None)
    checks = [
        ("metric identities", _selftest_metrics),
        ("gradients vs central differences", _selftest_gradients),
        ("free-space first arrival within 2%", _selftest_first_arrival),
        ("boundary residual energy below 1%", _selftest_pml),
    ]
    failures = 0
    for name, fn in checks:
        start = time.perf_counter()
        try:
            fn()
        except Exception as e:
            failures += 1
            print(f"FAIL {name}: {e}")
        else:
            print(f"ok   {name} ({time.perf_counter() - start:.2f}s)")
    if failures:
        print(f"{failures} of {len(checks)} checks failed")
        return 1
    print(f"all {len(checks)} checks passed")
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Ground-penetrating-radar inversion workbench: "
                    "simulate, train, evaluate, invert.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")

    p = sub.add_parser("generate", help="simulate a training dataset")
    _add_common(p)
    p.add_argument("--data", metavar="DIR", default=None,
                   help="dataset directory (default: <out>/dataset)")
    p.add_argument("--samples", type=int, default=None, metavar="N",
                   help="total sample count, split between one- and "
                        "two-object scenes (overrides dataset.n_*)")
    p.add_argument("--workers", type=int, default=None, metavar="N",
                   help="simulation worker processes (run.workers; "
                        "0 = one per core)")
    p.set_defaults(func=_cmd_generate,
                   shorthands={"workers": "run.workers"})

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_common(p)
    p.add_argument("--data", metavar="DIR", default=None,
                   help="dataset directory (default: <out>/dataset)")
    p.add_argument("--model", choices=cf.MODELS, default=None,
                   help="architecture to train (train.model)")
    p.add_argument("--epochs", type=int, default=None, metavar="N",
                   help="training epochs (train.epochs)")
    p.set_defaults(func=_cmd_train,
                   shorthands={"model": "train.model",
                               "epochs": "train.epochs"})

    p = sub.add_parser("fine-tune",
                       help="resume training from a checkpoint")
    _add_common(p)
    p.add_argument("--data", metavar="DIR", default=None,
                   help="dataset directory (default: <out>/dataset)")
    p.add_argument("--checkpoint", metavar="FILE", default=None,
                   help="checkpoint to resume "
                        "(default: <out>/train/model.ckpt)")
    p.add_argument("--epochs", type=int, default=None, metavar="N",
                   help="fine-tuning epochs (train.fine_tune_epochs)")
    p.add_argument("--lr", type=float, default=None, metavar="LR",
                   help="initial fine-tuning rate (train.fine_tune_lr)")
    p.set_defaults(func=_cmd_fine_tune,
                   shorthands={"epochs": "train.fine_tune_epochs",
                               "lr": "train.fine_tune_lr"})

    p = sub.add_parser("infer", help="run a checkpoint on one B-scan")
    _add_common(p)
    p.add_argument("input", metavar="GPRT",
                   help="normalized noisy B-scan image (GPRT file)")
    p.add_argument("--checkpoint", metavar="FILE", default=None,
                   help="checkpoint to apply "
                        "(default: <out>/train/model.ckpt)")
    p.set_defaults(func=_cmd_infer, shorthands={})

    p = sub.add_parser("evaluate",
                       help="score a checkpoint over a dataset split")
    _add_common(p)
    p.add_argument("--data", metavar="DIR", default=None,
                   help="dataset directory (default: <out>/dataset)")
    p.add_argument("--checkpoint", metavar="FILE", default=None,
                   help="checkpoint to score "
                        "(default: <out>/train/model.ckpt)")
    p.add_argument("--split", choices=("train", "test", "all"),
                   default="test", help="dataset split (default: test)")
    p.add_argument("--groups", metavar="A,B", default=None,
                   help="restrict to comma-separated scene groups")
    p.set_defaults(func=_cmd_evaluate, shorthands={})

    p = sub.add_parser("fwi",
                       help="simulated-annealing inversion benchmark")
    _add_common(p)
    p.add_argument("--objects", type=int, choices=(1, 2), default=None,
                   help="number of hidden objects (fwi.n_objects)")
    p.set_defaults(func=_cmd_fwi, shorthands={"objects": "fwi.n_objects"})

    p = sub.add_parser("export-figures",
                       help="write the bundle the figure scripts read")
    _add_common(p)
    p.add_argument("--data", metavar="DIR", default=None,
                   help="dataset directory (default: <out>/dataset)")
    p.add_argument("--checkpoint", metavar="FILE", default=None,
                   help="checkpoint for the model panels "
                        "(default: <run>/model.ckpt)")
    p.add_argument("--run", metavar="DIR", default=None,
                   help="training run directory holding loss.csv "
                        "(default: <out>/train)")
    p.add_argument("--bundle", metavar="DIR", default=None,
                   help="bundle directory (default: <out>/figures-bundle)")
    p.add_argument("--panels", type=int, default=4, metavar="N",
                   help="number of sample rows to export (default: 4)")
    p.set_defaults(func=_cmd_export_figures, shorthands={})

    p = sub.add_parser("selftest", help="run the fast oracle suite")
    _add_common(p)
    p.set_defaults(func=_cmd_selftest, shorthands={})

    return parser


def run(argv: list[str] | None = None) -> int:
    """Parse ``argv`` and execute one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        code = e.code if e.code is not None else 0
        return code if isinstance(code, int) else 2
    try:
        cfg = cf.resolve_config(profile=args.profile,
                                config_file=args.config,
                                overrides=_collect_overrides(args))
    except GprinvError as e:
        print(f"{PROG}: configuration error: {e}", file=sys.stderr)
        print(cf.schema_text(), file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except GprinvError as e:
        print(f"{PROG}: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
