"""Training/testing loss-curve figure.

Two panels on a shared epoch axis: the per-stage losses (denoising l1
and inversion l2) on the left, the combined loss on the right, train
versus test, log-scale y.  Zero-valued series (a single-stage run logs
l1 = 0) are left off the log plot.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .bundle import Bundle, BundleError, load_loss_csv, read_bundle  # noqa: E402

_SERIES = (
    # axis 0: per-stage; axis 1: combined
    (0, "train_l1", "train l1", "tab:blue", "-"),
    (0, "test_l1", "test l1", "tab:blue", "--"),
    (0, "train_l2", "train l2", "tab:red", "-"),
    (0, "test_l2", "test l2", "tab:red", "--"),
    (1, "train_loss", "train", "tab:blue", "-"),
    (1, "test_loss", "test", "tab:red", "--"),
)


def build_loss_figure(bundle: Bundle) -> "plt.Figure":
    """Assemble the two-panel loss figure from the bundle's loss CSV."""
    cols = load_loss_csv(bundle.loss_csv)
    epochs = cols["epoch"]
    fig, axes = plt.subplots(1, 2, figsize=(11.0, 4.2))
    for axis, key, label, color, style in _SERIES:
        y = cols[key]
        keep = y > 0.0
        if keep.any():
            axes[axis].plot(epochs[keep], y[keep], style, color=color,
                            label=label, linewidth=1.4)
    for ax, title in zip(axes, ("stage losses", "combined loss")):
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(loc="upper right", fontsize=8)
        if epochs[-1] > epochs[0]:
            ax.set_xlim(epochs[0], epochs[-1])
    fig.tight_layout()
    return fig


def render_loss_curves(bundle_dir: str | Path, out_png: str | Path) -> Path:
    """Render the loss figure for a bundle; returns the PNG path."""
    bundle = read_bundle(bundle_dir)
    fig = build_loss_figure(bundle)
    out = Path(out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gprfig-loss",
        description="Render train/test loss curves from a figure bundle.")
    parser.add_argument("bundle", help="bundle directory holding index.txt")
    parser.add_argument("out", help="output PNG path")
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        out = render_loss_curves(args.bundle, args.out)
    except BundleError as e:
        print(f"gprfig-loss: {e}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
