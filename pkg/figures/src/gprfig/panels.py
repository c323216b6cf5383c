"""Sample-by-role panel grids: B-scans and permittivity maps side by side.

One row per sample, one column per role.  All B-scan panels share a
diverging color scale fixed to [-50, 75] V/m (centered at zero) and all
permittivity panels share a perceptually uniform scale fixed to
[0, 32]; one colorbar per scale sits at the right edge.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
from matplotlib import colors  # noqa: E402

from .bundle import (FIELD_ROLES, ROLE_TITLES, ROLES, Bundle,  # noqa: E402
                     BundleError, panel_image, read_bundle)

FIELD_LIMITS = (-50.0, 75.0)
PERM_LIMITS = (0.0, 32.0)
FIELD_CMAP = "seismic"
PERM_CMAP = "viridis"


def _check_layout(bundle: Bundle, sample_ids: list[str],
                  roles: tuple[str, ...]) -> None:
    unknown = [r for r in roles if r not in ROLES]
    if unknown:
        raise BundleError(f"unknown roles {unknown}; expected subset of "
                          f"{ROLES}")
    gaps = []
    for sid in sample_ids:
        have = bundle.panels.get(sid, {})
        if not have:
            gaps.append(f"{sid}: sample not in bundle")
            continue
        missing = [r for r in roles if r not in have]
        if missing:
            gaps.append(f"{sid}: missing {', '.join(missing)}")
    if gaps:
        raise BundleError("incomplete panel layout: " + "; ".join(gaps))


def build_panels_figure(bundle: Bundle,
                        sample_ids: list[str] | None = None,
                        roles: tuple[str, ...] = ROLES) -> "plt.Figure":
    """Assemble the grid figure; raises ``BundleError`` on layout gaps."""
    ids = list(sample_ids) if sample_ids is not None \
        else list(bundle.sample_ids)
    if not ids:
        raise BundleError("bundle holds no panel samples")
    _check_layout(bundle, ids, roles)

    n_rows, n_cols = len(ids), len(roles)
    fig, axes = plt.subplots(
        n_rows, n_cols, squeeze=False,
        figsize=(2.3 * n_cols + 1.2, 2.1 * n_rows))
    field_norm = colors.TwoSlopeNorm(
        vcenter=0.0, vmin=FIELD_LIMITS[0], vmax=FIELD_LIMITS[1])
    perm_norm = colors.Normalize(vmin=PERM_LIMITS[0], vmax=PERM_LIMITS[1])
    field_im = perm_im = None
    for i, sid in enumerate(ids):
        for j, role in enumerate(roles):
            ax = axes[i][j]
            img = panel_image(bundle, sid, role)
            if role in FIELD_ROLES:
                field_im = ax.imshow(img, cmap=FIELD_CMAP, norm=field_norm,
                                     aspect="auto")
            else:
                perm_im = ax.imshow(img, cmap=PERM_CMAP, norm=perm_norm,
                                    aspect="auto")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(ROLE_TITLES[role], fontsize=10)
            if j == 0:
                ax.set_ylabel(sid, fontsize=8)
    fig.subplots_adjust(left=0.06, right=0.86, wspace=0.08, hspace=0.12)
    if field_im is not None:
        cax = fig.add_axes((0.88, 0.55, 0.02, 0.35))
        fig.colorbar(field_im, cax=cax).set_label("V/m", fontsize=8)
    if perm_im is not None:
        cax = fig.add_axes((0.88, 0.10, 0.02, 0.35))
        fig.colorbar(perm_im, cax=cax).set_label(
            "relative permittivity", fontsize=8)
    return fig


def render_panels(bundle_dir: str | Path, out_png: str | Path,
                  sample_ids: list[str] | None = None,
                  roles: tuple[str, ...] = ROLES) -> Path:
    """Render the panel grid for a bundle; returns the PNG path."""
    bundle = read_bundle(bundle_dir)
    fig = build_panels_figure(bundle, sample_ids, roles)
    out = Path(out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gprfig-panels",
        description="Render a sample-by-role panel grid from a bundle.")
    parser.add_argument("bundle", help="bundle directory holding index.txt")
    parser.add_argument("out", help="output PNG path")
    parser.add_argument("--samples", default=None, metavar="A,B",
                        help="comma-separated sample ids "
                             "(default: all, in index order)")
    parser.add_argument("--roles", default=None, metavar="A,B",
                        help=f"comma-separated roles (default: all of "
                             f"{','.join(ROLES)})")
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    ids = [s for s in args.samples.split(",") if s] if args.samples else None
    roles = tuple(r for r in args.roles.split(",") if r) if args.roles \
        else ROLES
    try:
        out = render_panels(args.bundle, args.out, ids, roles)
    except BundleError as e:
        print(f"gprfig-panels: {e}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
