"""Synthetic bundle factory shared by the figure tests.

Bundles are fabricated from scratch (GPRT bytes included) so the tests
exercise only this package's published input contract.
"""

import math
import struct

import numpy as np
import pytest

from gprfig.bundle import ROLES

HEADER = "epoch,train_loss,train_l1,train_l2,test_loss,test_l1,test_l2"


def write_gprt(path, array):
    a = np.asarray(array, dtype="<f4")
    if a.ndim == 2:
        a = a[:, :, None]
    rows, cols, ch = a.shape
    path.write_bytes(b"GPRT" + struct.pack("<IIII", 1, rows, cols, ch)
                     + np.ascontiguousarray(a).tobytes())


def loss_csv_text(epochs: int) -> str:
    rows = [HEADER]
    for e in range(1, epochs + 1):
        l1 = 2.0 * math.exp(-e / 40.0)
        l2 = 1.0 * math.exp(-e / 60.0)
        comb = 10.0 * l1 + l2
        rows.append(f"{e},{comb!r},{l1!r},{l2!r},"
                    f"{1.1 * comb!r},{1.1 * l1!r},{1.1 * l2!r}")
    return "\n".join(rows) + "\n"


def make_bundle(root, n_samples=4, epochs=150, size=16, seed=0):
    rng = np.random.default_rng(seed)
    (root / "panels").mkdir(parents=True)
    lines = ["gprinv-figure-bundle\t1", "norm\t-50.0\t75.0\t0.0\t32.0",
             "loss\tloss.csv", "metrics\tmetrics.csv"]
    for i in range(n_samples):
        sid = f"s-{i:03d}"
        for role in ROLES:
            rel = f"panels/{sid}-{role}.gprt"
            write_gprt(root / rel, rng.random((size, size)))
            lines.append(f"panel\t{sid}\t{role}\t{rel}")
    (root / "loss.csv").write_text(loss_csv_text(epochs), encoding="utf-8")
    (root / "metrics.csv").write_text(
        "id,group,ssim,mse,mae,mre_pct,stage\n", encoding="utf-8")
    (root / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


@pytest.fixture()
def bundle_dir(tmp_path):
    return make_bundle(tmp_path / "bundle")
