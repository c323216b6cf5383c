"""Bundle, index, GPRT, and loss-CSV reader contracts."""

import struct

import numpy as np
import pytest

from conftest import HEADER, make_bundle, write_gprt
from gprfig.bundle import (ROLES, BundleError, load_loss_csv, panel_image,
                           read_bundle, read_gprt)


def test_read_bundle_happy_path(bundle_dir):
    b = read_bundle(bundle_dir)
    assert b.norm.bscan_lo == -50.0 and b.norm.bscan_hi == 75.0
    assert b.norm.perm_lo == 0.0 and b.norm.perm_hi == 32.0
    assert b.sample_ids == ("s-000", "s-001", "s-002", "s-003")
    assert b.loss_csv.is_file() and b.metrics_csv.is_file()
    for sid in b.sample_ids:
        assert sorted(b.panels[sid]) == sorted(ROLES)


def test_missing_index_is_error(tmp_path):
    with pytest.raises(BundleError, match="cannot read"):
        read_bundle(tmp_path)


def test_bad_magic_line_is_error(bundle_dir):
    index = bundle_dir / "index.txt"
    index.write_text("something-else\t1\n" + index.read_text())
    with pytest.raises(BundleError, match="figure bundle"):
        read_bundle(bundle_dir)


def test_unknown_role_is_error(bundle_dir):
    index = bundle_dir / "index.txt"
    index.write_text(index.read_text()
                     + "panel\ts-000\thologram\tpanels/s-000-fwi.gprt\n")
    with pytest.raises(BundleError, match="hologram"):
        read_bundle(bundle_dir)


def test_missing_referenced_file_is_error(bundle_dir):
    (bundle_dir / "panels" / "s-001-fwi.gprt").unlink()
    with pytest.raises(BundleError, match="missing panel image"):
        read_bundle(bundle_dir)


def test_missing_norm_record_is_error(bundle_dir):
    index = bundle_dir / "index.txt"
    lines = [ln for ln in index.read_text().splitlines()
             if not ln.startswith("norm\t")]
    index.write_text("\n".join(lines) + "\n")
    with pytest.raises(BundleError, match="no norm record"):
        read_bundle(bundle_dir)


def test_gprt_round_trip(tmp_path):
    a = np.linspace(0.0, 1.0, 12 * 5, dtype=np.float32).reshape(12, 5)
    write_gprt(tmp_path / "t.gprt", a)
    back = read_gprt(tmp_path / "t.gprt")
    assert back.shape == (12, 5, 1)
    assert np.array_equal(back[:, :, 0], a)


def test_gprt_truncation_and_magic_errors(tmp_path):
    p = tmp_path / "t.gprt"
    write_gprt(p, np.ones((4, 4)))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(BundleError, match="malformed"):
        read_gprt(p)
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(BundleError, match="bad magic"):
        read_gprt(p)
    bad_version = b"GPRT" + struct.pack("<IIII", 9, 1, 1, 1) + b"\x00" * 4
    p.write_bytes(bad_version)
    with pytest.raises(BundleError, match="version"):
        read_gprt(p)


def test_load_loss_csv_columns(bundle_dir):
    cols = load_loss_csv(bundle_dir / "loss.csv")
    assert sorted(cols) == sorted(HEADER.split(","))
    assert cols["epoch"][0] == 1.0 and cols["epoch"][-1] == 150.0
    assert (cols["test_loss"] > cols["train_loss"]).all()


def test_load_loss_csv_rejects_empty_and_malformed(tmp_path):
    p = tmp_path / "loss.csv"
    p.write_text(HEADER + "\n")
    with pytest.raises(BundleError, match="no data rows"):
        load_loss_csv(p)
    p.write_text("nope\n1,2\n")
    with pytest.raises(BundleError, match="expected header"):
        load_loss_csv(p)
    p.write_text(HEADER + "\n1,2,3,4,5,6,banana\n")
    with pytest.raises(BundleError, match="non-numeric"):
        load_loss_csv(p)


def test_panel_image_denormalizes_by_role(tmp_path):
    root = make_bundle(tmp_path / "b", n_samples=1, size=4)
    write_gprt(root / "panels" / "s-000-noisy.gprt", np.full((4, 4), 0.5))
    write_gprt(root / "panels" / "s-000-predicted.gprt", np.full((4, 4), 0.5))
    b = read_bundle(root)
    field = panel_image(b, "s-000", "noisy")
    perm = panel_image(b, "s-000", "predicted")
    assert field == pytest.approx(np.full((4, 4), 12.5))   # 0.5*125 - 50
    assert perm == pytest.approx(np.full((4, 4), 16.0))    # 0.5*32
    with pytest.raises(BundleError, match="no 'fwi' panel"):
        panel_image(b, "s-xyz", "fwi")
