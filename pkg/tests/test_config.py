"""Tests for profiles, the config-file grammar, and config plumbing."""

import dataclasses

import pytest

from gprinv import config as cf
from gprinv import dataset as ds
from gprinv.errors import CorruptFile, OutOfRange, UnknownConfigKey


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------

class TestProfiles:
    def test_both_profiles_build(self):
        paper = cf.profile_config("paper")
        desk = cf.profile_config("desk")
        assert paper.run.profile == "paper"
        assert desk.run.profile == "desk"

    def test_unknown_profile(self):
        with pytest.raises(OutOfRange):
            cf.profile_config("laptop")

    def test_paper_profile_is_full_scale(self):
        cfg = cf.profile_config("paper")
        assert cfg.grid.soil_width == 1.5
        assert cfg.grid.cell_size == 0.0025
        assert cfg.dataset.image_rows == 128
        assert cfg.norm.bscan_lo == -50.0 and cfg.norm.bscan_hi == 75.0
        assert cfg.train.width_factor == 1.0

    def test_desk_profile_is_reduced_but_valid(self):
        cfg = cf.profile_config("desk")
        assert cfg.grid.soil_width < 1.5
        assert cfg.dataset.image_rows % 16 == 0
        # scan stays inside the soil block with antenna offsets applied
        positions = cfg.scan.positions()
        assert positions.min() + cfg.source.tx_offset_x > 0
        assert positions.max() + cfg.source.rx_offset_x < cfg.grid.soil_width
        # object ranges stay inside the soil block
        assert cfg.ranges.center_x[1] + cfg.ranges.size[1] \
            < cfg.grid.soil_width
        assert cfg.ranges.center_y[1] + cfg.ranges.size[1] \
            < cfg.grid.soil_depth
        assert cfg.ranges.center_y[0] - cfg.ranges.size[1] > 0
        # the soil grid divides evenly into cells
        rows = cfg.grid.soil_depth / cfg.grid.cell_size
        assert rows == int(rows)

    def test_profiles_differ(self):
        assert cf.profile_config("paper") != cf.profile_config("desk")


# ---------------------------------------------------------------------------
# Schema and assignments
# ---------------------------------------------------------------------------

class TestAssignments:
    def test_apply_typed_values(self):
        cfg = cf.profile_config("desk")
        out = cf.apply_assignments(cfg, {
            "run.seed": "42",
            "grid.cell_size": "0.005",
            "train.lr": "3e-4",
            "train.auto_balance": "true",
            "ranges.eps_r": "3.0, 20.0",
            "ranges.shapes": "circle,rectangle",
            "grid.dt": "none",
        })
        assert out.run.seed == 42
        assert out.grid.cell_size == 0.005
        assert out.train.lr == 3e-4
        assert out.train.auto_balance is True
        assert out.ranges.eps_r == (3.0, 20.0)
        assert out.ranges.shapes == ("circle", "rectangle")
        assert out.grid.dt is None
        # the input config is untouched
        assert cfg.run.seed == 0

    def test_unknown_keys_are_hard_errors(self):
        cfg = cf.profile_config("desk")
        with pytest.raises(UnknownConfigKey):
            cf.apply_assignments(cfg, {"grid.cellsize": "0.005"})
        with pytest.raises(UnknownConfigKey):
            cf.apply_assignments(cfg, {"grids.cell_size": "0.005"})
        with pytest.raises(UnknownConfigKey):
            cf.apply_assignments(cfg, {"cell_size": "0.005"})

    def test_bad_values_are_reported_with_key(self):
        cfg = cf.profile_config("desk")
        with pytest.raises(OutOfRange, match="train.lr"):
            cf.apply_assignments(cfg, {"train.lr": "fast"})
        with pytest.raises(OutOfRange, match="train.auto_balance"):
            cf.apply_assignments(cfg, {"train.auto_balance": "maybe"})
        with pytest.raises(OutOfRange, match="ranges.eps_r"):
            cf.apply_assignments(cfg, {"ranges.eps_r": "1,2,3"})

    def test_domain_validation_still_applies(self):
        cfg = cf.profile_config("desk")
        with pytest.raises(OutOfRange):
            cf.apply_assignments(cfg, {"train.model": "resnet"})
        with pytest.raises(OutOfRange):
            cf.apply_assignments(cfg, {"grid.pml_cells": "1"})

    def test_profile_reassignment_rejected(self):
        cfg = cf.profile_config("desk")
        with pytest.raises(OutOfRange):
            cf.apply_assignments(cfg, {"run.profile": "paper"})

    def test_schema_lists_every_key(self):
        keys = cf.schema_keys()
        assert "grid.cell_size" in keys
        assert "train.width_factor" in keys
        assert "fwi.gamma" in keys
        assert "norm.bscan_lo" in keys
        text = cf.schema_text()
        for key in keys:
            assert key in text


# ---------------------------------------------------------------------------
# Config file parsing and resolution
# ---------------------------------------------------------------------------

class TestConfigFile:
    def test_parse_and_resolve(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text(
            "# a comment\n"
            "run.profile = paper\n"
            "\n"
            "run.seed = 9   # trailing comment\n"
            "train.epochs = 3\n")
        cfg = cf.resolve_config(config_file=p)
        assert cfg.run.profile == "paper"
        assert cfg.run.seed == 9
        assert cfg.train.epochs == 3
        # the rest is the paper profile
        assert cfg.grid.soil_width == 1.5

    def test_profile_argument_wins_over_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("run.profile = paper\n")
        cfg = cf.resolve_config(profile="desk", config_file=p)
        assert cfg.run.profile == "desk"

    def test_overrides_win_over_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("train.epochs = 3\n")
        cfg = cf.resolve_config(config_file=p,
                                overrides={"train.epochs": "7"})
        assert cfg.train.epochs == 7

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("train.epochs 3\n")
        with pytest.raises(CorruptFile):
            cf.parse_config_file(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CorruptFile):
            cf.parse_config_file(tmp_path / "absent.cfg")

    def test_resolved_text_round_trips(self, tmp_path):
        cfg = cf.resolve_config(profile="desk",
                                overrides={"run.seed": "5",
                                           "train.model": "smrf",
                                           "fwi.gamma": "0.9"})
        p = tmp_path / "dump.cfg"
        p.write_text(cf.resolved_text(cfg))
        again = cf.resolve_config(config_file=p)
        assert again == cfg

    def test_config_hash_tracks_content(self):
        a = cf.resolve_config(profile="desk")
        b = cf.resolve_config(profile="desk", overrides={"run.seed": "1"})
        assert cf.config_hash(a) == cf.config_hash(cf.resolve_config(
            profile="desk"))
        assert cf.config_hash(a) != cf.config_hash(b)
        assert len(cf.config_hash(a)) == 64

    def test_config_hash_ignores_plumbing_keys(self):
        a = cf.resolve_config(profile="desk")
        for key, value in (("run.workers", "7"), ("run.out_dir", "elsewhere")):
            b = cf.resolve_config(profile="desk", overrides={key: value})
            assert cf.config_hash(b) == cf.config_hash(a), key
            assert cf.resolved_text(b) != cf.resolved_text(a)


# ---------------------------------------------------------------------------
# Materialized module configs
# ---------------------------------------------------------------------------

class TestMaterialization:
    def test_dataset_build_config(self, tmp_path):
        cfg = cf.resolve_config(profile="desk",
                                overrides={"run.seed": "3",
                                           "dataset.n_one": "2",
                                           "dataset.n_two": "0"})
        bc = cf.dataset_build_config(cfg, tmp_path / "data")
        assert bc.master_seed == 3
        assert bc.n_one == 2 and bc.n_two == 0
        assert bc.image_size == (64, 64)
        assert bc.norm == cfg.norm
        assert bc.grid == cfg.grid
        assert bc.config_hash == cf.config_hash(cfg)
        assert isinstance(bc, ds.DatasetBuildConfig)

    @pytest.mark.parametrize("model,kind,use_mrf,in_ch", [
        ("dmrf", "dmrf", True, 2),
        ("smrf", "smrf", True, 1),
        ("nomrf", "smrf", False, 1),
    ])
    def test_model_config(self, model, kind, use_mrf, in_ch):
        cfg = cf.resolve_config(profile="desk",
                                overrides={"train.model": model,
                                           "train.epochs": "2"})
        mc = cf.model_config(cfg)
        assert mc.kind == kind
        assert mc.stage2.use_mrf is use_mrf
        assert mc.stage2.in_channels == in_ch
        assert mc.epochs == 2
        assert mc.seed == cfg.run.seed

    def test_model_config_training_mode(self):
        cfg = cf.resolve_config(profile="desk",
                                overrides={"train.training": "separate"})
        assert cf.model_config(cfg).end_to_end is False

    def test_fwi_materialization(self):
        cfg = cf.resolve_config(profile="desk",
                                overrides={"fwi.t0": "2.5",
                                           "fwi.known_field_seed": "7"})
        sim = cf.fwi_sim_config(cfg)
        sched = cf.fwi_schedule(cfg)
        assert sim.field_seed == 7
        assert sim.grid == cfg.grid
        assert sched.t0 == 2.5
        auto = cf.resolve_config(profile="desk")
        assert cf.fwi_schedule(auto).t0 is None
        assert cf.fwi_sim_config(auto).field_seed is None

    def test_fwi_knob_validation(self):
        with pytest.raises(OutOfRange):
            cf.FwiKnobs(n_objects=3)
        with pytest.raises(OutOfRange):
            cf.FwiKnobs(t0=-1.0)


def test_frozen_sections_cannot_be_mutated():
    cfg = cf.profile_config("desk")
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.run.seed = 1  # type: ignore[misc]
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.train = cfg.train  # type: ignore[misc]
