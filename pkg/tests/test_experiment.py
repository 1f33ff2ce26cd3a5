from __future__ import annotations

import json
import math

import numpy as np
import pytest

from soac import experiment as ex
from soac.experiment import BoxStats, ConfigParseError, SeedRow


def row(seed=0, mode="soac", sensor="cam_front_left", trans=1.0, pose=1.0, along=0.0, speed_time=0.0):
    return SeedRow(seed, mode, sensor, 0.1, trans, 2.0, 0.05, pose, along, speed_time)


class TestBoxStats:
    def test_quartiles_and_outlier(self):
        b = BoxStats.from_values([1, 2, 3, 4, 100])
        assert (b.q1, b.median, b.q3) == (2.0, 3.0, 4.0)
        assert b.outliers == [100.0]
        assert (b.whisker_low, b.whisker_high) == (1.0, 4.0)

    def test_matches_numpy_percentiles(self):
        v = np.random.default_rng(0).normal(size=37)
        b = BoxStats.from_values(v)
        np.testing.assert_allclose([b.q1, b.median, b.q3], np.percentile(v, [25, 50, 75]))

    def test_empty_rejected(self):
        with pytest.raises(ex.MissingDataError):
            BoxStats.from_values([])


class TestConfig:
    def test_defaults(self):
        cfg = ex.parse_config("")
        assert cfg.experiment.mode == "soac" and cfg.experiment.seeds == list(range(10))

    def test_bad_value_names_field_and_line(self):
        text = "[experiment]\nmode = \"soac\"\n\n[rig]\nwidth = 2\n"
        with pytest.raises(ConfigParseError, match=r"rig\.width \(line 5\)"):
            ex.parse_config(text, "x.toml")

    def test_unknown_train_key(self):
        with pytest.raises(ConfigParseError, match="unknown train setting.*lr_typo"):
            ex.parse_config("[train]\nlr_typo = 1.0\n")

    def test_invalid_train_value(self):
        with pytest.raises(ConfigParseError, match="patch size"):
            ex.parse_config("[train]\npatch_size = 4\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigParseError, match="extras"):
            ex.parse_config("[extras]\na = 1\n")

    def test_toml_syntax_error(self):
        with pytest.raises(ConfigParseError, match="bad.toml"):
            ex.parse_config("[experiment\n", "bad.toml")

    def test_train_config_takes_seed(self):
        cfg = ex.parse_config("[train]\nepochs = 3\n")
        tc = cfg.train_config(seed=4)
        assert tc.epochs == 3 and tc.seed == 4

    def test_shipped_configs_parse(self):
        for name in ("arc", "straight"):
            cfg = ex.load_config(f"configs/{name}.toml")
            cfg.train_config()
        assert cfg.scene.trajectory == "straight-constant"


class TestRows:
    def test_round_trip(self, tmp_path):
        rows = [row(seed=s, sensor=n, trans=0.1 * s + 1 / 3) for s in range(3) for n in ("a", "b")]
        ex.write_rows(tmp_path / "r.csv", rows)
        back = ex.read_rows(tmp_path / "r.csv")
        assert len(back) == 6
        assert back[1].sensor == "b" and back[1].trans_cm == pytest.approx(1 / 3, abs=1e-6)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ex.MissingDataError):
            ex.read_rows(tmp_path / "none.csv")

    def test_missing_column(self, tmp_path):
        (tmp_path / "r.csv").write_text("seed,mode\n0,soac\n")
        with pytest.raises(ex.MissingDataError, match="missing columns"):
            ex.read_rows(tmp_path / "r.csv")

    def test_overall_is_mean_of_medians(self):
        rows = [row(seed=s, sensor="a", trans=t) for s, t in enumerate([1, 2, 9])]
        rows += [row(seed=s, sensor="b", trans=t) for s, t in enumerate([4, 4, 4])]
        overall = [e for e in ex.boxstats_table(rows) if e["sensor"] == ex.OVERALL and e["metric"] == "trans_cm"]
        assert overall[0]["value"] == pytest.approx(3.0)

    def test_boxstats_csv_is_order_independent(self, tmp_path):
        rows = [row(seed=s, sensor=n, trans=s + len(n)) for s in range(4) for n in ("a", "bb")]
        ex.write_boxstats(tmp_path / "x.csv", rows)
        ex.write_boxstats(tmp_path / "y.csv", rows[::-1])
        assert (tmp_path / "x.csv").read_bytes() == (tmp_path / "y.csv").read_bytes()


class TestDegeneracy:
    def test_perfect_compensation(self):
        rows = [row(seed=s, sensor=n, trans=10.0, pose=1.0, along=-st, speed_time=st)
                for s, st in enumerate([3.0, -5.0, 8.0]) for n in ("a", "b")]
        rep = ex.degeneracy_report(rows)
        assert rep.compensation_ratio == pytest.approx(1.0)
        assert rep.compensated_sensors == 2
        assert "compensation_ratio,1.000000" in rep.format()

    def test_no_time_error_gives_nan(self):
        rep = ex.degeneracy_report([row()])
        assert math.isnan(rep.compensation_ratio)


class TestPipeline:
    def test_generate_calibrate_evaluate(self, tiny_config_file, tmp_path):
        cfg = ex.load_config(tiny_config_file())
        ex.generate(cfg)
        out = ex.calibrate(cfg, seeds=[0, 1])
        assert sorted(p.name for p in (out / "runs").glob("*.csv")) == ["soac_seed000.csv", "soac_seed001.csv"]
        rows = ex.read_rows(out / "per_seed.csv")
        assert len(rows) == 6 and {r.sensor for r in rows} == {"cam_front_left", "cam_front_right", "lidar_top"}
        first = (out / "boxstats.csv").read_bytes()
        _, report = ex.evaluate(cfg)
        assert report is None
        assert (out / "boxstats.csv").read_bytes() == first
        record = json.loads((out / "runs" / "soac_seed000.json").read_text())
        assert record["wall_seconds"] > 0 and len(record["history"]) == 2

    def test_straight_writes_degeneracy(self, tiny_config_file):
        cfg = ex.load_config(tiny_config_file("straight-constant"))
        ex.generate(cfg)
        out = ex.calibrate(cfg, seeds=[0])
        _, report = ex.evaluate(cfg)
        assert report is not None and (out / "degeneracy.txt").exists()

    def test_calibrate_needs_dataset(self, tiny_config_file):
        cfg = ex.load_config(tiny_config_file())
        with pytest.raises(ex.MissingDataError, match="soac generate"):
            ex.calibrate(cfg, seeds=[0])

    def test_unknown_mode(self, tiny_config_file):
        cfg = ex.load_config(tiny_config_file())
        with pytest.raises(ConfigParseError):
            ex.calibrate(cfg, seeds=[0], mode="fancy")
