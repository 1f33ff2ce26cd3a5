from __future__ import annotations

import pytest

from soac.cli import main


class TestCli:
    def test_full_cycle(self, tiny_config_file, tmp_path, capsys):
        cfg = str(tiny_config_file())
        assert main(["generate", "--config", cfg]) == 0
        assert "3 cameras" in capsys.readouterr().out
        assert main(["calibrate", "--config", cfg, "--seed", "0"]) == 0
        assert main(["baseline", "--config", cfg, "--seed", "0", "--seed", "1"]) == 0
        out = capsys.readouterr().out
        assert "[baseline seed 1]" in out
        assert main(["eval", "--config", cfg]) == 0
        out = capsys.readouterr().out
        assert "baseline" in out and "soac" in out
        runs = sorted(p.name for p in (tmp_path / "results" / "runs").glob("*.csv"))
        assert runs == ["baseline_seed000.csv", "baseline_seed001.csv", "soac_seed000.csv"]

    def test_out_and_mode_overrides(self, tiny_config_file, tmp_path):
        cfg = str(tiny_config_file())
        data, res = tmp_path / "d2", tmp_path / "r2"
        assert main(["generate", "--config", cfg, "--out", str(data)]) == 0
        assert main(["calibrate", "--config", cfg, "--data", str(data), "--out", str(res),
                     "--seed", "0", "--mode", "soac-no-grid"]) == 0
        assert (res / "runs" / "soac-no-grid_seed000.csv").exists()

    def test_gradcheck(self, capsys):
        assert main(["gradcheck", "--configs", "2"]) == 0
        assert "result: PASS" in capsys.readouterr().out
        assert main(["gradcheck", "--configs", "2", "--perturb", "0.1"]) == 1
        assert "result: FAIL" in capsys.readouterr().out

    def test_missing_dataset_exits_2(self, tiny_config_file, capsys):
        assert main(["calibrate", "--config", str(tiny_config_file())]) == 2
        assert "soac generate" in capsys.readouterr().err

    def test_bad_config_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[rig]\nwidth = 1\n")
        assert main(["generate", "--config", str(bad)]) == 2
        assert "rig.width (line 2)" in capsys.readouterr().err

    def test_missing_config_file_exits_2(self, tmp_path):
        assert main(["eval", "--config", str(tmp_path / "none.toml")]) == 2

    def test_eval_without_runs_exits_2(self, tiny_config_file):
        assert main(["eval", "--config", str(tiny_config_file())]) == 2

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 2
