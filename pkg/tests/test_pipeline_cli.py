import json
import shutil
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from gridcp import cli, pipeline
from gridcp.pipeline import (PipelineConfig, load_config, run_apply,
                             run_calibrate, run_coverage_sim, run_evaluate,
                             run_quantiles, run_report, run_synth)
from gridcp.storage import DataError, read_json

BASE_CONFIG = {
    "coverage_levels": ["1/2", "9/10"],
    "n_calibration": 24,
    "n_test": 12,
    "method": "cqr",
    "synth": {"coarse_dims": [2, 3], "upscale_factor": 4, "member_count": 24},
    "trial_count": 6,
    "sim_calibration_size": 19,
    "sim_test_draws": 40,
    "sim_subgrid_points": 16,
}


def _config_dict(base: Path, **overrides) -> dict:
    cfg = dict(BASE_CONFIG)
    cfg["dataset_dir"] = str(base / "ds")
    cfg["output_dir"] = str(base / "out")
    cfg.update(overrides)
    return cfg


def _write_config(base: Path, **overrides) -> Path:
    path = base / "cfg.json"
    path.write_text(json.dumps(_config_dict(base, **overrides)))
    return path


def _tree_bytes(root: Path, skip=("run.json", "config_echo.json", "summary.json")):
    """Relative path -> content for every file, minus config-echoing JSON."""
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name not in skip:
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One fully run tiny pipeline, reused by the read-only tests."""
    base = tmp_path_factory.mktemp("cliws")
    cfg_path = _write_config(base)
    for stage in ("synth", "quantiles", "calibrate", "apply", "evaluate"):
        assert cli.main([stage, "--config", str(cfg_path)]) == 0
    return base, cfg_path


class TestConfig:
    def test_round_trip(self):
        cfg = PipelineConfig.from_dict(_config_dict(Path("/tmp/x")))
        assert PipelineConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(DataError, match="unknown config keys.*n_records"):
            PipelineConfig.from_dict({"n_records": 5})

    def test_invalid_values_become_data_errors(self):
        with pytest.raises(DataError, match="invalid config"):
            PipelineConfig.from_dict({"n_calibration": 0})
        with pytest.raises(DataError, match="invalid config"):
            PipelineConfig.from_dict({"method": "oracle"})

    def test_coverage_levels_imply_tails(self):
        cfg = PipelineConfig.from_dict({"coverage_levels": ["4/5"]})
        assert cfg.scheme.coverage_levels == (Fraction(4, 5),)
        assert cfg.scheme.quantile_levels == (Fraction(1, 10), Fraction(9, 10))

    def test_explicit_quantile_levels(self):
        cfg = PipelineConfig.from_dict({
            "coverage_levels": [0.5],
            "quantile_levels": [0.25, 0.5, 0.75],
        })
        assert cfg.scheme.quantile_levels == (
            Fraction(1, 4), Fraction(1, 2), Fraction(3, 4))

    def test_defaults_without_level_keys(self):
        cfg = PipelineConfig.from_dict({"n_test": 3})
        assert len(cfg.scheme.coverage_levels) == 5
        assert cfg.n_test == 3

    def test_load_config_requires_object(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("[1, 2]")
        with pytest.raises(DataError, match="JSON object"):
            load_config(path)


class TestCliExitCodes:
    def test_no_subcommand(self, capsys):
        assert cli.main([]) == 1
        assert "subcommand is required" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert cli.main(["frobnicate"]) == 1

    def test_bad_level_is_usage_error(self, capsys):
        assert cli.main(["synth", "--level", "1.5"]) == 1
        assert "error" in capsys.readouterr().err

    def test_version(self, capsys):
        assert cli.main(["--version"]) == 0
        assert "gridcp" in capsys.readouterr().out

    def test_help(self, capsys):
        assert cli.main(["--help"]) == 0

    def test_missing_dataset_is_data_error(self, tmp_path, capsys):
        cfg_path = _write_config(tmp_path)
        assert cli.main(["calibrate", "--config", str(cfg_path)]) == 2
        err = capsys.readouterr().err
        assert "missing dataset split" in err

    def test_broken_config_is_data_error(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        path.write_text("{nope")
        assert cli.main(["synth", "--config", str(path)]) == 2

    def test_unknown_config_key_is_data_error(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"surprise": 1}))
        assert cli.main(["synth", "--config", str(path)]) == 2
        assert "unknown config keys" in capsys.readouterr().err

    def test_raw_method_cannot_calibrate(self, tmp_path, capsys):
        cfg_path = _write_config(tmp_path, method="raw")
        assert cli.main(["synth", "--config", str(cfg_path)]) == 0
        assert cli.main(["calibrate", "--config", str(cfg_path)]) == 2
        assert "uses no calibration" in capsys.readouterr().err

    def test_band_violation_exits_3(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setattr(
            pipeline, "_sim_trial",
            lambda payload: np.zeros(len(payload[9])))
        cfg_path = _write_config(tmp_path)
        assert cli.main(["coverage-sim", "--config", str(cfg_path)]) == 3
        captured = capsys.readouterr()
        assert "coverage band violated" in captured.err
        assert "VIOLATION" in captured.out


class TestCliMatchesLibrary:
    def test_artifacts_are_identical(self, workspace, tmp_path):
        cli_base, _ = workspace
        cfg = PipelineConfig.from_dict(_config_dict(tmp_path))
        run_synth(cfg)
        run_quantiles(cfg)
        run_calibrate(cfg)
        run_apply(cfg)
        run_evaluate(cfg)
        assert _tree_bytes(tmp_path / "ds") == _tree_bytes(cli_base / "ds")
        assert _tree_bytes(tmp_path / "out") == _tree_bytes(cli_base / "out")

    def test_summary_metrics_identical(self, workspace, tmp_path):
        cli_base, _ = workspace
        cfg = PipelineConfig.from_dict(_config_dict(tmp_path))
        run_synth(cfg)
        run_calibrate(cfg)
        run_apply(cfg)
        run_evaluate(cfg)
        mine = read_json(tmp_path / "out" / "cqr" / "summary.json")
        theirs = read_json(cli_base / "out" / "cqr" / "summary.json")
        assert mine["metrics"] == theirs["metrics"]


class TestReproducibility:
    def test_repeated_runs_are_byte_identical(self, tmp_path, monkeypatch):
        snapshots = []
        for sub in ("a", "b"):
            base = tmp_path / sub
            base.mkdir()
            monkeypatch.chdir(base)
            cfg = PipelineConfig.from_dict(
                {**BASE_CONFIG, "dataset_dir": "ds", "output_dir": "out"})
            run_synth(cfg)
            run_calibrate(cfg)
            run_apply(cfg)
            run_evaluate(cfg)
            run_report(cfg)
            # relative paths in the config echo, so nothing is excluded
            snapshots.append(_tree_bytes(base, skip=()))
        assert snapshots[0] == snapshots[1]

    def test_worker_count_does_not_change_synth(self, tmp_path):
        trees = []
        for jobs in (1, 3):
            base = tmp_path / f"j{jobs}"
            base.mkdir()
            cfg = PipelineConfig.from_dict(_config_dict(base, jobs=jobs))
            run_synth(cfg)
            # the config echo records the jobs value itself; grids and
            # manifests must not depend on it
            trees.append(_tree_bytes(base / "ds"))
        assert trees[0] == trees[1]

    def test_worker_count_does_not_change_sim(self, tmp_path):
        outputs = []
        for jobs in (1, 2):
            base = tmp_path / f"j{jobs}"
            base.mkdir()
            cfg = PipelineConfig.from_dict(
                _config_dict(base, jobs=jobs, method="split-cp"))
            ok, _ = run_coverage_sim(cfg)
            assert ok
            outputs.append(
                (base / "out" / "coverage_sim" / "trials.csv").read_bytes())
        assert outputs[0] == outputs[1]

    def test_seed_flag_overrides_noise(self, tmp_path, capsys):
        cfg_path = _write_config(tmp_path)
        assert cli.main(["synth", "--config", str(cfg_path), "--seed", "99"]) == 0
        echo = read_json(tmp_path / "ds" / "config_echo.json")
        assert echo["synth"]["noise_seed"] == 99
        # same config, default seed: the truth grids must differ
        other = tmp_path / "other"
        other.mkdir()
        cfg2 = _write_config(other)
        assert cli.main(["synth", "--config", str(cfg2)]) == 0
        a = (tmp_path / "ds" / "calibration" / "r00000" / "truth.cgf").read_bytes()
        b = (other / "ds" / "calibration" / "r00000" / "truth.cgf").read_bytes()
        assert a != b


class TestPipelineStages:
    def test_dataset_shape(self, workspace):
        base, _ = workspace
        manifest = read_json(base / "ds" / "calibration" / "dataset.json")
        assert manifest["record_count"] == 24
        manifest = read_json(base / "ds" / "test" / "dataset.json")
        assert manifest["record_count"] == 12
        echo = read_json(base / "ds" / "config_echo.json")
        assert echo["method"] == "cqr"

    def test_evaluate_without_stored_quantiles_matches(self, workspace, tmp_path):
        base, cfg_path = workspace
        stored = (base / "out" / "cqr" / "summary.json").read_bytes()
        cfg = load_config(cfg_path)
        shutil.rmtree(base / "out" / "quantiles")
        try:
            run_evaluate(cfg)
            fresh = (base / "out" / "cqr" / "summary.json").read_bytes()
        finally:
            run_quantiles(cfg)
        assert fresh == stored

    def test_report_collects_methods(self, workspace, capsys):
        base, cfg_path = workspace
        assert cli.main(["report", "--config", str(cfg_path)]) == 0
        report_dir = base / "out" / "report"
        picp = (report_dir / "picp.csv").read_text().splitlines()
        assert picp[0] == "method,0.5,0.9"
        assert any(line.startswith("cqr,") for line in picp)
        assert (report_dir / "picp_chart.svg").exists()

    def test_report_without_summaries(self, tmp_path):
        cfg = PipelineConfig.from_dict(_config_dict(tmp_path))
        with pytest.raises(DataError, match="evaluate"):
            run_report(cfg)

    def test_sim_rejects_raw(self, tmp_path):
        cfg = PipelineConfig.from_dict(_config_dict(tmp_path, method="raw"))
        with pytest.raises(DataError, match="split-cp or cqr"):
            run_coverage_sim(cfg)

    def test_sim_rejects_oversized_subgrid(self, tmp_path):
        cfg = PipelineConfig.from_dict(
            _config_dict(tmp_path, sim_subgrid_points=1000))
        with pytest.raises(DataError, match="exceeds"):
            run_coverage_sim(cfg)

    def test_sim_outputs(self, tmp_path):
        cfg = PipelineConfig.from_dict(_config_dict(tmp_path))
        ok, stats = run_coverage_sim(cfg)
        assert ok
        sim_dir = tmp_path / "out" / "coverage_sim"
        trials = (sim_dir / "trials.csv").read_text().splitlines()
        assert trials[0] == "trial,0.5,0.9"
        assert len(trials) == 1 + cfg.trial_count
        summary = (sim_dir / "summary.csv").read_text().splitlines()
        assert summary[0].startswith("level,mean_coverage")
        for key in ("0.5", "0.9"):
            row = stats["levels"][key]
            assert row["band_lower"] <= row["mean_coverage"] <= row["band_upper"]
