"""
Tests for the command-line entry point and run comparison.

Verifies:
1. Exit codes: 0 on success, 2 for invalid input, 3 for numeric failures
2. compare_runs pairs checkpoints and names the lower-error sampler
3. Mismatched runs are refused
"""

import json
from unittest.mock import patch

import pytest

from app.core.errors import ConfigError, NumericError
from app.schemas.experiment_schemas import ChainSummary, CheckpointSummary, RunManifest
from app.services.comparison import compare_runs, format_report
from main import main


def make_manifest(errors, label="RB-SHMC", kind="rb_shmc_particle", experiment="dyson", histogram=None):
    checkpoints = [
        CheckpointSummary(iteration=100 * (k + 1), evolution_time=float(k + 1), cpu_time_s=0.5 * (k + 1),
                          relative_error=error)
        for k, error in enumerate(errors)
    ]
    chain = ChainSummary(label=label, kind=kind, chain_index=0, seed=1, n_iterations=100 * len(errors),
                         acceptance_rate=0.9, evolution_time=float(len(errors)), cpu_time_s=1.0, grad_time_s=0.5,
                         checkpoints=checkpoints)
    config = {"experiment": experiment, "histogram": histogram or {"lo": -1.6, "hi": 1.6, "n_bins": 64}}
    return RunManifest(experiment=experiment, version="1.0.0", created_at="2026-01-01T00:00:00+00:00",
                       config=config, chains=[chain])


def write_manifest(path, manifest):
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").write_text(manifest.model_dump_json(), encoding="utf-8")
    return str(path)


class TestCompareRuns:
    """Test suite for checkpoint-by-checkpoint comparison."""

    def test_run_against_itself(self):
        """
        Test: Compare a manifest with itself
        Expected: Zero deltas, every verdict a tie, distinct side names kept
        """
        manifest = make_manifest([0.3, 0.2, 0.1])
        report = compare_runs(manifest, manifest)
        assert [row.delta for row in report.rows] == [0.0, 0.0, 0.0]
        assert {row.verdict for row in report.rows} == {"tie"}
        assert report.verdict == "tie"
        assert not report.truncated

    def test_lower_error_wins(self):
        """
        Test: RB-SHMC below RBMC at the last checkpoint only
        Expected: Final verdict names RB-SHMC, earlier one names RBMC
        """
        a = make_manifest([0.3, 0.1])
        b = make_manifest([0.2, 0.15], label="RBMC", kind="rbmc")
        report = compare_runs(a, b)
        assert report.rows[0].verdict == "RBMC lower error"
        assert report.verdict == "RB-SHMC lower error"
        assert report.rows[1].delta == pytest.approx(-0.05)

    def test_truncated_to_shorter_series(self):
        """
        Test: Runs with three and two checkpoints
        Expected: Two rows and the truncated flag set
        """
        report = compare_runs(make_manifest([0.3, 0.2, 0.1]), make_manifest([0.3, 0.2], label="RBMC", kind="rbmc"))
        assert len(report.rows) == 2
        assert report.truncated
        assert "truncated" in format_report(report)

    def test_different_experiments(self):
        """
        Test: A dyson run against a test_example run
        Expected: ConfigError
        """
        with pytest.raises(ConfigError, match="cannot compare"):
            compare_runs(make_manifest([0.1]), make_manifest([0.1], experiment="test_example"))

    def test_different_histograms(self):
        """
        Test: Same experiment, different bin counts
        Expected: ConfigError
        """
        other = make_manifest([0.1], histogram={"lo": -1.6, "hi": 1.6, "n_bins": 32})
        with pytest.raises(ConfigError, match="histogram"):
            compare_runs(make_manifest([0.1]), other)

    def test_unknown_label(self):
        """
        Test: --label-a naming a chain that is not in the run
        Expected: ConfigError listing the known labels
        """
        with pytest.raises(ConfigError, match="RB-SHMC"):
            compare_runs(make_manifest([0.1]), make_manifest([0.1]), label_a="HMC")


class TestMain:
    """Test suite for the shmc entry point."""

    def test_presets_list(self, capsys):
        """
        Test: presets list
        Expected: Exit 0 with every preset id printed
        """
        assert main(["presets", "list"]) == 0
        out = capsys.readouterr().out
        assert "dyson-rbshmc" in out
        assert "error-sweep" in out

    def test_presets_show(self, capsys):
        """
        Test: presets show double-well
        Expected: Exit 0 and a JSON config that names the experiment
        """
        assert main(["presets", "show", "double-well"]) == 0
        assert json.loads(capsys.readouterr().out)["experiment"] == "double_well"

    def test_unknown_preset(self):
        """
        Test: presets show with an unknown id
        Expected: Exit 2
        """
        assert main(["presets", "show", "nope"]) == 2

    def test_invalid_config_file(self, tmp_path):
        """
        Test: run with a config that is not valid JSON
        Expected: Exit 2
        """
        path = tmp_path / "config.json"
        path.write_text("{ not json", encoding="utf-8")
        assert main(["run", str(path)]) == 2

    def test_oversized_batch_is_a_config_error(self, tmp_path, caplog):
        """
        Test: run a Dyson config with N = 10 and batch_size = 50
        Expected: Exit 2 before any chain starts, naming batch_size
        """
        config = {
            "experiment": "dyson",
            "dyson": {"n_particles": 10},
            "samplers": [{
                "kind": "rb_shmc_particle",
                "schedule": {"steps": [{"n_steps": 5, "dt": 1e-3}], "batch_size": 50, "n_samples": 10},
            }],
            "output_dir": str(tmp_path / "out"),
        }
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config), encoding="utf-8")
        with patch("app.commands.run.run_experiment") as runner:
            assert main(["run", str(path)]) == 2
        runner.assert_not_called()
        assert "batch_size" in caplog.text

    def test_numeric_failure(self):
        """
        Test: run_experiment raising NumericError
        Expected: Exit 3
        """
        with patch("app.commands.run.run_experiment", side_effect=NumericError("NaN energy", iteration=4)):
            assert main(["run", "--preset", "double-well"]) == 3

    def test_run_prints_chain_summary(self, tmp_path, capsys):
        """
        Test: run with a mocked experiment returning one chain
        Expected: Exit 0 and the chain label in the output
        """
        manifest = make_manifest([0.2])
        manifest.chains[0].relative_error = 0.2
        with patch("app.commands.run.run_experiment", return_value=manifest) as runner:
            assert main(["run", "--preset", "dyson-rbshmc", "--output-root", str(tmp_path)]) == 0
        assert runner.call_args.kwargs["output_root"] == str(tmp_path)
        assert "RB-SHMC: acceptance=0.9000" in capsys.readouterr().out

    def test_compare_mismatch(self, tmp_path):
        """
        Test: compare two runs of different experiments
        Expected: Exit 2
        """
        a = write_manifest(tmp_path / "a", make_manifest([0.1]))
        b = write_manifest(tmp_path / "b", make_manifest([0.1], experiment="test_example"))
        assert main(["compare", a, b]) == 2

    def test_compare_prints_report(self, tmp_path, capsys):
        """
        Test: compare two compatible runs
        Expected: Exit 0 and the final verdict printed
        """
        a = write_manifest(tmp_path / "a", make_manifest([0.3, 0.1]))
        b = write_manifest(tmp_path / "b", make_manifest([0.2, 0.15], label="RBMC", kind="rbmc"))
        assert main(["compare", a, b]) == 0
        assert "# verdict: RB-SHMC lower error" in capsys.readouterr().out

    def test_missing_manifest(self, tmp_path):
        """
        Test: compare with a directory holding no manifest
        Expected: Exit 2
        """
        assert main(["compare", str(tmp_path), str(tmp_path)]) == 2
