import json
from dataclasses import replace
from hashlib import md5

import numpy as np
import pandas as pd
import pytest

from conceptdlm.comparison import (
    ComparisonAnalysis,
    compare_runs,
    epochs_to_threshold,
    generate_comparison_grid,
    summarize_curves,
)
from conceptdlm.errors import ConfigError


def count_files(dir, glob):
    return len(list(dir.glob(glob)))


def curve(seed, align, accuracies, elapsed=1.0):
    return pd.DataFrame(
        {
            "seed": seed,
            "align": align,
            "epoch": range(1, len(accuracies) + 1),
            "accuracy": accuracies,
            "elapsed": [elapsed * (i + 1) for i in range(len(accuracies))],
        }
    )


class TestGrid:
    def test_grid(self):
        assert generate_comparison_grid({"seed": [1, 2], "align": ["off", "on"]}) == [
            {"seed": 1, "align": "off"},
            {"seed": 1, "align": "on"},
            {"seed": 2, "align": "off"},
            {"seed": 2, "align": "on"},
        ]

    def test_empty(self):
        with pytest.raises(ValueError):
            generate_comparison_grid({})

    def test_universe_id(self):
        dims = {"seed": 42, "align": "on"}
        expected = md5(b'{"align": "on", "seed": 42}').hexdigest()
        assert ComparisonAnalysis.generate_universe_id(dims) == expected
        assert ComparisonAnalysis.generate_universe_id({"align": "on", "seed": 42}) == expected


class TestSummaries:
    def test_epochs_to_threshold(self):
        c = curve(1, "on", [0.1, 0.5, 0.4, 0.6])
        assert epochs_to_threshold(c, 0.5) == 2
        assert np.isnan(epochs_to_threshold(c, 0.9))

    def test_threshold_from_unaligned_run(self):
        curves = pd.concat(
            [
                curve(1, "off", [0.1, 0.2, 0.4]),
                curve(1, "on", [0.3, 0.4, 0.5], elapsed=2.0),
                curve(2, "off", [0.2, 0.3, 0.3]),
                curve(2, "on", [0.1, 0.2, 0.2]),
            ],
            ignore_index=True,
        )
        summary = summarize_curves(curves).set_index(["seed", "align"])
        assert summary.loc[("1", "on"), "threshold"] == 0.4
        assert summary.loc[("1", "on"), "epochs_to_threshold"] == 2
        assert summary.loc[("1", "off"), "epochs_to_threshold"] == 3
        assert summary.loc[("1", "on"), "wall_time"] == 6.0
        assert np.isnan(summary.loc[("2", "on"), "epochs_to_threshold"])
        assert summary.loc[("mean", "on"), "final_accuracy"] == pytest.approx(0.35)
        assert summary.loc[("std", "on"), "final_accuracy"] == pytest.approx(0.15)
        assert summary.loc[("mean", "on"), "epochs_to_threshold"] == 2

    def test_explicit_threshold(self):
        curves = pd.concat([curve(1, "off", [0.1, 0.2]), curve(1, "on", [0.3, 0.4])], ignore_index=True)
        summary = summarize_curves(curves, threshold=0.3).set_index(["seed", "align"])
        assert summary.loc[("1", "on"), "epochs_to_threshold"] == 1
        assert np.isnan(summary.loc[("1", "off"), "epochs_to_threshold"])

    def test_empty(self):
        assert summarize_curves(pd.DataFrame(columns=["seed", "align", "epoch", "accuracy", "elapsed"])).empty

    def test_summary_per_extra_dimension(self):
        parts = []
        for weighting, shift in (("key_index", 0.0), ("none", 0.2)):
            for seed in (1, 2):
                for align, accuracies in (("off", [0.1, 0.3]), ("on", [0.3, 0.4])):
                    part = curve(seed, align, [a + shift for a in accuracies])
                    part["align.v_weighting"] = weighting
                    parts.append(part)
        curves = pd.concat(parts, ignore_index=True)
        summary = summarize_curves(curves, by=["align.v_weighting"])
        summary = summary.set_index(["seed", "align.v_weighting", "align"])
        assert len(summary) == 8 + 8
        assert summary.loc[("1", "none", "on"), "threshold"] == pytest.approx(0.5)
        assert summary.loc[("1", "key_index", "on"), "threshold"] == pytest.approx(0.3)
        assert summary.loc[("1", "none", "on"), "epochs_to_threshold"] == 1
        assert summary.loc[("mean", "none", "on"), "final_accuracy"] == pytest.approx(0.6)
        assert summary.loc[("mean", "key_index", "off"), "final_accuracy"] == pytest.approx(0.3)
        assert summary.loc[("std", "none", "on"), "final_accuracy"] == pytest.approx(0.0)


class TestComparisonAnalysis:
    def test_run_numbers(self, corpus_dir, temp_dir, tiny_config):
        first = ComparisonAnalysis(tiny_config, corpus_dir, temp_dir)
        second = ComparisonAnalysis(tiny_config, corpus_dir, temp_dir)
        same = ComparisonAnalysis(tiny_config, corpus_dir, temp_dir, new_run=False)
        assert (first.run_no, second.run_no, same.run_no) == (1, 2, 2)

    def test_generate_grid(self, corpus_dir, temp_dir, tiny_config):
        analysis = ComparisonAnalysis(tiny_config, corpus_dir, temp_dir)
        grid = analysis.generate_grid()
        saved = json.loads((analysis.get_run_dir() / "comparison_grid.json").read_text())
        assert saved == grid == [{"seed": 1, "align": "off"}, {"seed": 1, "align": "on"}]

    def test_universe_config(self, corpus_dir, temp_dir, tiny_config):
        analysis = ComparisonAnalysis(tiny_config, corpus_dir, temp_dir)
        config = analysis.universe_config({"seed": 9, "align": "off"})
        assert config.train.seed == 9
        assert config.align.enabled is False
        assert tiny_config.align.enabled is True

    def test_extra_dimensions(self, corpus_dir, temp_dir, tiny_config):
        config = replace(tiny_config, compare=replace(tiny_config.compare, dimensions={"align.alpha": [1.5, 4.0]}))
        analysis = ComparisonAnalysis(config, corpus_dir, temp_dir)
        grid = analysis.generate_grid(save=False)
        assert grid == [
            {"seed": 1, "align": "off", "align.alpha": 1.5},
            {"seed": 1, "align": "off", "align.alpha": 4.0},
            {"seed": 1, "align": "on", "align.alpha": 1.5},
            {"seed": 1, "align": "on", "align.alpha": 4.0},
        ]
        universe = analysis.universe_config(grid[3])
        assert (universe.align.enabled, universe.align.alpha, universe.train.seed) == (True, 4.0, 1)
        assert config.align.alpha == tiny_config.align.alpha

    @pytest.mark.parametrize(
        "dimensions",
        [{"align.gamma_maximum": [1.0]}, {"alpha": [1.0]}, {"train.seed": [1, 2]}, {"align.alpha": []}],
        ids=["unknown-key", "no-section", "reserved", "empty"],
    )
    def test_invalid_dimension_names(self, tiny_config, dimensions):
        with pytest.raises(ConfigError):
            replace(tiny_config, compare=replace(tiny_config.compare, dimensions=dimensions))

    def test_invalid_dimension_value(self, corpus_dir, temp_dir, tiny_config):
        config = replace(
            tiny_config, compare=replace(tiny_config.compare, dimensions={"align.v_weighting": ["none", "rows"]})
        )
        with pytest.raises(ConfigError):
            ComparisonAnalysis(config, corpus_dir, temp_dir)

    def test_aggregate_without_data(self, corpus_dir, temp_dir, tiny_config):
        analysis = ComparisonAnalysis(tiny_config, corpus_dir, temp_dir)
        df = analysis.aggregate_data()
        assert df.empty
        assert (analysis.get_run_dir() / "curves.csv").is_file()
        assert len(analysis.check_missing_universes()) == 2

    def test_failure_is_recorded(self, temp_dir, tiny_config):
        analysis = ComparisonAnalysis(tiny_config, temp_dir / "missing", temp_dir / "out", stop_on_error=False)
        dims = {"seed": 1, "align": "on"}
        analysis.visit_universe(dims)
        errors = analysis.get_run_dir("errors")
        assert count_files(errors, "e_*.csv") == 1
        error = pd.read_csv(errors / f"e_1-{analysis.generate_universe_id(dims)}.csv")
        assert error["error_type"].iloc[0] == "FileNotFoundError"
        assert analysis.aggregate_data(include_errors=True, save=False)["align"].tolist() == ["on"]

    def test_failure_stops(self, temp_dir, tiny_config):
        analysis = ComparisonAnalysis(tiny_config, temp_dir / "missing", temp_dir / "out")
        with pytest.raises(FileNotFoundError):
            analysis.visit_universe({"seed": 1, "align": "off"})


class TestCompareRuns:
    def test_tiny_comparison(self, corpus_dir, temp_dir, tiny_config):
        result = compare_runs(tiny_config, corpus_dir, temp_dir)
        curves = result["curves"]
        assert curves["align"].tolist() == ["off", "on"]
        assert curves["epoch"].tolist() == [1, 1]
        assert curves["accuracy"].between(0, 1).all()
        assert np.isfinite(curves["loss_dlm"]).all()
        assert result["curves_path"].is_file()
        assert result["summary_path"].is_file()

        summary = result["summary"]
        assert summary["seed"].tolist() == ["1", "1", "mean", "std", "mean", "std"]
        off = summary[(summary["seed"] == "1") & (summary["align"] == "off")].iloc[0]
        assert off["epochs_to_threshold"] == 1

        run_dir = temp_dir / "comparisons" / "runs" / "1"
        assert count_files(run_dir / "data", "c_1-*.csv") == 2
        assert count_files(run_dir / "training" / "runs", "*") == 2

    def test_value_weighting_sweep(self, corpus_dir, temp_dir, tiny_config):
        config = replace(
            tiny_config, compare=replace(tiny_config.compare, dimensions={"align.v_weighting": ["key_index", "none"]})
        )
        result = compare_runs(config, corpus_dir, temp_dir)
        curves = result["curves"]
        assert len(curves) == 4
        assert sorted(zip(curves["align"], curves["align.v_weighting"])) == [
            ("off", "key_index"),
            ("off", "none"),
            ("on", "key_index"),
            ("on", "none"),
        ]
        summary = result["summary"]
        runs = summary[summary["seed"] == "1"]
        assert len(runs) == 4
        assert set(runs["align.v_weighting"]) == {"key_index", "none"}
        assert len(summary[summary["seed"] == "mean"]) == 4
        run_dir = temp_dir / "comparisons" / "runs" / "1"
        assert count_files(run_dir / "data", "c_1-*.csv") == 4
