import json
import subprocess
import sys
from pathlib import Path

import pytest

from conceptdlm.cli import run_cli

ROOT_DIR = Path(__file__).parent.parent
TINY_CONFIG = str(Path(__file__).parent / "configs" / "tiny.json")
COST_ARGS = ["--t-in", "2846.2", "--t-out", "295.3", "--p-in", "0.8", "--p-out", "2.0", "--avg-len", "865.2"]


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


def run(capsys, *argv):
    code = run_cli(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestSmallCommands:
    def test_estimate_cost(self, capsys):
        code, out, _ = run(capsys, "estimate-cost", *COST_ARGS)
        assert code == 0
        assert out.strip() == "3.31"

    def test_estimate_cost_currency(self, capsys):
        _, out, _ = run(capsys, "estimate-cost", *COST_ARGS, "--currency-factor", "0.14")
        assert out.strip() == "0.46"

    def test_error_is_reported(self, capsys):
        code, out, err = run(capsys, "estimate-cost", *COST_ARGS[:-1], "0")
        assert code == 1
        error = last_json(err)
        assert error["error"] == "ContractError"
        assert error["command"] == "estimate-cost"

    def test_score_graphs(self, capsys, temp_dir):
        path = temp_dir / "judgments.json"
        path.write_text(json.dumps({"counts": {"1": 280, "0.5": 28, "0": 3}}))
        code, out, _ = run(capsys, "score-graphs", "--input", str(path))
        assert code == 0
        assert last_json(out)["micro"] == pytest.approx(294 / 311)

        path.write_text(json.dumps({"scores": []}))
        code, _, err = run(capsys, "score-graphs", "--input", str(path))
        assert code == 1
        assert last_json(err)["error"] == "ContractError"

    def test_missing_config(self, capsys, temp_dir):
        code, _, err = run(capsys, "train", "--config", str(temp_dir / "absent.json"))
        assert code == 1
        error = last_json(err)
        assert error["error"] == "FileNotFoundError"
        assert error["command"] == "train"

    def test_bad_override(self, capsys):
        code, _, err = run(capsys, "estimate-cost", *COST_ARGS, "--set", "align.alpha")
        assert code == 1
        assert last_json(err)["error"] == "ConfigError"

    def test_malformed_score_input(self, capsys, temp_dir):
        path = temp_dir / "broken_judgments.json"
        path.write_text('{"counts": ')
        code, _, err = run(capsys, "score-graphs", "--input", str(path))
        assert code == 1
        error = last_json(err)
        assert set(error) == {"error", "reason", "command"}
        assert error["error"] == "ConfigError"
        assert error["command"] == "score-graphs"

    @pytest.mark.parametrize(
        "name, text", [("bad.json", "{not json"), ("bad.toml", "[align\nalpha = ")], ids=["json", "toml"]
    )
    def test_malformed_config(self, capsys, temp_dir, name, text):
        path = temp_dir / name
        path.write_text(text)
        code, _, err = run(capsys, "estimate-cost", "--config", str(path), *COST_ARGS)
        assert code == 1
        error = last_json(err)
        assert error["error"] == "ConfigError"
        assert error["command"] == "estimate-cost"
        assert "could not parse" in error["reason"]

    def test_module_entry_point(self):
        result = subprocess.run(
            [sys.executable, "-m", "conceptdlm", "estimate-cost", *COST_ARGS],
            capture_output=True,
            text=True,
            cwd=ROOT_DIR,
        )
        assert result.returncode == 0
        assert result.stdout.strip() == "3.31"


class TestPipeline:
    def test_end_to_end(self, capsys, temp_dir):
        data_dir = str(temp_dir / "data")
        output_dir = str(temp_dir / "output")
        common = ["--config", TINY_CONFIG, "--data-dir", data_dir]

        code, out, _ = run(capsys, "gen-data", *common, "--set", "data.n_train=12", "--set", "data.n_test=4")
        assert code == 0
        generated = last_json(out)
        assert len(generated["files"]) == 10

        code, out, _ = run(capsys, "build-masks", *common)
        assert code == 0
        masks = last_json(out)
        assert masks["n_masks"] == 12
        assert masks["n_span_failures"] == 0
        assert Path(masks["masks"]).name == "masks_normal_figure_aligned.jsonl"

        code, out, _ = run(capsys, "train", *common, "--output-dir", output_dir, "--run-id", "cli")
        assert code == 0
        trained = last_json(out)
        checkpoint = trained["checkpoint"]
        assert (Path(trained["run_dir"]) / "alignment.json").is_file()

        report_path = temp_dir / "report.json"
        code, out, _ = run(capsys, "eval", *common, "--checkpoint", checkpoint, "--report", str(report_path))
        assert code == 0
        summary = last_json(out)
        assert summary["n_samples"] == 2
        assert "records" not in summary
        assert len(json.loads(report_path.read_text())["records"]) == 2

        question = "Please infer the value of the Stardust variable. The input variables are Zorin (value: 3) and Vortex (value: 5)."
        code, out, _ = run(capsys, "decode", *common, "--checkpoint", checkpoint, "--question", question)
        assert code == 0
        assert set(last_json(out)) == {"text", "answer"}

        viz_dir = str(temp_dir / "viz")
        code, out, _ = run(capsys, "viz", *common, "--checkpoint", checkpoint, "--output-dir", viz_dir, "--no-render")
        assert code == 0
        assert Path(last_json(out)["spans"]).is_file()

        code, _, err = run(capsys, "viz", *common, "--checkpoint", checkpoint, "--sample-id", "nope", "--no-render")
        assert code == 1
        assert last_json(err)["error"] == "IndexError"

        code, _, err = run(capsys, "train", *common, "--output-dir", output_dir, "--run-id", "cli")
        assert code == 1
        assert last_json(err)["error"] == "FileExistsError"
