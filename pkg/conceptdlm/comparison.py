"""
This module contains the comparison of matched training runs with and without
attention alignment, one pair per seed, evaluated after every epoch.

Every (seed, align) combination is a universe, crossed with any further
settings listed under ``compare.dimensions``, such as an alpha sweep. A
universe gets a stable id, its own training run and one CSV of per-epoch
results. Universe CSVs are aggregated into the curve table, from which
epochs-to-threshold and cross-seed summaries are derived.
"""

import itertools
import json
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TypedDict

import numpy as np
import pandas as pd

from .config import RunConfig, replace_value
from .dataset import TEST_FILE_NAME, load_samples
from .helpers import add_run_info_to_df, read_counter, stable_hash
from .logger import logger
from .model import load_checkpoint
from .parallel import parallel_map
from .supervision import load_corpus_vocab
from .training import evaluate_samples, train

ERRORS_DIR_NAME = "errors"
ALIGN_OPTIONS = ["off", "on"]
CURVE_COLUMNS = ["epoch", "accuracy", "loss_dlm", "elapsed"]


def generate_comparison_grid(dimensions: Dict[str, List[Any]]) -> List[Dict[str, Any]]:
    """
    Generate a full grid from a dictionary of dimensions.

    Args:
        dimensions: A dictionary containing Lists with options.

    Returns:
        A list of dicts containing all different combinations of the options.
    """
    if not dimensions:
        raise ValueError("No (or empty) dimensions provided.")
    keys, values = zip(*dimensions.items())
    return [dict(zip(keys, v)) for v in itertools.product(*values)]


def epochs_to_threshold(curve: pd.DataFrame, threshold: float) -> float:
    """First epoch whose accuracy reaches ``threshold``; NaN if none does."""
    reached = curve.loc[curve["accuracy"] >= threshold, "epoch"]
    return float(reached.min()) if len(reached) else float("nan")


def summarize_curves(
    curves: pd.DataFrame, threshold: Optional[float] = None, by: Sequence[str] = ()
) -> pd.DataFrame:
    """
    One row per (seed, align) plus mean and std rows per align setting.

    Without an explicit ``threshold`` each seed uses the final accuracy of
    its unaligned run.

    Args:
        curves: Per-epoch rows with ``seed``, ``align``, ``epoch``,
            ``accuracy`` and ``elapsed`` columns.
        threshold: Accuracy target shared by every run.
        by: Further grid dimensions; runs are matched and averaged within
            each combination of their values.
    """
    if curves.empty:
        return pd.DataFrame()
    by = list(by)
    rows = []
    for keys, curve in curves.groupby(["seed", *by, "align"], sort=True):
        seed, *settings, align = keys
        curve = curve.sort_values("epoch")
        if threshold is None:
            matched = (curves["seed"] == seed) & (curves["align"] == "off")
            for column, value in zip(by, settings):
                matched &= curves[column] == value
            baseline = curves[matched]
            target = float(baseline.sort_values("epoch")["accuracy"].iloc[-1]) if len(baseline) else float("nan")
        else:
            target = threshold
        rows.append(
            {
                "seed": str(seed),
                **dict(zip(by, settings)),
                "align": align,
                "final_accuracy": float(curve["accuracy"].iloc[-1]),
                "threshold": target,
                "epochs_to_threshold": epochs_to_threshold(curve, target),
                "wall_time": float(curve["elapsed"].iloc[-1]),
            }
        )
    summary = pd.DataFrame(rows)
    if summary.empty:
        return summary
    stats = []
    for keys, group in summary.groupby([*by, "align"], sort=True):
        *settings, align = keys if isinstance(keys, tuple) else (keys,)
        for name, fn in (("mean", np.nanmean), ("std", np.nanstd)):
            row: Dict[str, Any] = {"seed": name, **dict(zip(by, settings)), "align": align}
            for column in ("final_accuracy", "threshold", "epochs_to_threshold", "wall_time"):
                values = group[column].to_numpy(dtype=float)
                row[column] = float(fn(values)) if np.isfinite(values).any() else float("nan")
            stats.append(row)
    return pd.concat([summary, pd.DataFrame(stats)], ignore_index=True)


class ComparisonResult(TypedDict):
    curves: pd.DataFrame
    summary: pd.DataFrame
    curves_path: Path
    summary_path: Path


class ComparisonAnalysis:
    """
    This class orchestrates the aligned-versus-unaligned comparison.

    Attributes:
        config: Base configuration shared by every universe.
        data_dir: Generated corpus (with mask sidecars for the aligned arm).
        output_dir: The directory to store the output in.
        run_no: The number of the current comparison run.
        stop_on_error: Whether to stop if a universe fails.
    """

    def __init__(
        self,
        config: RunConfig,
        data_dir: Path,
        output_dir: Path = Path("./output"),
        run_no: Optional[int] = None,
        new_run: bool = True,
        stop_on_error: Optional[bool] = None,
    ) -> None:
        self.config = config
        self.data_dir = Path(data_dir)
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.run_no = run_no if run_no is not None else read_counter(self.output_dir / "comparisons", increment=new_run)
        self.stop_on_error = config.compare.stop_on_error if stop_on_error is None else stop_on_error
        self.dimensions = {
            "seed": list(config.compare.seeds),
            "align": ALIGN_OPTIONS,
            **{key: list(options) for key, options in config.compare.dimensions.items()},
        }
        for key, options in config.compare.dimensions.items():
            for value in options:
                replace_value(config, key, value)
        self.grid: Optional[List[Dict[str, Any]]] = None

    def get_run_dir(self, sub_directory: Optional[str] = None) -> Path:
        run_dir = self.output_dir / "comparisons" / "runs" / str(self.run_no)
        target_dir = run_dir / sub_directory if sub_directory is not None else run_dir
        target_dir.mkdir(parents=True, exist_ok=True)
        return target_dir

    def generate_grid(self, save: bool = True) -> List[Dict[str, Any]]:
        self.grid = generate_comparison_grid(self.dimensions)
        if save:
            with open(self.get_run_dir() / "comparison_grid.json", "w") as fp:
                json.dump(self.grid, fp, indent=2)
        return self.grid

    @staticmethod
    def generate_universe_id(universe_dimensions: Dict[str, Any]) -> str:
        return stable_hash(universe_dimensions)

    def universe_config(self, universe_dimensions: Dict[str, Any]) -> RunConfig:
        config = replace(
            self.config,
            train=replace(self.config.train, seed=int(universe_dimensions["seed"])),
            align=replace(self.config.align, enabled=universe_dimensions["align"] == "on"),
        )
        for key, value in universe_dimensions.items():
            if key not in ("seed", "align"):
                config = replace_value(config, key, value)
        return config

    def visit_universe(self, universe_dimensions: Dict[str, Any]) -> None:
        """
        Train one universe, evaluating after every epoch, and save its curve.

        Failures are re-raised when ``stop_on_error`` is set and recorded in
        the errors directory otherwise.
        """
        universe_id = self.generate_universe_id(universe_dimensions)
        logger.debug(f"Visiting universe: {universe_id} {universe_dimensions}")
        error_path = self._get_error_filepath(universe_id)
        if error_path.is_file():
            error_path.unlink()

        config = self.universe_config(universe_dimensions)
        eval_config = replace(config.eval, n_jobs=1)
        rows: List[dict] = []
        started = time.time()

        def on_epoch_end(epoch: int, checkpoint_path: Path) -> None:
            checkpoint = load_checkpoint(checkpoint_path, vocab.hash)
            report = evaluate_samples(checkpoint, test_samples, vocab, eval_config, desc=f"Eval epoch {epoch}")
            rows.append(
                {
                    "epoch": epoch,
                    "accuracy": report["accuracy"],
                    "loss_dlm": float("nan"),
                    "elapsed": time.time() - started,
                }
            )

        try:
            vocab = load_corpus_vocab(self.data_dir)
            test_samples = load_samples(self.data_dir / TEST_FILE_NAME)[: config.compare.n_eval]
            run = train(
                config,
                self.data_dir,
                self.get_run_dir("training"),
                run_id=f"{universe_id[:12]}",
                on_epoch_end=on_epoch_end,
            )
            metrics = run.metrics()
            epoch_loss = metrics.groupby("epoch")["loss_dlm"].mean()
            curve = pd.DataFrame(rows, columns=CURVE_COLUMNS)
            curve["loss_dlm"] = curve["epoch"].map(epoch_loss)
            curve = add_run_info_to_df(
                curve,
                run_id=universe_id,
                seed=int(universe_dimensions["seed"]),
                dimensions=universe_dimensions,
                wall_time=time.time() - started,
            )
            curve.to_csv(self.get_run_dir("data") / f"c_{self.run_no}-{universe_id}.csv", index=False)
        except Exception as e:
            logger.error(f"Error in universe {universe_id} ({universe_dimensions})")
            if self.stop_on_error:
                raise e
            else:
                logger.exception(e)
                self.save_error(universe_id, universe_dimensions, e)

    def examine(self, grid: Optional[List[Dict[str, Any]]] = None, n_jobs: Optional[int] = None) -> None:
        grid = grid if grid is not None else (self.grid or self.generate_grid(save=False))
        n_jobs = self.config.compare.n_jobs if n_jobs is None else n_jobs
        logger.info(f"Running {len(grid)} universes (n_jobs = {n_jobs})")
        parallel_map(self.visit_universe, grid, n_jobs=n_jobs, desc="Visiting universes", prefer="processes")

    def _get_error_filepath(self, universe_id: str) -> Path:
        return self.get_run_dir(ERRORS_DIR_NAME) / f"e_{self.run_no}-{universe_id}.csv"

    def save_error(self, universe_id: str, dimensions: Dict[str, Any], error: Exception) -> None:
        df_error = add_run_info_to_df(
            pd.DataFrame({"error_type": [type(error).__name__], "error": [str(error)]}),
            run_id=universe_id,
            seed=int(dimensions["seed"]),
            dimensions=dimensions,
        )
        df_error.to_csv(self._get_error_filepath(universe_id), index=False)

    def aggregate_data(self, include_errors: bool = False, save: bool = True) -> pd.DataFrame:
        """
        Concatenate the per-universe CSVs.

        Args:
            include_errors: Whether to include error information.
            save: Whether to save the aggregated data to a file.
        """
        data_dir = self.get_run_dir("data")
        csv_files = sorted(data_dir.glob("c_*.csv"))
        if include_errors:
            csv_files += sorted(self.get_run_dir(ERRORS_DIR_NAME).glob("*.csv"))

        if len(csv_files) == 0:
            logger.warning("No data files to aggregate, returning empty dataframe.")
            df = pd.DataFrame({"run_id": [], "seed": [], "align": [], "epoch": [], "accuracy": [], "elapsed": []})
        else:
            df = pd.concat((pd.read_csv(f) for f in csv_files), ignore_index=True)
            if "epoch" in df:
                order = ["seed", *self.config.compare.dimensions, "align", "epoch"]
                df = df.sort_values([c for c in order if c in df], kind="stable").reset_index(drop=True)

        if save:
            df.to_csv(self.get_run_dir() / "curves.csv", index=False)
        return df

    def check_missing_universes(self) -> List[Dict[str, Any]]:
        grid = self.grid or self.generate_grid(save=False)
        done = set(self.aggregate_data(save=False)["run_id"])
        missing = [u for u in grid if self.generate_universe_id(u) not in done]
        if missing:
            logger.warning(f"Found {len(missing)} universes without results")
        return missing


def compare_runs(
    config: RunConfig,
    data_dir: Path,
    output_dir: Path,
    n_jobs: Optional[int] = None,
) -> ComparisonResult:
    """
    Train matched unaligned and aligned runs per seed and tabulate them.

    The curve table has one row per universe and epoch; the summary has
    final accuracy, epochs-to-threshold and wall time per universe and
    mean/std rows across seeds for every other combination of settings. No pass/fail judgment is made.
    """
    analysis = ComparisonAnalysis(config, data_dir, output_dir)
    logger.info(f"~ Starting comparison run No. {analysis.run_no} (seeds {config.compare.seeds}) ~")
    analysis.examine(analysis.generate_grid(save=True), n_jobs=n_jobs)
    curves = analysis.aggregate_data(save=True)
    summary = summarize_curves(curves, config.compare.threshold, by=list(config.compare.dimensions))
    summary_path = analysis.get_run_dir() / "summary.csv"
    summary.to_csv(summary_path, index=False)
    analysis.check_missing_universes()
    return {
        "curves": curves,
        "summary": summary,
        "curves_path": analysis.get_run_dir() / "curves.csv",
        "summary_path": summary_path,
    }
