"""Experiment grid: scenario runs, results CSV, heatmap pivot and summary reports."""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import pandas as pd

from app.exceptions import DataError, FormatError, handle_io_error
from app.models.params import TrainedModel
from app.models.volume import DomainDataset
from app.schemas.results import RESULT_COLUMNS, TIMING_COLUMNS, RunResult, Scenario
from app.schemas.training import TrainConfig
from app.services.transfer import run_scenario
from app.utils.logger import get_logger, log_io_operation

logger = get_logger("grid")

DESK_SIZES = [2, 3, 5, 8, 12, 20]
DESK_FREEZE = [0, 4, 8, 10, 12, 13, 14, 15]
DESK_SEEDS = [0, 1, 2]
FULL_SIZES = list(range(2, 13)) + [25, 50, 100]
FULL_FREEZE = list(range(16))

PathLike = Union[str, Path]

_INT_COLUMNS = ["scenario", "target_train_size", "freeze_index", "seed", "epochs_run"]
_FLOAT_COLUMNS = ["dice_test_mean", "dice_test_pooled", "val_auc"]


@dataclass
class FreezeShapeCheck:
    seed: int
    best_small: Optional[int]
    best_large: Optional[int]

    @property
    def holds(self) -> bool:
        return self.best_small is not None and self.best_large is not None and self.best_small >= self.best_large


@dataclass
class FreezeShapeReport:
    smallest_size: Optional[int] = None
    largest_size: Optional[int] = None
    checks: List[FreezeShapeCheck] = field(default_factory=list)

    @property
    def seeds_holding(self) -> int:
        return sum(1 for c in self.checks if c.holds)

    @property
    def holds(self) -> bool:
        """True when the pattern holds in a strict majority of seeds."""
        return bool(self.checks) and 2 * self.seeds_holding > len(self.checks)


def results_frame(results: Iterable[RunResult]) -> pd.DataFrame:
    """Results as a DataFrame in canonical (scenario, size, freeze index, seed) order."""
    rows = sorted(results, key=lambda r: r.sort_key)
    frame = pd.DataFrame(
        [{
            "scenario": int(r.scenario),
            "target_train_size": r.target_train_size,
            "freeze_index": r.freeze_index,
            "seed": r.seed,
            "dice_test_mean": r.dice_test_mean,
            "dice_test_pooled": r.dice_test_pooled,
            "val_auc": r.val_auc,
            "epochs_run": r.epochs_run,
            "train_patients": ";".join(str(p) for p in r.train_patients),
            "error": r.error,
            "wall_time": r.wall_time,
        } for r in rows],
        columns=RESULT_COLUMNS + ["wall_time"],
    )
    for column in _INT_COLUMNS:
        frame[column] = frame[column].astype("Int64")
    for column in _FLOAT_COLUMNS + ["wall_time"]:
        frame[column] = frame[column].astype("float64")
    return frame


@log_io_operation("write results")
def write_results(results: Sequence[RunResult], path: PathLike) -> Path:
    """Write the results CSV and a `<name>.timing.csv` file beside it."""
    path = Path(path)
    frame = results_frame(results)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame[RESULT_COLUMNS].to_csv(path, index=False, na_rep="", lineterminator="\n")
        frame[TIMING_COLUMNS].to_csv(timing_path(path), index=False, na_rep="", lineterminator="\n",
                                     float_format="%.3f")
    except OSError as e:
        raise handle_io_error(e, f"writing results {path}")
    logger.info(f"Wrote {len(frame)} result rows to {path}")
    return path


def timing_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}.timing.csv")


def _optional(value, cast):
    return None if pd.isna(value) else cast(value)


@log_io_operation("read results")
def read_results(path: PathLike) -> List[RunResult]:
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"train_patients": str, "error": str}, keep_default_na=False,
                            na_values={c: [""] for c in _INT_COLUMNS + _FLOAT_COLUMNS})
    except OSError as e:
        raise handle_io_error(e, f"reading results {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FormatError("Results file is not a valid CSV", details={"path": str(path), "error": str(e)})

    missing = [c for c in RESULT_COLUMNS if c not in frame.columns]
    if missing:
        raise FormatError("Results file is missing columns", details={"path": str(path), "missing": missing})

    results = []
    for row in frame.to_dict("records"):
        patients = str(row["train_patients"] or "")
        results.append(RunResult(
            scenario=Scenario(int(row["scenario"])),
            target_train_size=_optional(row["target_train_size"], int),
            freeze_index=_optional(row["freeze_index"], int),
            seed=int(row["seed"]),
            dice_test_mean=_optional(row["dice_test_mean"], float),
            dice_test_pooled=_optional(row["dice_test_pooled"], float),
            val_auc=_optional(row["val_auc"], float),
            epochs_run=int(_optional(row["epochs_run"], int) or 0),
            train_patients=[int(p) for p in patients.split(";") if p],
            error=row["error"] or None,
        ))
    return results


def _successful(results: Iterable[RunResult]) -> pd.DataFrame:
    frame = results_frame(results)
    return frame[frame["error"].isna()]


def heatmap_table(results: Iterable[RunResult]) -> pd.DataFrame:
    """Mean adapted test Dice over seeds: rows are training sizes, columns freeze indices."""
    frame = _successful(results)
    frame = frame[frame["scenario"] == int(Scenario.ADAPTED)]
    if frame.empty:
        raise DataError("No successful adaptation rows to pivot")
    table = frame.pivot_table(index="target_train_size", columns="freeze_index",
                              values="dice_test_mean", aggfunc="mean")
    return table.sort_index().sort_index(axis=1)


@log_io_operation("write heatmap")
def write_heatmap(results: Sequence[RunResult], path: PathLike) -> Path:
    path = Path(path)
    table = heatmap_table(results)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, lineterminator="\n")
    except OSError as e:
        raise handle_io_error(e, f"writing heatmap {path}")
    return path


def scenario_summary(results: Iterable[RunResult]) -> pd.DataFrame:
    """Mean and spread of test Dice per scenario and training size.

    Adapted rows use the best freeze index per (size, seed).
    """
    frame = _successful(results)
    if frame.empty:
        raise DataError("No successful rows to summarize")
    adapted = frame[frame["scenario"] == int(Scenario.ADAPTED)]
    others = frame[frame["scenario"] != int(Scenario.ADAPTED)]
    if not adapted.empty:
        best = adapted.loc[adapted.groupby(["target_train_size", "seed"])["dice_test_mean"].idxmax()]
        frame = pd.concat([others, best])
    summary = (
        frame.groupby(["scenario", "target_train_size"], dropna=False)["dice_test_mean"]
        .agg(["mean", "std", "count"])
        .reset_index()
        .rename(columns={"mean": "dice_mean", "std": "dice_std", "count": "runs"})
    )
    return summary.sort_values(["scenario", "target_train_size"], na_position="first").reset_index(drop=True)


def freeze_shape_report(results: Iterable[RunResult]) -> FreezeShapeReport:
    """Whether the best freeze index at the smallest size is at least the best at the largest size, per seed.

    Deviations are logged as warnings.
    """
    frame = _successful(results)
    frame = frame[frame["scenario"] == int(Scenario.ADAPTED)]
    report = FreezeShapeReport()
    if frame.empty:
        logger.warning("No adaptation rows; freeze-shape check skipped")
        return report

    sizes = sorted(int(s) for s in frame["target_train_size"].dropna().unique())
    report.smallest_size, report.largest_size = sizes[0], sizes[-1]

    def best_index(rows: pd.DataFrame) -> Optional[int]:
        if rows.empty:
            return None
        # Ties go to the shallowest freeze index.
        ordered = rows.sort_values(["dice_test_mean", "freeze_index"], ascending=[False, True])
        return int(ordered.iloc[0]["freeze_index"])

    for seed in sorted(int(s) for s in frame["seed"].unique()):
        rows = frame[frame["seed"] == seed]
        check = FreezeShapeCheck(
            seed=seed,
            best_small=best_index(rows[rows["target_train_size"] == report.smallest_size]),
            best_large=best_index(rows[rows["target_train_size"] == report.largest_size]),
        )
        report.checks.append(check)
        if not check.holds:
            logger.warning(
                f"Seed {seed}: best freeze index {check.best_small} at size {report.smallest_size} "
                f"is below {check.best_large} at size {report.largest_size}"
            )
    return report


def run_grid(
    source_model: TrainedModel,
    target_dataset: DomainDataset,
    sizes: Sequence[int],
    freeze_grid: Sequence[int],
    seeds: Sequence[int],
    config: TrainConfig,
    jobs: int = 1,
    scenarios: Sequence[Scenario] = (Scenario.DIRECT, Scenario.SCRATCH, Scenario.ADAPTED),
    source_ref: Optional[str] = None,
) -> List[RunResult]:
    """
    Every requested scenario over the grid, in canonical order

    Args:
        source_model: Source-trained model
        target_dataset: Target volumes with train, val and test splits
        sizes: Target training sizes
        freeze_grid: Freeze indices for adaptation
        seeds: Run seeds
        config: Training settings
        jobs: Worker processes
        scenarios: Scenarios to run
        source_ref: Checkpoint path recorded in adapted provenance

    Returns:
        All rows, failed cells included
    """
    results: List[RunResult] = []
    for scenario in scenarios:
        results.extend(run_scenario(scenario, source_model, target_dataset, sizes, freeze_grid, seeds,
                                    config, jobs=jobs, source_ref=source_ref))
    failed = [r for r in results if r.failed]
    if failed:
        logger.warning(f"{len(failed)} of {len(results)} grid cells failed")
    return sorted(results, key=lambda r: r.sort_key)

