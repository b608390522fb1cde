"""Command implementations behind the CLI: synth, train, adapt, segment, grid, report."""
from pathlib import Path
from typing import List, Optional, Sequence, Union

import pandas as pd

from app.config import load_run_config
from app.exceptions import DataError, ParameterError, handle_io_error
from app.models.params import TrainedModel
from app.models.volume import DomainDataset
from app.schemas.domain import DomainTag, SynthConfig
from app.schemas.results import RunResult, Scenario
from app.schemas.training import TrainConfig, TrainingHistory
from app.schemas.transfer import ProvenanceKind
from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.grid import (
    DESK_FREEZE, DESK_SEEDS, DESK_SIZES, FULL_FREEZE, FULL_SIZES,
    freeze_shape_report, heatmap_table, read_results, run_grid, scenario_summary,
    write_heatmap, write_results,
)
from app.services.inference import SegmentationResult, evaluate_split, segment, to_fcn
from app.services.synthesis import generate_pair, lesion_contrast_measure
from app.services.transfer import adapt, make_plan, nested_order, train_model
from app.services.volume_io import read_manifest, read_volume, save_dataset, write_manifest, write_segmentation
from app.utils.logger import get_logger

logger = get_logger("commands")

PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.txt"


def history_path(ckpt_path: PathLike) -> Path:
    path = Path(ckpt_path)
    return path.with_name(f"{path.stem}.history.csv")


def heatmap_path(results_path: PathLike) -> Path:
    path = Path(results_path)
    return path.with_name(f"{path.stem}.heatmap.csv")


def write_history(history: TrainingHistory, path: PathLike) -> Path:
    """One row per completed epoch."""
    path = Path(path)
    frame = pd.DataFrame([r.dict() for r in history.records], columns=["epoch", "loss", "val_auc", "lr"])
    frame["best"] = frame["epoch"] == history.best_epoch
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise handle_io_error(e, f"writing history {path}")
    return path


def _domain_dataset(manifest: PathLike, domain: DomainTag) -> DomainDataset:
    datasets = read_manifest(manifest)
    if domain not in datasets:
        raise DataError(f"Manifest has no {domain.value} volumes",
                        details={"manifest": str(manifest), "domains": [d.value for d in datasets]})
    return datasets[domain]


def cmd_synth(config_path: Optional[PathLike], out_dir: PathLike, seed: Optional[int] = None) -> Path:
    """
    Generate the source/target pair and write every volume

    Args:
        config_path: key=value generator config; defaults apply when omitted
        out_dir: Directory receiving the volumes and the manifest
        seed: Overrides the config seed

    Returns:
        Path of the written manifest

    Raises:
        ConfigError: If the config file has unknown, missing or invalid keys
    """
    config = load_run_config(config_path, SynthConfig, overrides={"seed": seed})
    source, target = generate_pair(config)
    out_dir = Path(out_dir)
    entries = save_dataset(source, out_dir) + save_dataset(target, out_dir)
    manifest = write_manifest(entries, out_dir / MANIFEST_NAME)
    logger.info(
        f"Lesion contrast: source {lesion_contrast_measure(source):.3f}, "
        f"target {lesion_contrast_measure(target):.3f}"
    )
    return manifest


def cmd_train(manifest: PathLike, domain: Union[str, DomainTag], config_path: Optional[PathLike],
              out_ckpt: PathLike, seed: Optional[int] = None, show_progress: bool = True) -> TrainedModel:
    """
    Train on one domain's training split, save the best-AUC checkpoint and its history CSV

    Args:
        manifest: Dataset manifest
        domain: "source" or "target"
        config_path: Training config file
        out_ckpt: Checkpoint path; the history goes to `<stem>.history.csv` beside it
        seed: Overrides the config seed
        show_progress: Show epoch progress bars

    Returns:
        The trained model

    Raises:
        DataError: If the manifest has no volumes for `domain`
    """
    domain = DomainTag(domain)
    config = load_run_config(config_path, TrainConfig, overrides={"seed": seed})
    dataset = _domain_dataset(manifest, domain)
    kind = ProvenanceKind.SOURCE_TRAINED if domain == DomainTag.SOURCE else ProvenanceKind.SCRATCH_TARGET
    model = train_model(dataset.split("train"), dataset.split("val"), config, kind=kind,
                        show_progress=show_progress)
    save_checkpoint(model, out_ckpt)
    write_history(model.history, history_path(out_ckpt))

    if dataset.splits.get("test"):
        evaluation = evaluate_split(to_fcn(model.params, config.bn_epsilon), dataset.split("test"))
        logger.info(f"{domain.value} test Dice: mean {evaluation.mean_dice:.4f}, pooled {evaluation.pooled_dice:.4f}")
    return model


def cmd_adapt(source_ckpt: PathLike, manifest: PathLike, size: int, freeze_index: int,
              config_path: Optional[PathLike], out_ckpt: PathLike, seed: Optional[int] = None,
              show_progress: bool = True) -> TrainedModel:
    """
    Fine-tune a source checkpoint on the first `size` target patients of the seeded ordering

    Args:
        source_ckpt: Source-trained checkpoint
        manifest: Dataset manifest with target volumes
        size: Number of target training patients
        freeze_index: Shallowest layers kept frozen, 0..depth
        config_path: Training config file
        out_ckpt: Adapted checkpoint path; the history CSV is written beside it
        seed: Overrides the config seed, which also orders the patients

    Returns:
        The adapted model

    Raises:
        ParameterError: If the freeze index or size is out of range
    """
    source = load_checkpoint(source_ckpt)
    plan = make_plan(freeze_index, source.params.spec)
    config = load_run_config(config_path, TrainConfig, overrides={"seed": seed})
    target = _domain_dataset(manifest, DomainTag.TARGET)

    available = target.splits.get("train", [])
    if not 1 <= size <= len(available):
        raise ParameterError("Training size exceeds the available target training patients",
                             details={"size": size, "available": len(available)})
    train_ids = nested_order(available, config.seed)[:size]
    logger.info(f"Adapting with freeze index {freeze_index} on target patients {train_ids}")

    model = adapt(source, target.subset(train_ids), target.split("val"), plan, config,
                  source_ref=str(source_ckpt), show_progress=show_progress)
    save_checkpoint(model, out_ckpt)
    write_history(model.history, history_path(out_ckpt))
    return model


def cmd_segment(ckpt: PathLike, volume_path: PathLike, out_path: PathLike,
                threshold: float = 0.5) -> SegmentationResult:
    """
    Segment one volume and write its probability map and mask as an MVL1 file

    Args:
        ckpt: Checkpoint to segment with
        volume_path: Input MVL1 volume
        out_path: Output MVL1 file
        threshold: Probability threshold for the mask

    Returns:
        Segmentation with Dice against the volume's reference mask
    """
    model = load_checkpoint(ckpt)
    volume = read_volume(volume_path)
    result = segment(to_fcn(model.params), volume, threshold)
    write_segmentation(volume, result.probability, result.mask, out_path)
    return result


def cmd_grid(source_ckpt: PathLike, manifest: PathLike, out_csv: PathLike,
             sizes: Optional[Sequence[int]] = None, freeze_set: Optional[Sequence[int]] = None,
             seeds: Optional[Sequence[int]] = None, jobs: int = 1, config_path: Optional[PathLike] = None,
             scenarios: Optional[Sequence[int]] = None, full_grid: bool = False) -> List[RunResult]:
    """
    Run scenarios 1-3 over the grid and write the results CSV

    The heatmap CSV is written too when any adapted cell succeeded.

    Args:
        source_ckpt: Source-trained checkpoint
        manifest: Dataset manifest with target volumes
        out_csv: Results CSV path
        sizes: Target training sizes; desk sizes by default
        freeze_set: Freeze indices; desk set by default
        seeds: Run seeds; 0, 1, 2 by default
        jobs: Worker processes
        config_path: Training config file
        scenarios: Subset of 1, 2, 3
        full_grid: Use the published sizes and every freeze index

    Returns:
        Result rows in canonical order
    """
    source = load_checkpoint(source_ckpt)
    target = _domain_dataset(manifest, DomainTag.TARGET)
    config = load_run_config(config_path, TrainConfig)

    sizes = list(sizes or (FULL_SIZES if full_grid else DESK_SIZES))
    freeze_set = list(freeze_set if freeze_set is not None else (FULL_FREEZE if full_grid else DESK_FREEZE))
    seeds = list(seeds if seeds is not None else DESK_SEEDS)
    chosen = [Scenario(s) for s in (scenarios or [1, 2, 3])]
    if full_grid:
        available = len(target.splits.get("train", []))
        dropped = [s for s in sizes if s > available]
        if dropped:
            logger.warning(f"Only {available} target training patients; skipping sizes {dropped}")
            sizes = [s for s in sizes if s <= available]

    results = run_grid(source, target, sizes, freeze_set, seeds, config, jobs=jobs,
                       scenarios=chosen, source_ref=str(source_ckpt))
    write_results(results, out_csv)
    if any(r.scenario == Scenario.ADAPTED and not r.failed for r in results):
        write_heatmap(results, heatmap_path(out_csv))
    return results


def cmd_report(results_csv: PathLike) -> str:
    """Scenario summary, heatmap table and the freeze-shape check as printable text."""
    results = read_results(results_csv)
    lines = ["Scenario summary (mean test Dice; adapted rows use the best freeze index):"]
    lines.append(scenario_summary(results).to_string(index=False, na_rep="-", float_format="%.4f"))

    if any(r.scenario == Scenario.ADAPTED and not r.failed for r in results):
        lines.append("")
        lines.append("Adapted test Dice by training size (rows) and freeze index (columns):")
        lines.append(heatmap_table(results).to_string(float_format="%.3f"))
        report = freeze_shape_report(results)
        lines.append("")
        lines.append(f"Freeze-shape check (size {report.smallest_size} vs {report.largest_size}):")
        for check in report.checks:
            status = "ok" if check.holds else "deviates"
            lines.append(f"  seed {check.seed}: best i {check.best_small} vs {check.best_large} ({status})")
        lines.append(f"  holds in {report.seeds_holding} of {len(report.checks)} seeds")

    failed = [r for r in results if r.failed]
    if failed:
        lines.append("")
        lines.append(f"{len(failed)} failed cells")
    return "\n".join(lines)
