"""Source training, layer-freezing transfer and the three-scenario protocol.

Scenario 1 applies the source model to the target test set unchanged,
scenario 2 trains from scratch on nested target subsets, scenario 3
fine-tunes the source model on the same subsets with the shallowest
`i` layers frozen.
"""
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.exceptions import BaseCustomException, CompatibilityError, DataError, ParameterError, StateError
from app.models.params import ParamSet, TrainedModel
from app.models.volume import DomainDataset, PatchSet, Volume
from app.schemas.network import NetworkSpec
from app.schemas.results import RunResult, Scenario
from app.schemas.training import TrainConfig, TrainingHistory
from app.schemas.transfer import ModelProvenance, ProvenanceKind, TransferPlan
from app.services.inference import evaluate_split, to_fcn
from app.services.network import build_network
from app.services.sampling import build_patch_set
from app.services.training import fit, validation_auc
from app.config import settings
from app.utils.logger import get_logger, log_training_operation, setup_logger

logger = get_logger("transfer")

# Sub-stream keys under a run seed
INIT_STREAM = 0
TRAIN_PATCH_STREAM = 1
VAL_PATCH_STREAM = 2
ORDER_STREAM = 3


def make_plan(freeze_count: int, spec: Optional[NetworkSpec] = None) -> TransferPlan:
    depth = (spec or NetworkSpec()).depth
    try:
        return TransferPlan(freeze_count=freeze_count, depth=depth)
    except ValidationError:
        raise ParameterError(
            f"Freeze index {freeze_count} is outside [0, {depth}]",
            details={"freeze_index": freeze_count, "depth": depth},
        )


def transfer_weights(source: ParamSet, spec: Optional[NetworkSpec] = None) -> ParamSet:
    """
    Deep copy of every tensor and BN statistic, nothing frozen, step counter reset

    Args:
        source: Parameters to copy
        spec: Architecture the copy must match

    Returns:
        Independent copy of `source`

    Raises:
        CompatibilityError: If `spec` differs from the source architecture;
            details name the differing layers in network order
    """
    if spec is not None and spec != source.spec:
        expected = build_network(spec, np.random.default_rng(0))
        expected_shapes = {k: v.shape for k, v in expected.named_tensors()}
        source_shapes = {k: v.shape for k, v in source.named_tensors()}
        mismatched = {
            key.split(".", 1)[0]
            for key in set(expected_shapes) | set(source_shapes)
            if expected_shapes.get(key) != source_shapes.get(key)
        }
        layer_order = spec.layer_names + [n for n in source.spec.layer_names if n not in spec.layer_names]
        differing = [name for name in layer_order if name in mismatched]
        raise CompatibilityError(
            "Source parameters do not match the requested network",
            details={"differing_layers": differing, "expected_depth": spec.depth, "source_depth": source.spec.depth},
        )
    params = source.copy()
    for layer in params.layers:
        layer.frozen = False
    params.step = 0
    return params


def apply_freeze(params: ParamSet, plan: TransferPlan) -> ParamSet:
    """Mark layers 1..i (conv first, then dense) frozen and the rest trainable, in place."""
    if plan.depth != params.spec.depth:
        raise ParameterError(
            "Transfer plan depth does not match the network",
            details={"plan_depth": plan.depth, "network_depth": params.spec.depth},
        )
    for index, layer in enumerate(params.layers):
        layer.frozen = index < plan.freeze_count
    return params


def nested_order(train_ids: Sequence[int], seed: int) -> List[int]:
    """Seeded ordering of training patients; every size-k prefix contains the size-(k-1) prefix."""
    rng = np.random.default_rng([seed, ORDER_STREAM])
    return [int(pid) for pid in rng.permutation(sorted(int(pid) for pid in train_ids))]


def _patch_sets(train_volumes: Sequence[Volume], val_volumes: Sequence[Volume],
                config: TrainConfig, patch_side: int) -> Tuple[PatchSet, PatchSet]:
    train_set = build_patch_set(train_volumes, np.random.default_rng([config.seed, TRAIN_PATCH_STREAM]),
                                config.positive_fraction, patch_side=patch_side)
    return train_set, _val_patch_set(val_volumes, config, patch_side)


def _val_patch_set(val_volumes: Sequence[Volume], config: TrainConfig, patch_side: int) -> PatchSet:
    return build_patch_set(val_volumes, np.random.default_rng([config.seed, VAL_PATCH_STREAM]),
                           config.positive_fraction, augment=False, patch_side=patch_side)


@log_training_operation("train model")
def train_model(
    train_volumes: Sequence[Volume],
    val_volumes: Sequence[Volume],
    config: TrainConfig,
    spec: Optional[NetworkSpec] = None,
    kind: ProvenanceKind = ProvenanceKind.SOURCE_TRAINED,
    show_progress: bool = False,
) -> TrainedModel:
    """
    Train a freshly initialized network on one domain's volumes

    Args:
        train_volumes: Normalized training volumes
        val_volumes: Normalized validation volumes for early stopping
        config: Training settings; its seed selects init, patch and order streams
        spec: Architecture; the published network by default
        kind: Provenance recorded on the model
        show_progress: Show epoch progress bars

    Returns:
        Best-validation-AUC model with its history

    Raises:
        DataError: If either volume list is empty or yields no patches
    """
    if not train_volumes or not val_volumes:
        raise DataError("Training and validation volumes must be non-empty",
                        details={"train": len(train_volumes), "val": len(val_volumes)})
    spec = spec or NetworkSpec()
    train_set, val_set = _patch_sets(train_volumes, val_volumes, config, spec.patch_side)
    params = build_network(spec, np.random.default_rng([config.seed, INIT_STREAM]))
    best, history = fit(params, train_set, val_set, config, show_progress=show_progress)
    provenance = ModelProvenance(kind=kind, domain=train_volumes[0].domain_tag.value)
    return TrainedModel(params=best, provenance=provenance, history=history, seed=config.seed)


@log_training_operation("adapt")
def adapt(
    source: TrainedModel,
    target_train: Sequence[Volume],
    target_val: Sequence[Volume],
    plan: TransferPlan,
    config: TrainConfig,
    source_ref: Optional[str] = None,
    show_progress: bool = False,
    spec: Optional[NetworkSpec] = None,
) -> TrainedModel:
    """
    Transfer the source weights, freeze per `plan` and fine-tune on target data

    Args:
        source: Trained source-domain model
        target_train: Target training volumes, already normalized
        target_val: Target validation volumes used for early stopping
        plan: How many of the shallowest layers stay frozen
        config: Fine-tuning hyperparameters
        source_ref: Checkpoint path recorded in the provenance
        show_progress: Show an epoch progress bar
        spec: Architecture the adapted model must have; defaults to the
            source model's own

    Returns:
        Adapted model; equal to the source weights when every layer is frozen

    Raises:
        DataError: If either target list is empty
        CompatibilityError: If the source weights do not fit `spec`
        ParameterError: If the plan depth differs from the network depth
    """
    if not target_train or not target_val:
        raise DataError("Target training and validation volumes must be non-empty",
                        details={"train": len(target_train), "val": len(target_val)})
    spec = spec or source.params.spec
    params = apply_freeze(transfer_weights(source.params, spec=spec), plan)
    provenance = ModelProvenance(
        kind=ProvenanceKind.ADAPTED,
        domain=target_train[0].domain_tag.value,
        source_checkpoint=source_ref,
        source_digest=source.params.digest(),
        plan=plan,
    )

    if plan.tuned_count == 0:
        logger.info("Every layer is frozen; adapted model equals the source model")
        return TrainedModel(params=params, provenance=provenance, history=TrainingHistory(), seed=config.seed)

    train_set, val_set = _patch_sets(target_train, target_val, config, params.spec.patch_side)
    best, history = fit(params, train_set, val_set, config, show_progress=show_progress)
    return TrainedModel(params=best, provenance=provenance, history=history, seed=config.seed)


@dataclass(frozen=True)
class Cell:
    scenario: Scenario
    seed: int
    size: Optional[int] = None
    freeze_index: Optional[int] = None

    def describe(self) -> str:
        return f"scenario={int(self.scenario)} size={self.size} i={self.freeze_index} seed={self.seed}"


@dataclass
class _Context:
    source: TrainedModel
    target: DomainDataset
    config: TrainConfig
    source_ref: Optional[str]
    log_level: int = logging.INFO


_worker_context: Optional[_Context] = None


def _init_worker(context: _Context) -> None:
    global _worker_context
    setup_logger(level=context.log_level, log_file=settings.LOG_FILE)
    _worker_context = context


def _target_val_auc(params: ParamSet, val_volumes: Sequence[Volume], config: TrainConfig) -> float:
    return validation_auc(params, _val_patch_set(val_volumes, config, params.spec.patch_side), config)


def run_cell(cell: Cell, context: Optional[_Context] = None) -> RunResult:
    """Run one grid cell; failures are captured in the result's error field."""
    context = context or _worker_context
    if context is None:
        raise StateError("Grid worker was not initialized")

    started = time.perf_counter()
    config = context.config.copy(update={"seed": cell.seed})
    target = context.target
    test_volumes = target.split("test")
    val_volumes = target.split("val")
    digest_before = context.source.params.digest()
    logger.info(f"Starting cell {cell.describe()}")

    try:
        train_ids: List[int] = []
        if cell.scenario == Scenario.DIRECT:
            model = context.source
        else:
            train_ids = nested_order(target.splits["train"], cell.seed)[:cell.size]
            train_volumes = target.subset(train_ids)
            if cell.scenario == Scenario.SCRATCH:
                model = train_model(train_volumes, val_volumes, config, context.source.params.spec,
                                    kind=ProvenanceKind.SCRATCH_TARGET)
            else:
                plan = make_plan(cell.freeze_index, context.source.params.spec)
                model = adapt(context.source, train_volumes, val_volumes, plan, config, context.source_ref)

        leaked = set(train_ids) & set(target.splits.get("test", []))
        if leaked:
            raise StateError("Training consumed target test patients", details={"patients": sorted(leaked)})
        logger.debug(f"Cell {cell.describe()} trained on patients {train_ids}")

        evaluation = evaluate_split(to_fcn(model.params, config.bn_epsilon), test_volumes)
        if cell.scenario != Scenario.DIRECT and model.history.best_val_auc is not None:
            val_auc = model.history.best_val_auc
        else:
            val_auc = _target_val_auc(model.params, val_volumes, config)

        if context.source.params.digest() != digest_before:
            raise StateError("Source model was modified by a grid cell", details={"cell": cell.describe()})

        result = RunResult(
            scenario=cell.scenario,
            target_train_size=cell.size,
            freeze_index=cell.freeze_index,
            seed=cell.seed,
            dice_test_mean=evaluation.mean_dice,
            dice_test_pooled=evaluation.pooled_dice,
            val_auc=val_auc,
            epochs_run=model.history.epochs_run,
            wall_time=time.perf_counter() - started,
            train_patients=train_ids,
        )
        logger.info(f"Finished cell {cell.describe()}: dice={evaluation.mean_dice:.4f}")
        return result
    except BaseCustomException as e:
        logger.error(f"Cell {cell.describe()} failed: {e.message}", extra={"details": e.details})
        error = f"{e.__class__.__name__}: {e.message}"
    except Exception as e:
        logger.error(f"Cell {cell.describe()} failed: {str(e)}", exc_info=True)
        error = f"{e.__class__.__name__}: {str(e)}"

    return RunResult(
        scenario=cell.scenario,
        target_train_size=cell.size,
        freeze_index=cell.freeze_index,
        seed=cell.seed,
        wall_time=time.perf_counter() - started,
        error=error,
    )


def scenario_cells(scenario: Scenario, sizes: Sequence[int], freeze_grid: Sequence[int],
                   seeds: Sequence[int]) -> List[Cell]:
    if scenario == Scenario.DIRECT:
        return [Cell(scenario, seed) for seed in seeds]
    if scenario == Scenario.SCRATCH:
        return [Cell(scenario, seed, size) for size in sizes for seed in seeds]
    return [Cell(scenario, seed, size, i) for size in sizes for i in freeze_grid for seed in seeds]


def execute_cells(cells: Sequence[Cell], context: _Context, jobs: int = 1) -> List[RunResult]:
    """Run cells inline or in a process pool; results come back in canonical order."""
    if jobs < 1:
        raise ParameterError("jobs must be at least 1", details={"jobs": jobs})
    if jobs == 1 or len(cells) <= 1:
        results = [run_cell(cell, context) for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(context,)) as pool:
            results = list(pool.map(run_cell, cells))
    return sorted(results, key=lambda r: r.sort_key)


def validate_grid(target: DomainDataset, sizes: Sequence[int], freeze_grid: Sequence[int],
                  spec: NetworkSpec) -> None:
    available = len(target.splits.get("train", []))
    too_large = [s for s in sizes if s > available]
    if too_large or any(s < 1 for s in sizes):
        raise ParameterError(
            "Requested training sizes exceed the available target training patients",
            details={"sizes": list(sizes), "available": available},
        )
    for i in freeze_grid:
        make_plan(i, spec)
    if not target.splits.get("val") or not target.splits.get("test"):
        raise DataError("Target dataset needs validation and test patients",
                        details={"splits": {k: len(v) for k, v in target.splits.items()}})


def run_scenario(
    scenario: Scenario,
    source_model: Optional[TrainedModel],
    target_dataset: DomainDataset,
    sizes: Sequence[int],
    freeze_grid: Sequence[int],
    seeds: Sequence[int],
    config: TrainConfig,
    jobs: int = 1,
    source_dataset: Optional[DomainDataset] = None,
    source_ref: Optional[str] = None,
) -> List[RunResult]:
    """
    All result rows of one scenario over the (size, freeze index, seed) grid

    Without a `source_model`, one is trained on `source_dataset` first.

    Args:
        scenario: Direct application, scratch training or adaptation
        source_model: Source-trained model, never modified
        target_dataset: Target volumes with train, val and test splits
        sizes: Target training sizes; ignored for direct application
        freeze_grid: Freeze indices; used by adaptation only
        seeds: Run seeds
        config: Training settings; each cell overrides the seed
        jobs: Worker processes
        source_dataset: Used to train a source model when none is given
        source_ref: Checkpoint path recorded in adapted provenance

    Returns:
        Result rows in canonical order; failed cells carry an error

    Raises:
        ParameterError: If a size or freeze index is out of range
        DataError: If the target lacks validation or test patients
    """
    scenario = Scenario(scenario)
    if source_model is None:
        if source_dataset is None:
            raise ParameterError("Either a source model or a source dataset is required")
        source_model = train_model(source_dataset.split("train"), source_dataset.split("val"), config)
    spec = source_model.params.spec
    validate_grid(target_dataset, sizes if scenario != Scenario.DIRECT else [],
                  freeze_grid if scenario == Scenario.ADAPTED else [], spec)

    cells = scenario_cells(scenario, sizes, freeze_grid, seeds)
    logger.info(f"Running scenario {int(scenario)} with {len(cells)} cells on {jobs} worker(s)")
    context = _Context(source=source_model, target=target_dataset, config=config, source_ref=source_ref,
                       log_level=get_logger().getEffectiveLevel())
    return execute_cells(cells, context, jobs)
