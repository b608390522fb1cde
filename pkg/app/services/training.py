"""Optimization loop: cross-entropy, Adam with L2 decay, exponential LR decay,
early stopping and best-validation-AUC model selection."""
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from tqdm import tqdm

from app.exceptions import DataError, NumericError, ParameterError, StateError
from app.models.params import Gradients, ParamSet
from app.models.volume import PatchSet
from app.schemas.training import EpochRecord, TrainConfig, TrainingHistory
from app.services.metrics import roc_auc
from app.services.network import ForwardMode, backward, forward, predict_proba
from app.utils.logger import get_logger, log_training_operation

logger = get_logger("training")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
PROB_FLOOR = 1e-12


@dataclass
class AdamState:
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient wrt the pre-softmax logits."""
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[1] != 2 or labels.shape != (probs.shape[0],):
        raise DataError("Expected probs [N, 2] and labels [N]",
                        details={"probs": list(probs.shape), "labels": list(labels.shape)})
    if not np.all((labels == 0) | (labels == 1)):
        bad = np.unique(labels[(labels != 0) & (labels != 1)])
        raise DataError("Labels must be 0 or 1", details={"invalid": bad.tolist()[:10]})

    n = probs.shape[0]
    idx = labels.astype(np.int64)
    picked = probs[np.arange(n), idx].astype(np.float64)
    loss = float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))

    onehot = np.zeros_like(probs)
    onehot[np.arange(n), idx] = 1
    grad = (probs - onehot) / probs.dtype.type(n)
    return loss, grad


def adam_step(params: ParamSet, grads: Gradients, state: AdamState, lr: float,
              l2_lambda: float = 0.0) -> Tuple[ParamSet, AdamState]:
    """
    One bias-corrected Adam update, in place

    L2 decay is added to weight gradients only (not biases or BN scale/shift).

    Args:
        params: Parameters to update
        grads: Gradients keyed like `ParamSet.named_tensors`, trainable tensors only
        state: Moment estimates and step count, updated in place
        lr: Step size for this update
        l2_lambda: Weight decay coefficient

    Returns:
        The updated parameters and optimizer state

    Raises:
        StateError: On a gradient for a frozen tensor or a shape mismatch
    """
    for key in grads:
        if params.is_frozen(key):
            raise StateError("Gradient supplied for a frozen tensor", details={"tensor": key})

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t

    for key, g in grads.items():
        p = params.tensor(key)
        if g.shape != p.shape:
            raise StateError("Gradient shape does not match parameter",
                             details={"tensor": key, "param": list(p.shape), "grad": list(g.shape)})
        if l2_lambda and key.endswith(".weight"):
            g = g + l2_lambda * p
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        m, v = state.m[key], state.v[key]
        if m.shape != p.shape:
            raise StateError("Optimizer state shape does not match parameter",
                             details={"tensor": key, "param": list(p.shape), "state": list(m.shape)})

        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)

        m_hat = m / bc1
        v_hat = v / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype, copy=False)

    params.step += 1
    return params, state


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ParameterError("Epoch must be non-negative", details={"epoch": epoch})
    return config.lr0 * config.lr_decay ** epoch


def validation_auc(params: ParamSet, val_set: PatchSet, config: TrainConfig) -> float:
    scores = predict_proba(params, val_set.patches, config.eval_batch_size, config.bn_epsilon)
    return roc_auc(scores, val_set.labels)


def _train_epoch(params: ParamSet, train_set: PatchSet, state: AdamState, lr: float,
                 config: TrainConfig, rng: np.random.Generator, epoch: int,
                 show_progress: bool) -> float:
    n = len(train_set)
    order = rng.permutation(n)
    # A trailing batch of one cannot be batch-normalized and is skipped this epoch.
    n_usable = n if n % config.batch_size != 1 else n - 1
    starts = range(0, n_usable, config.batch_size)

    total_loss = 0.0
    seen = 0
    for start in tqdm(starts, desc=f"epoch {epoch}", disable=not show_progress, leave=False):
        idx = order[start:start + config.batch_size]
        batch = train_set.patches[idx]
        labels = train_set.labels[idx]

        probs, cache = forward(params, batch, ForwardMode.TRAIN, rng, config.dropout,
                               config.bn_momentum, config.bn_epsilon)
        loss, grad = cross_entropy_loss(probs, labels)
        if not np.isfinite(loss):
            raise NumericError("Non-finite training loss",
                               details={"epoch": epoch, "batch_start": int(start), "step": params.step})
        grads = backward(params, cache, grad)
        adam_step(params, grads, state, lr, config.l2_lambda)

        total_loss += loss * len(idx)
        seen += len(idx)
        logger.debug(f"epoch {epoch} batch {start // config.batch_size}: loss={loss:.5f}")

    return total_loss / max(seen, 1)


@log_training_operation("fit")
def fit(
    params: ParamSet,
    train_set: PatchSet,
    val_set: PatchSet,
    config: TrainConfig,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
    show_progress: bool = False,
) -> Tuple[ParamSet, TrainingHistory]:
    """
    Train `params` in place and return a copy of the best-validation-AUC snapshot

    The earliest epoch wins ties. With `max_epochs=0` the initial
    parameters are returned with an empty history.

    Args:
        params: Network to train; frozen layers are left untouched
        train_set: Training patches, reshuffled every epoch
        val_set: Validation patches scored once per epoch
        config: Optimizer, schedule and early-stopping settings
        on_epoch: Called with each epoch record
        show_progress: Show a per-epoch progress bar

    Returns:
        Best snapshot and the per-epoch history

    Raises:
        DataError: If either patch set is empty
        NumericError: If a batch loss is not finite
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("Training and validation sets must be non-empty",
                        details={"train": len(train_set), "val": len(val_set)})

    history = TrainingHistory()
    best_params = params.copy()
    if config.max_epochs == 0:
        return best_params, history

    rng = np.random.default_rng(config.seed)
    state = AdamState()
    best_auc = -np.inf
    stale = 0

    for epoch in range(config.max_epochs):
        lr = lr_at(epoch, config)
        loss = _train_epoch(params, train_set, state, lr, config, rng, epoch, show_progress)
        auc = validation_auc(params, val_set, config)
        record = EpochRecord(epoch=epoch, loss=loss, val_auc=auc, lr=lr)
        history.append(record)
        logger.info(f"epoch {epoch}: loss={loss:.5f} val_auc={auc:.5f} lr={lr:.3g}")
        if on_epoch is not None:
            on_epoch(record)

        if auc > best_auc:
            best_auc = auc
            best_params = params.copy()
            history.best_epoch = epoch
            history.best_val_auc = auc
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(f"Early stopping after epoch {epoch}: no val AUC gain in {stale} epochs")
                break

    return best_params, history
