"""The pooling-free patch classifier: initialization, forward and backward passes.

Every hidden layer runs linear -> batch norm -> ReLU; the two hidden dense
layers add dropout in train mode. The output layer feeds the softmax
directly. Frozen layers keep their BN running statistics in both modes.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from app.exceptions import DimensionError, ParameterError, StateError
from app.models.params import Gradients, LayerParams, ParamSet
from app.schemas.network import KERNEL_SIZE, NetworkSpec
from app.services.tensor import ConvCache, Tensor, conv2d_backward, conv2d_forward, matmul
from app.utils.logger import get_logger

logger = get_logger("network")

DEFAULT_DROPOUT = 0.3
BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


class ForwardMode(str, Enum):
    TRAIN = "train"
    INFER = "infer"


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    axes: Tuple[int, ...]
    batch_stats: bool


@dataclass
class LayerCache:
    kind: str
    conv: Optional[ConvCache] = None
    dense_input: Optional[np.ndarray] = None
    bn: Optional[BatchNormCache] = None
    relu_mask: Optional[np.ndarray] = None
    dropout_mask: Optional[np.ndarray] = None
    input_shape: Optional[Tuple[int, ...]] = None


@dataclass
class ForwardCache:
    mode: ForwardMode
    layers: List[LayerCache] = field(default_factory=list)
    probs: Optional[np.ndarray] = None


def he_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Draw N(0, sqrt(2 / fan_in)) weights."""
    if fan_in < 1:
        raise ParameterError("He initialization needs a positive fan-in", details={"fan_in": fan_in})
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def build_network(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> ParamSet:
    """Fresh He-initialized parameters; BN at identity, nothing frozen."""
    layers: List[LayerParams] = []
    names = spec.layer_names
    in_channels = spec.input_channels
    for i, width in enumerate(spec.conv_widths):
        fan_in = in_channels * KERNEL_SIZE * KERNEL_SIZE
        layers.append(LayerParams(
            name=names[i],
            kind="conv",
            weight=he_init((width, in_channels, KERNEL_SIZE, KERNEL_SIZE), fan_in, rng, dtype),
            bias=np.zeros(width, dtype=dtype),
            gamma=np.ones(width, dtype=dtype),
            beta=np.zeros(width, dtype=dtype),
            running_mean=np.zeros(width, dtype=dtype),
            running_var=np.ones(width, dtype=dtype),
        ))
        in_channels = width

    in_features = spec.flat_features
    for i, width in enumerate(spec.dense_widths):
        is_output = i == spec.n_dense - 1
        layers.append(LayerParams(
            name=names[spec.n_conv + i],
            kind="dense",
            weight=he_init((width, in_features), in_features, rng, dtype),
            bias=np.zeros(width, dtype=dtype),
            gamma=None if is_output else np.ones(width, dtype=dtype),
            beta=None if is_output else np.zeros(width, dtype=dtype),
            running_mean=None if is_output else np.zeros(width, dtype=dtype),
            running_var=None if is_output else np.ones(width, dtype=dtype),
        ))
        in_features = width

    params = ParamSet(spec=spec, layers=layers)
    logger.debug(f"Built network with depth {spec.depth} and {params.num_parameters()} parameters")
    return params


def parameter_count(spec: NetworkSpec) -> int:
    """Closed-form trainable parameter count.

    conv:   C_in*9*C_out weights + C_out bias + 2*C_out BN scale/shift
    hidden: in*out weights + out bias + 2*out BN scale/shift
    output: in*2 weights + 2 bias
    """
    total = 0
    c_in = spec.input_channels
    for c_out in spec.conv_widths:
        total += c_in * KERNEL_SIZE * KERNEL_SIZE * c_out + 3 * c_out
        c_in = c_out
    f_in = spec.flat_features
    for f_out in spec.dense_widths[:-1]:
        total += f_in * f_out + 3 * f_out
        f_in = f_out
    total += f_in * spec.dense_widths[-1] + spec.dense_widths[-1]
    return total


def batchnorm_forward(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: ForwardMode,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
    use_batch_stats: Optional[bool] = None,
) -> Tuple[Tensor, BatchNormCache]:
    """Per-feature batch normalization of [N, F] or [N, C, H, W] activations.

    Train mode normalizes with batch statistics and folds them into the
    running statistics in place; infer mode (or `use_batch_stats=False`)
    uses the running statistics untouched.
    """
    if use_batch_stats is None:
        use_batch_stats = mode == ForwardMode.TRAIN
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    if use_batch_stats:
        if x.shape[0] < 2:
            raise ParameterError("Train-mode batch normalization needs a batch of at least 2",
                                 details={"batch_size": int(x.shape[0])})
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.astype(running_var.dtype)
    else:
        mean, var = running_mean, running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = x_hat * gamma.reshape(shape) + beta.reshape(shape)
    return y, BatchNormCache(x_hat=x_hat, inv_std=inv_std, gamma=gamma, axes=axes, batch_stats=use_batch_stats)


def batchnorm_backward(dy: Tensor, cache: BatchNormCache) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients wrt input, gamma and beta."""
    shape = (1, -1) if dy.ndim == 2 else (1, -1, 1, 1)
    dgamma = np.sum(dy * cache.x_hat, axis=cache.axes)
    dbeta = np.sum(dy, axis=cache.axes)
    dx_hat = dy * cache.gamma.reshape(shape)
    inv_std = cache.inv_std.reshape(shape)
    if not cache.batch_stats:
        return dx_hat * inv_std, dgamma, dbeta
    m = dy.size // dy.shape[1]
    dx = (inv_std / m) * (
        m * dx_hat
        - np.sum(dx_hat, axis=cache.axes).reshape(shape)
        - cache.x_hat * np.sum(dx_hat * cache.x_hat, axis=cache.axes).reshape(shape)
    )
    return dx, dgamma, dbeta


def dropout_forward(
    x: Tensor, rate: float, mode: ForwardMode, rng: Optional[np.random.Generator]
) -> Tuple[Tensor, Optional[Tensor]]:
    """Inverted dropout; returns the output and the scaled keep-mask (None when inactive)."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError("Dropout rate must lie in [0, 1)", details={"rate": rate})
    if mode == ForwardMode.INFER or rate == 0.0:
        return x, None
    if rng is None:
        raise ParameterError("Train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout(x: Tensor, rate: float = DEFAULT_DROPOUT, mode: ForwardMode = ForwardMode.TRAIN,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    return dropout_forward(x, rate, mode, rng)[0]


def softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(
    params: ParamSet,
    batch: Tensor,
    mode: ForwardMode,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = DEFAULT_DROPOUT,
    bn_momentum: float = BN_MOMENTUM,
    bn_epsilon: float = BN_EPSILON,
) -> Tuple[Tensor, ForwardCache]:
    """
    Class probabilities [N, 2] for a [N, C, P, P] patch batch

    Args:
        params: Network parameters; train mode updates BN running statistics
            of trainable layers in place
        batch: Patch batch
        mode: Train (batch statistics, dropout) or infer (running statistics)
        rng: Dropout generator, required in train mode with a non-zero rate
        dropout_rate: Drop probability after each hidden dense layer
        bn_momentum: Weight of the old running statistics
        bn_epsilon: Variance floor

    Returns:
        Probabilities and the cache `backward` needs

    Raises:
        DimensionError: If the batch does not match the input shape
    """
    spec = params.spec
    expected = (spec.input_channels, spec.patch_side, spec.patch_side)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise DimensionError(
            f"Expected patches of shape [N, {expected[0]}, {expected[1]}, {expected[2]}]",
            details={"got": list(batch.shape)},
        )

    h = batch.astype(params.dtype, copy=False)
    cache = ForwardCache(mode=mode)
    n_layers = len(params.layers)

    for index, layer in enumerate(params.layers):
        lc = LayerCache(kind=layer.kind)
        is_output = index == n_layers - 1

        if layer.kind == "conv":
            z, lc.conv = conv2d_forward(h, layer.weight, layer.bias)
        else:
            if h.ndim == 4:
                lc.input_shape = h.shape
                h = h.reshape(h.shape[0], -1)
            lc.dense_input = h
            z = matmul(h, layer.weight.T) + layer.bias

        if is_output:
            cache.layers.append(lc)
            probs = softmax(z)
            cache.probs = probs
            return probs, cache

        use_batch_stats = mode == ForwardMode.TRAIN and not layer.frozen
        y, lc.bn = batchnorm_forward(
            z, layer.gamma, layer.beta, layer.running_mean, layer.running_var,
            mode, bn_momentum, bn_epsilon, use_batch_stats=use_batch_stats,
        )
        lc.relu_mask = y > 0
        h = y * lc.relu_mask
        if layer.kind == "dense":
            h, lc.dropout_mask = dropout_forward(h, dropout_rate, mode, rng)
        cache.layers.append(lc)

    raise StateError("Network has no output layer")


def backward(params: ParamSet, cache: ForwardCache, grad_logits: Tensor) -> Gradients:
    """Parameter gradients given the loss gradient wrt the pre-softmax logits.

    Frozen layers produce no entries, and propagation stops at the lowest
    trainable layer.
    """
    if cache.mode != ForwardMode.TRAIN:
        raise StateError("Backward requires the cache of a train-mode forward pass",
                         details={"mode": cache.mode.value})
    if len(cache.layers) != len(params.layers):
        raise StateError("Cache does not match the parameter set",
                         details={"cache_layers": len(cache.layers), "param_layers": len(params.layers)})

    trainable = [i for i, layer in enumerate(params.layers) if not layer.frozen]
    grads: Gradients = {}
    if not trainable:
        return grads
    lowest = trainable[0]

    grad = grad_logits
    for index in range(len(params.layers) - 1, lowest - 1, -1):
        layer = params.layers[index]
        lc = cache.layers[index]
        need_input_grad = index > lowest

        if lc.bn is not None:
            if lc.dropout_mask is not None:
                grad = grad * lc.dropout_mask
            grad = grad * lc.relu_mask
            grad, dgamma, dbeta = batchnorm_backward(grad, lc.bn)
            if not layer.frozen:
                grads[f"{layer.name}.gamma"] = dgamma
                grads[f"{layer.name}.beta"] = dbeta

        if layer.kind == "conv":
            grad_in, dw, db = conv2d_backward(lc.conv, grad, need_input_grad=need_input_grad)
        else:
            dw = grad.T @ lc.dense_input
            db = grad.sum(axis=0)
            grad_in = grad @ layer.weight if need_input_grad else None
            if grad_in is not None and lc.input_shape is not None:
                grad_in = grad_in.reshape(lc.input_shape)

        if not layer.frozen:
            grads[f"{layer.name}.weight"] = dw
            grads[f"{layer.name}.bias"] = db
        grad = grad_in

    return grads


def predict_proba(params: ParamSet, patches: Tensor, batch_size: int = 512,
                  bn_epsilon: float = BN_EPSILON) -> Tensor:
    """Infer-mode lesion-class probability for every patch."""
    scores = []
    for start in range(0, len(patches), batch_size):
        probs, _ = forward(params, patches[start:start + batch_size], ForwardMode.INFER,
                           bn_epsilon=bn_epsilon)
        scores.append(probs[:, 1])
    if not scores:
        return np.zeros(0, dtype=params.dtype)
    return np.concatenate(scores)
