"""Whole-image segmentation with the fully convolutional form of a patch network.

The first dense layer becomes a convolution whose kernel covers the last
conv feature map; later dense layers become 1x1 convolutions. Parameters are
reshaped, never retrained, so every output location reproduces the patch
classifier on the window centered there.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.exceptions import ConversionError, DimensionError, ParameterError
from app.models.params import ParamSet
from app.models.volume import Volume
from app.schemas.network import KERNEL_SIZE, NetworkSpec
from app.services.metrics import dice, pooled_dice
from app.services.network import BN_EPSILON, ForwardMode, batchnorm_forward, softmax
from app.services.tensor import conv2d_valid
from app.utils.logger import get_logger

logger = get_logger("inference")

DEFAULT_THRESHOLD = 0.5
CHUNK_ROWS = 16


@dataclass
class FcnLayer:
    name: str
    kernels: np.ndarray  # [C_out, C_in, k, k]
    bias: np.ndarray
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    @property
    def has_bn(self) -> bool:
        return self.gamma is not None


@dataclass
class FcnModel:
    spec: NetworkSpec
    layers: List[FcnLayer]
    bn_epsilon: float = BN_EPSILON

    def equals(self, other: "FcnModel") -> bool:
        if self.spec != other.spec or len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            for attr in ("kernels", "bias", "gamma", "beta", "running_mean", "running_var"):
                x, y = getattr(a, attr), getattr(b, attr)
                if (x is None) != (y is None) or (x is not None and not np.array_equal(x, y)):
                    return False
        return True


@dataclass
class SegmentationResult:
    probability: np.ndarray  # [H, W], zero outside the brain
    mask: np.ndarray         # [H, W] uint8
    threshold: float
    dice: float
    has_reference: bool = True  # false when the volume carries an empty WMH mask


@dataclass
class SplitEvaluation:
    per_patient: Dict[int, float] = field(default_factory=dict)
    mean_dice: float = 0.0
    pooled_dice: float = 0.0


def to_fcn(params: ParamSet, bn_epsilon: float = BN_EPSILON) -> FcnModel:
    """
    Convert a patch network into its fully convolutional equivalent

    The first dense layer becomes a convolution over the final feature map,
    later dense layers become 1x1 convolutions. Tensors are copied.

    Args:
        params: Trained patch network
        bn_epsilon: Epsilon for infer-mode batch normalization

    Returns:
        FCN model whose output at every position equals the patch network
        applied to the window there

    Raises:
        ConversionError: If the layers do not match the network spec
    """
    spec = params.spec
    side = spec.final_map_side
    if len(params.layers) != spec.depth:
        raise ConversionError("Parameter set does not match its network description",
                              details={"layers": len(params.layers), "depth": spec.depth})

    layers: List[FcnLayer] = []
    in_channels = spec.input_channels
    for index, layer in enumerate(params.layers):
        if index < spec.n_conv:
            expected = (spec.conv_widths[index], in_channels, KERNEL_SIZE, KERNEL_SIZE)
            if layer.kind != "conv" or layer.weight.shape != expected:
                raise ConversionError(
                    f"Layer {layer.name} is not the expected convolution",
                    details={"layer": layer.name, "expected": list(expected), "got": list(layer.weight.shape)},
                )
            kernels = layer.weight.copy()
            in_channels = expected[0]
        else:
            d = index - spec.n_conv
            kernel_side = side if d == 0 else 1
            width = spec.dense_widths[d]
            expected_flat = (width, in_channels * kernel_side * kernel_side)
            if layer.kind != "dense" or layer.weight.shape != expected_flat:
                raise ConversionError(
                    f"Dense layer {layer.name} cannot be reshaped to a {kernel_side}x{kernel_side} convolution",
                    details={"layer": layer.name, "expected": list(expected_flat), "got": list(layer.weight.shape)},
                )
            # Flattening order of the patch network is (channel, row, column).
            kernels = layer.weight.reshape(width, in_channels, kernel_side, kernel_side).copy()
            in_channels = width

        layers.append(FcnLayer(
            name=layer.name,
            kernels=kernels,
            bias=layer.bias.copy(),
            gamma=None if layer.gamma is None else layer.gamma.copy(),
            beta=None if layer.beta is None else layer.beta.copy(),
            running_mean=None if layer.running_mean is None else layer.running_mean.copy(),
            running_var=None if layer.running_var is None else layer.running_var.copy(),
        ))
    return FcnModel(spec=spec.copy(), layers=layers, bn_epsilon=bn_epsilon)


def _conv_rows(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, chunk_rows: int) -> np.ndarray:
    """Valid convolution of a [C, H, W] map, computed in bands of output rows."""
    k = kernels.shape[2]
    out_h, out_w = x.shape[1] - k + 1, x.shape[2] - k + 1
    out = np.empty((kernels.shape[0], out_h, out_w), dtype=x.dtype)
    for r0 in range(0, out_h, chunk_rows):
        r1 = min(r0 + chunk_rows, out_h)
        out[:, r0:r1] = conv2d_valid(x[:, r0:r1 + k - 1], kernels, bias)
    return out


def fcn_forward(fcn: FcnModel, image: np.ndarray, chunk_rows: int = CHUNK_ROWS) -> np.ndarray:
    """Class probabilities [2, H-P+1, W-P+1] for a [C, H, W] image."""
    spec = fcn.spec
    if image.ndim != 3 or image.shape[0] != spec.input_channels:
        raise DimensionError(f"Expected a [{spec.input_channels}, H, W] image",
                             details={"got": list(image.shape)})
    if image.shape[1] < spec.patch_side or image.shape[2] < spec.patch_side:
        raise DimensionError(
            f"Image is smaller than the {spec.patch_side}x{spec.patch_side} receptive field",
            details={"got": list(image.shape), "patch_side": spec.patch_side},
        )

    h = image.astype(fcn.layers[0].kernels.dtype, copy=False)
    for layer in fcn.layers:
        h = _conv_rows(h, layer.kernels, layer.bias, chunk_rows)
        if layer.has_bn:
            y, _ = batchnorm_forward(h[np.newaxis], layer.gamma, layer.beta, layer.running_mean,
                                     layer.running_var, ForwardMode.INFER, eps=fcn.bn_epsilon)
            h = np.maximum(y[0], 0)
    return softmax(h[np.newaxis])[0]


def pad_for_segmentation(image: np.ndarray, patch_side: int) -> np.ndarray:
    """Zero-pad so each output aligns with its center voxel: P/2 before, P/2 - 1 after."""
    before, after = patch_side // 2, patch_side // 2 - 1
    return np.pad(image, ((0, 0), (before, after), (before, after)))


def segment(fcn: FcnModel, volume: Volume, threshold: float = DEFAULT_THRESHOLD) -> SegmentationResult:
    """
    Probability map, thresholded brain-restricted mask and Dice against the reference

    Args:
        fcn: Converted network
        volume: Normalized volume, at least one patch side in each direction
        threshold: Voxels at or above it are lesion

    Returns:
        Probability map and mask at the volume's resolution, zero outside the brain

    Raises:
        ParameterError: If the threshold is not finite
        DimensionError: If the image is smaller than one patch
    """
    if not np.isfinite(threshold):
        raise ParameterError("Threshold must be finite", details={"threshold": threshold})
    side = fcn.spec.patch_side
    if volume.shape[0] < side or volume.shape[1] < side:
        raise DimensionError(
            f"Image {volume.shape[0]}x{volume.shape[1]} is smaller than {side}x{side}",
            details={"shape": list(volume.shape), "patch_side": side},
        )

    probs = fcn_forward(fcn, pad_for_segmentation(volume.image(), side))
    brain = volume.brain_mask.astype(bool)
    probability = np.where(brain, probs[1], 0).astype(np.float32)
    mask = ((probability >= threshold) & brain).astype(np.uint8)
    score = dice(mask, volume.wmh_mask)
    logger.debug(f"Segmented patient {volume.patient_id}: {int(mask.sum())} voxels, dice={score:.4f}")
    return SegmentationResult(probability=probability, mask=mask, threshold=threshold, dice=score,
                              has_reference=bool(volume.wmh_mask.any()))


def evaluate_split(fcn: FcnModel, volumes: Sequence[Volume],
                   threshold: float = DEFAULT_THRESHOLD) -> SplitEvaluation:
    """
    Per-patient Dice, their mean (the headline figure) and voxel-pooled Dice

    Args:
        fcn: Converted network
        volumes: Test volumes
        threshold: Mask threshold

    Returns:
        Dice per patient id, mean Dice and pooled Dice

    Raises:
        ParameterError: If `volumes` is empty
    """
    if not volumes:
        raise ParameterError("No volumes to evaluate")
    results = [segment(fcn, volume, threshold) for volume in volumes]
    per_patient = {v.patient_id: r.dice for v, r in zip(volumes, results)}
    return SplitEvaluation(
        per_patient=per_patient,
        mean_dice=float(np.mean(list(per_patient.values()))),
        pooled_dice=pooled_dice([r.mask for r in results], [v.wmh_mask for v in volumes]),
    )
