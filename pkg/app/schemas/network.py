from pydantic import BaseModel, validator
from typing import List

DEFAULT_CONV_WIDTHS = [16, 16, 16, 16, 32, 32, 32, 32, 64, 64, 64, 64]
PUBLISHED_DENSE_WIDTHS = [256, 128, 2]
KERNEL_SIZE = 3


class NetworkSpec(BaseModel):
    """Architecture of the pooling-free patch classifier.

    Layers are counted from the input: the convolutional layers first, then
    the dense layers. The softmax is parameterless and not counted.
    """
    conv_widths: List[int] = DEFAULT_CONV_WIDTHS
    dense_widths: List[int] = PUBLISHED_DENSE_WIDTHS
    input_channels: int = 2
    patch_side: int = 32

    @validator("conv_widths")
    def validate_conv_widths(cls, v):
        if not v:
            raise ValueError("At least one convolutional layer is required")
        if any(w < 1 for w in v):
            raise ValueError("Convolution widths must be positive")
        return v

    @validator("dense_widths")
    def validate_dense_widths(cls, v):
        if not v:
            raise ValueError("At least one dense layer is required")
        if any(w < 1 for w in v):
            raise ValueError("Dense widths must be positive")
        if v[-1] != 2:
            raise ValueError("The output layer must have 2 units")
        return v

    @validator("input_channels")
    def validate_input_channels(cls, v):
        if v < 1:
            raise ValueError("Input channel count must be positive")
        return v

    @validator("patch_side")
    def validate_patch_side(cls, v, values):
        convs = values.get("conv_widths") or []
        if v - (KERNEL_SIZE - 1) * len(convs) < 1:
            raise ValueError(
                f"Patch side {v} is too small for {len(convs)} valid {KERNEL_SIZE}x{KERNEL_SIZE} convolutions"
            )
        return v

    @property
    def n_conv(self) -> int:
        return len(self.conv_widths)

    @property
    def n_dense(self) -> int:
        return len(self.dense_widths)

    @property
    def depth(self) -> int:
        return self.n_conv + self.n_dense

    @property
    def final_map_side(self) -> int:
        """Spatial side of the last convolutional feature map."""
        return self.patch_side - (KERNEL_SIZE - 1) * self.n_conv

    @property
    def flat_features(self) -> int:
        return self.conv_widths[-1] * self.final_map_side ** 2

    @property
    def layer_names(self) -> List[str]:
        return [f"conv{i + 1}" for i in range(self.n_conv)] + [f"dense{i + 1}" for i in range(self.n_dense)]

    def is_published(self) -> bool:
        """True for 12 convolutions and a 256/128/2 head on 32x32 two-channel patches."""
        return (
            self.n_conv == 12
            and self.dense_widths == PUBLISHED_DENSE_WIDTHS
            and self.input_channels == 2
            and self.patch_side == 32
        )

    class Config:
        extra = "forbid"
        allow_mutation = False
