from enum import Enum
from pydantic import BaseModel, root_validator, validator
from typing import Tuple


class DomainTag(str, Enum):
    SOURCE = "source"
    TARGET = "target"


class DomainConfig(BaseModel):
    """Generator parameters realizing one acquisition protocol.

    Thin-slice protocols show less partial-volume blurring, so lesions and
    other fine hyperintense structures (the "mimics") keep more contrast.
    """
    domain_tag: DomainTag = DomainTag.SOURCE
    blur_sigma: float = 1.2  # pixels
    lesion_contrast: float = 0.35
    noise_sigma: float = 0.02
    intensity_gamma: float = 1.0
    lesion_count_range: Tuple[int, int] = (1, 6)
    lesion_radius_range: Tuple[float, float] = (2.0, 7.0)  # pixels
    mimic_count_range: Tuple[int, int] = (3, 8)
    mimic_contrast: float = 0.15
    image_side: int = 128
    seed: int = 11

    @validator("blur_sigma")
    def validate_blur(cls, v):
        if v < 0:
            raise ValueError("blur_sigma must be non-negative")
        return v

    @validator("lesion_contrast")
    def validate_contrast(cls, v):
        if v <= 0:
            raise ValueError("lesion_contrast must be positive")
        return v

    @validator("noise_sigma", "mimic_contrast")
    def validate_non_negative(cls, v):
        if v < 0:
            raise ValueError("value must be non-negative")
        return v

    @validator("intensity_gamma")
    def validate_gamma(cls, v):
        if v <= 0:
            raise ValueError("intensity_gamma must be positive")
        return v

    @validator("lesion_count_range", "mimic_count_range")
    def validate_count_range(cls, v):
        lo, hi = v
        if lo < 0 or hi < lo:
            raise ValueError("count range must satisfy 0 <= low <= high")
        return v

    @validator("lesion_radius_range")
    def validate_radius_range(cls, v):
        lo, hi = v
        if lo <= 0 or hi < lo:
            raise ValueError("radius range must satisfy 0 < low <= high")
        return v

    @validator("image_side")
    def validate_image_side(cls, v):
        if v < 64:
            raise ValueError("image_side must be at least 64")
        return v

    class Config:
        extra = "forbid"
        use_enum_values = False


class SplitSizes(BaseModel):
    train: int
    val: int
    test: int

    @validator("train", "val", "test")
    def validate_size(cls, v):
        if v < 0:
            raise ValueError("split sizes must be non-negative")
        return v

    @property
    def total(self) -> int:
        return self.train + self.val + self.test

    class Config:
        extra = "forbid"


def default_source_config(**overrides) -> DomainConfig:
    """Thick-slice legacy protocol: blurrier, lower contrast."""
    values = dict(domain_tag=DomainTag.SOURCE, blur_sigma=1.2, lesion_contrast=0.35,
                  intensity_gamma=1.0, mimic_contrast=0.15, seed=11)
    values.update(overrides)
    return DomainConfig(**values)


def default_target_config(**overrides) -> DomainConfig:
    """Thin-slice follow-up protocol: sharper, higher contrast.

    Lesions are fewer and smaller than in the source, so a few target
    patients yield few lesion patches. Thin mimics resolve in thin slices:
    many of them, visible but dimmer than lesions.
    """
    values = dict(domain_tag=DomainTag.TARGET, blur_sigma=0.6, lesion_contrast=0.55,
                  intensity_gamma=0.8, mimic_contrast=0.3, lesion_count_range=(1, 3),
                  lesion_radius_range=(2.0, 5.0), mimic_count_range=(8, 16), seed=23)
    values.update(overrides)
    return DomainConfig(**values)


# One fifth of the published 200/30/50 and 100/26/33 patient splits
# (validation and test floors raised so AUC and Dice stay meaningful).
DEFAULT_SOURCE_SPLIT = SplitSizes(train=40, val=6, test=10)
DEFAULT_TARGET_SPLIT = SplitSizes(train=20, val=6, test=10)


class SynthConfig(BaseModel):
    """Configuration of a synthetic source/target domain pair.

    Per-domain generator seeds derive from the top-level seed (source: seed,
    target: seed + 1), so one key reproduces the whole pair. Partial domain
    sections are merged onto that domain's defaults.
    """
    seed: int
    source: DomainConfig = default_source_config()
    target: DomainConfig = default_target_config()
    source_split: SplitSizes = DEFAULT_SOURCE_SPLIT
    target_split: SplitSizes = DEFAULT_TARGET_SPLIT

    @root_validator(pre=True)
    def merge_domain_sections(cls, values):
        defaults = {"source": default_source_config, "target": default_target_config}
        for name, factory in defaults.items():
            section = values.get(name)
            if isinstance(section, dict):
                if "seed" in section:
                    raise ValueError(f"{name}.seed is derived from the top-level seed")
                if "domain_tag" in section:
                    raise ValueError(f"{name}.domain_tag is fixed")
                merged = factory().dict()
                merged.update(section)
                values[name] = merged
        return values

    @root_validator(skip_on_failure=True)
    def derive_domain_seeds(cls, values):
        seed = values["seed"]
        values["source"] = values["source"].copy(update={"seed": seed, "domain_tag": DomainTag.SOURCE})
        values["target"] = values["target"].copy(update={"seed": seed + 1, "domain_tag": DomainTag.TARGET})
        return values

    class Config:
        extra = "forbid"
