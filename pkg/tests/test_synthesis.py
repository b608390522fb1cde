import numpy as np
import pytest
from numpy.testing import assert_array_equal

from app.exceptions import ParameterError
from app.schemas.domain import DomainTag, SplitSizes, SynthConfig
from app.services.synthesis import generate_domain, generate_pair, generate_volume, lesion_contrast_measure
from tests.conftest import small_domain_config


def test_generation_is_deterministic():
    config = small_domain_config(DomainTag.SOURCE, 5)
    assert generate_volume(config, 3).equals(generate_volume(config, 3))


def test_patients_differ():
    config = small_domain_config(DomainTag.SOURCE, 5)
    assert not np.array_equal(generate_volume(config, 0).flair, generate_volume(config, 1).flair)


def test_volume_invariants():
    volume = generate_volume(small_domain_config(DomainTag.TARGET, 2), 0)
    brain = volume.brain_mask.astype(bool)
    assert volume.shape == (64, 64)
    assert volume.domain_tag == DomainTag.TARGET
    assert not np.any(volume.wmh_mask.astype(bool) & ~brain)
    for channel in (volume.flair, volume.t1):
        assert channel[brain].min() == pytest.approx(0.0)
        assert channel[brain].max() == pytest.approx(1.0)
        assert_array_equal(channel[~brain], 0)


def test_zero_lesion_range_gives_empty_mask():
    volume = generate_volume(small_domain_config(DomainTag.SOURCE, 5, lesion_count_range=(0, 0)), 0)
    assert volume.wmh_mask.sum() == 0


def test_domain_splits_follow_index_order():
    dataset = generate_domain(small_domain_config(DomainTag.SOURCE, 1), 5, SplitSizes(train=2, val=1, test=2))
    assert dataset.splits == {"train": [0, 1], "val": [2], "test": [3, 4]}
    assert [v.patient_id for v in dataset.split("test")] == [3, 4]


def test_split_sizes_must_match_patient_count():
    with pytest.raises(ParameterError):
        generate_domain(small_domain_config(DomainTag.SOURCE, 1), 5, SplitSizes(train=2, val=1, test=1))


def test_target_domain_has_stronger_lesion_contrast():
    source = generate_domain(small_domain_config(DomainTag.SOURCE, 1, blur_sigma=1.5, lesion_contrast=0.2,
                                                 mimic_count_range=(0, 0)), 4)
    target = generate_domain(small_domain_config(DomainTag.TARGET, 2, blur_sigma=0.5, lesion_contrast=0.6,
                                                 mimic_count_range=(0, 0)), 4)
    assert lesion_contrast_measure(target) > lesion_contrast_measure(source)


def test_default_presets_shift_contrast_and_lesion_load():
    config = SynthConfig(seed=3, source_split=SplitSizes(train=6, val=0, test=0),
                         target_split=SplitSizes(train=6, val=0, test=0))
    source, target = generate_pair(config)

    assert lesion_contrast_measure(target) > lesion_contrast_measure(source)
    source_load = np.mean([v.wmh_mask.sum() for v in source.volumes])
    target_load = np.mean([v.wmh_mask.sum() for v in target.volumes])
    assert target_load < source_load
    assert config.target.mimic_count_range[0] > config.source.mimic_count_range[1]
    assert config.target.mimic_contrast < config.target.lesion_contrast


def test_synth_config_derives_domain_seeds():
    config = SynthConfig(seed=7, source={"image_side": 64}, target={"blur_sigma": 0.4})
    assert config.source.seed == 7
    assert config.target.seed == 8
    assert config.source.image_side == 64
    assert config.target.blur_sigma == 0.4
    assert config.target.domain_tag == DomainTag.TARGET


def test_synth_config_rejects_domain_seed():
    with pytest.raises(ValueError):
        SynthConfig(seed=7, source={"seed": 3})


def test_generate_pair_sizes():
    config = SynthConfig(
        seed=4,
        source={"image_side": 64, "lesion_radius_range": (1.5, 3.0)},
        target={"image_side": 64, "lesion_radius_range": (1.5, 3.0)},
        source_split=SplitSizes(train=2, val=1, test=1),
        target_split=SplitSizes(train=1, val=1, test=1),
    )
    source, target = generate_pair(config)
    assert len(source.volumes) == 4 and len(target.volumes) == 3
    assert source.domain_tag == DomainTag.SOURCE and target.domain_tag == DomainTag.TARGET
