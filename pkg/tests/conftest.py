import numpy as np
import pytest
from fastapi.testclient import TestClient

from app.main import app
from app.models.params import TrainedModel
from app.schemas.domain import DomainConfig, DomainTag, SplitSizes
from app.schemas.network import NetworkSpec
from app.schemas.training import TrainConfig
from app.schemas.transfer import ModelProvenance, ProvenanceKind
from app.services.model_service import model_service
from app.services.network import build_network
from app.services.synthesis import generate_domain

# Two convolutions on 12x12 patches: an 8x8 final map, depth 5
TINY_SPEC = NetworkSpec(conv_widths=[3, 3], dense_widths=[8, 4, 2], patch_side=12)


@pytest.fixture
def tiny_spec():
    return TINY_SPEC


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_params(tiny_spec):
    return build_network(tiny_spec, np.random.default_rng(0))


@pytest.fixture
def tiny_model(tiny_params):
    return TrainedModel(
        params=tiny_params,
        provenance=ModelProvenance(kind=ProvenanceKind.SOURCE_TRAINED, domain="source"),
        seed=0,
    )


@pytest.fixture
def fast_config():
    return TrainConfig(lr0=1e-3, batch_size=16, max_epochs=2, patience=2, seed=0, eval_batch_size=64)


def small_domain_config(tag: DomainTag, seed: int, **overrides) -> DomainConfig:
    values = dict(domain_tag=tag, image_side=64, lesion_count_range=(2, 4),
                  lesion_radius_range=(1.5, 3.0), mimic_count_range=(1, 3), seed=seed)
    if tag == DomainTag.TARGET:
        values.update(blur_sigma=0.6, lesion_contrast=0.55, intensity_gamma=0.8, mimic_contrast=0.3)
    values.update(overrides)
    return DomainConfig(**values)


@pytest.fixture(scope="session")
def source_dataset():
    return generate_domain(small_domain_config(DomainTag.SOURCE, 11), 6, SplitSizes(train=4, val=1, test=1))


@pytest.fixture(scope="session")
def target_dataset():
    return generate_domain(small_domain_config(DomainTag.TARGET, 12), 7, SplitSizes(train=3, val=2, test=2))


@pytest.fixture
def client():
    with TestClient(app) as test_client:
        yield test_client
    model_service.unload()
