import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.exceptions import ConversionError, DimensionError, ParameterError
from app.schemas.network import NetworkSpec
from app.services.inference import evaluate_split, fcn_forward, pad_for_segmentation, segment, to_fcn
from app.services.network import ForwardMode, build_network, forward, predict_proba
from app.services.sampling import extract_patches, valid_centers


@pytest.fixture
def warmed_params(tiny_params):
    """Tiny network whose BN running statistics have moved away from identity."""
    rng = np.random.default_rng(8)
    for _ in range(3):
        batch = (rng.standard_normal((8, 2, 12, 12)) + 0.5).astype(np.float32)
        forward(tiny_params, batch, ForwardMode.TRAIN, rng)
    return tiny_params


def test_fcn_matches_patch_network(warmed_params):
    image = np.random.default_rng(3).standard_normal((2, 20, 20)).astype(np.float32)
    probs = fcn_forward(to_fcn(warmed_params), image)
    assert probs.shape == (2, 9, 9)

    windows = np.stack([image[:, y:y + 12, x:x + 12] for y in range(9) for x in range(9)])
    expected = predict_proba(warmed_params, windows)
    assert_allclose(probs[1].ravel(), expected, atol=1e-5)


@pytest.mark.parametrize("param_seed", range(10))
def test_fcn_matches_patch_network_on_sampled_voxels(tiny_spec, param_seed):
    params = build_network(tiny_spec, np.random.default_rng(param_seed))
    rng = np.random.default_rng(100 + param_seed)
    for _ in range(2):
        forward(params, (rng.standard_normal((8, 2, 12, 12)) + 0.5).astype(np.float32), ForwardMode.TRAIN, rng)
    fcn = to_fcn(params)

    for _ in range(10):
        image = rng.standard_normal((2, 26, 26)).astype(np.float32)
        probs = fcn_forward(fcn, image)
        chosen = rng.choice(15 * 15, size=100, replace=False)
        ys, xs = np.unravel_index(chosen, (15, 15))
        windows = np.stack([image[:, y:y + 12, x:x + 12] for y, x in zip(ys, xs)])
        assert_allclose(probs[1, ys, xs], predict_proba(params, windows), atol=1e-5)


def test_converting_twice_gives_equal_models(warmed_params):
    first = to_fcn(warmed_params)
    assert first.equals(to_fcn(warmed_params))

    warmed_params.layers[1].running_var[0] += 0.5
    assert not first.equals(to_fcn(warmed_params))


def test_fcn_chunking_does_not_change_output(warmed_params):
    image = np.random.default_rng(4).standard_normal((2, 30, 25)).astype(np.float32)
    fcn = to_fcn(warmed_params)
    assert_allclose(fcn_forward(fcn, image, chunk_rows=3), fcn_forward(fcn, image, chunk_rows=64), atol=1e-6)


def test_published_network_output_size():
    params = build_network(NetworkSpec(), np.random.default_rng(0))
    image = np.random.default_rng(1).random((2, 64, 64)).astype(np.float32)
    probs = fcn_forward(to_fcn(params), image)
    assert probs.shape == (2, 33, 33)


def test_fcn_rejects_small_image(tiny_params):
    with pytest.raises(DimensionError):
        fcn_forward(to_fcn(tiny_params), np.zeros((2, 11, 30), dtype=np.float32))


def test_fcn_rejects_wrong_channels(tiny_params):
    with pytest.raises(DimensionError):
        fcn_forward(to_fcn(tiny_params), np.zeros((3, 20, 20), dtype=np.float32))


def test_conversion_rejects_mismatched_layers(tiny_params):
    tiny_params.layers[2].weight = np.zeros((8, 10), dtype=np.float32)
    with pytest.raises(ConversionError):
        to_fcn(tiny_params)


def test_conversion_copies_parameters(tiny_params):
    fcn = to_fcn(tiny_params)
    tiny_params.layers[0].weight[...] = 0
    assert fcn.layers[0].kernels.any()
    assert fcn.layers[2].kernels.shape == (8, 3, 8, 8)
    assert fcn.layers[3].kernels.shape == (4, 8, 1, 1)


def test_padding_aligns_output_with_center():
    padded = pad_for_segmentation(np.ones((2, 20, 20)), 12)
    assert padded.shape == (2, 31, 31)
    assert padded[0, 6, 6] == 1 and padded[0, 5, 5] == 0 and padded[0, 25, 25] == 1 and padded[0, 26, 26] == 0


def test_segment_matches_patch_classifier_at_centers(warmed_params, target_dataset):
    volume = target_dataset.volumes[0]
    result = segment(to_fcn(warmed_params), volume)

    candidates = np.flatnonzero(volume.brain_mask.astype(bool) & valid_centers(volume.shape, 12))
    chosen = np.random.default_rng(0).choice(candidates, size=40, replace=False)
    rows, cols = np.unravel_index(chosen, volume.shape)
    expected = predict_proba(warmed_params, extract_patches(volume.image(), rows, cols, 12))
    assert_allclose(result.probability[rows, cols], expected, atol=1e-5)


def test_segment_output_is_brain_restricted(tiny_params, target_dataset):
    volume = target_dataset.volumes[1]
    fcn = to_fcn(tiny_params)
    brain = volume.brain_mask.astype(bool)

    everything = segment(fcn, volume, threshold=0.0)
    assert everything.mask.shape == volume.shape
    assert np.array_equal(everything.mask.astype(bool), brain)
    assert not everything.probability[~brain].any()

    nothing = segment(fcn, volume, threshold=1.01)
    assert nothing.mask.sum() == 0
    assert nothing.dice == 0.0
    assert nothing.has_reference


def test_segment_rejects_non_finite_threshold(tiny_params, target_dataset):
    with pytest.raises(ParameterError):
        segment(to_fcn(tiny_params), target_dataset.volumes[0], threshold=float("nan"))


def test_evaluate_split_reports_mean_and_pooled(tiny_params, target_dataset):
    volumes = target_dataset.split("test")
    evaluation = evaluate_split(to_fcn(tiny_params), volumes)
    assert sorted(evaluation.per_patient) == target_dataset.splits["test"]
    assert evaluation.mean_dice == pytest.approx(np.mean(list(evaluation.per_patient.values())))
    assert 0.0 <= evaluation.pooled_dice <= 1.0


def test_evaluate_split_requires_volumes(tiny_params):
    with pytest.raises(ParameterError):
        evaluate_split(to_fcn(tiny_params), [])
