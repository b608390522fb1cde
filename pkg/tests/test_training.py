import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.exceptions import DataError, NumericError, ParameterError, StateError
from app.models.volume import PatchSet
from app.schemas.training import TrainConfig
from app.services.network import build_network
from app.services.training import AdamState, adam_step, cross_entropy_loss, fit, lr_at


def _separable_patches(n, seed):
    rng = np.random.default_rng(seed)
    labels = np.tile([0.0, 1.0], n // 2).astype(np.float32)
    patches = rng.standard_normal((n, 2, 12, 12)).astype(np.float32) * 0.3
    patches[labels == 1] += 1.0
    return PatchSet(patches=patches, labels=labels)


def test_cross_entropy_oracle():
    loss, grad = cross_entropy_loss(np.array([[0.5, 0.5]]), np.array([1]))
    assert loss == pytest.approx(math.log(2))
    assert_allclose(grad, [[0.5, -0.5]])


def test_cross_entropy_averages_over_batch():
    probs = np.array([[0.9, 0.1], [0.2, 0.8]])
    loss, grad = cross_entropy_loss(probs, np.array([0, 1]))
    assert loss == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2)
    assert_allclose(grad, [[-0.05, 0.05], [0.1, -0.1]])


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(DataError):
        cross_entropy_loss(np.array([[0.5, 0.5]]), np.array([2]))


def test_adam_first_step_moves_by_learning_rate(tiny_spec):
    params = build_network(tiny_spec, np.random.default_rng(0), dtype=np.float64)
    bias = params.tensor("dense3.bias")
    before = bias.copy()
    grads = {"dense3.bias": np.array([0.5, -2.0])}

    adam_step(params, grads, AdamState(), lr=0.01)

    # Bias-corrected first step: m_hat / sqrt(v_hat) = sign(g)
    assert_allclose(bias, before - 0.01 * np.array([1.0, -1.0]), rtol=1e-6)
    assert params.step == 1


def test_adam_two_steps_with_unit_gradient(tiny_spec):
    params = build_network(tiny_spec, np.random.default_rng(0), dtype=np.float64)
    bias = params.tensor("dense3.bias")
    before = bias.copy()
    state = AdamState()

    for _ in range(2):
        adam_step(params, {"dense3.bias": np.ones(2)}, state, lr=0.1)

    # m = 0.1, 0.19 and v = 0.001, 0.001999: both bias-corrected moments stay at 1
    assert_allclose(state.m["dense3.bias"], [0.19, 0.19])
    assert_allclose(state.v["dense3.bias"], [0.001999, 0.001999])
    assert_allclose(bias, before - 2 * 0.1 / (1 + 1e-8), rtol=1e-9)
    assert state.t == 2
    assert params.step == 2


def test_adam_zero_gradient_leaves_parameter(tiny_spec):
    params = build_network(tiny_spec, np.random.default_rng(0), dtype=np.float64)
    before = params.tensor("dense3.bias").copy()
    adam_step(params, {"dense3.bias": np.zeros(2)}, AdamState(), lr=0.01)
    assert_array_equal(params.tensor("dense3.bias"), before)


def test_adam_l2_applies_to_weights_only(tiny_spec):
    params = build_network(tiny_spec, np.random.default_rng(0), dtype=np.float64)
    weight = params.tensor("dense3.weight")
    bias = params.tensor("dense3.bias")
    w_before, b_before = weight.copy(), bias.copy()
    grads = {"dense3.weight": np.zeros_like(weight), "dense3.bias": np.zeros_like(bias)}

    adam_step(params, grads, AdamState(), lr=0.01, l2_lambda=0.1)

    moved = w_before != 0
    assert_allclose(weight[moved], w_before[moved] - 0.01 * np.sign(w_before[moved]), rtol=1e-5)
    assert_array_equal(bias, b_before)


def test_adam_rejects_frozen_gradient(tiny_params):
    tiny_params.layers[-1].frozen = True
    with pytest.raises(StateError):
        adam_step(tiny_params, {"dense3.bias": np.zeros(2, dtype=np.float32)}, AdamState(), lr=0.01)


def test_adam_rejects_shape_mismatch(tiny_params):
    with pytest.raises(StateError):
        adam_step(tiny_params, {"dense3.bias": np.zeros(3, dtype=np.float32)}, AdamState(), lr=0.01)


def test_learning_rate_schedule():
    config = TrainConfig(lr0=0.001, lr_decay=0.5)
    assert lr_at(0, config) == pytest.approx(0.001)
    assert lr_at(2, config) == pytest.approx(0.00025)
    with pytest.raises(ParameterError):
        lr_at(-1, config)


def test_fit_with_zero_epochs_returns_initial_parameters(tiny_params):
    config = TrainConfig(max_epochs=0, batch_size=8)
    best, history = fit(tiny_params, _separable_patches(16, 0), _separable_patches(8, 1), config)
    assert history.epochs_run == 0
    assert history.best_epoch is None
    assert best.digest() == tiny_params.digest()
    assert best is not tiny_params


def test_fit_learns_separable_patches(tiny_params):
    config = TrainConfig(lr0=0.01, batch_size=16, max_epochs=6, patience=6, seed=0)
    records = []
    best, history = fit(tiny_params, _separable_patches(64, 0), _separable_patches(32, 1), config,
                        on_epoch=records.append)

    assert history.epochs_run == len(records) == 6
    assert history.best_val_auc == max(r.val_auc for r in history.records)
    assert history.records[history.best_epoch].val_auc == history.best_val_auc
    assert history.best_val_auc > 0.8
    assert [r.lr for r in records] == pytest.approx([0.01 * 0.97 ** e for e in range(6)])


def test_training_loss_falls_on_average_over_seeds(tiny_spec):
    first, last = [], []
    for seed in range(5):
        params = build_network(tiny_spec, np.random.default_rng(seed))
        config = TrainConfig(lr0=0.01, batch_size=16, max_epochs=5, patience=5, seed=seed)
        _, history = fit(params, _separable_patches(64, seed), _separable_patches(32, seed + 10), config)
        first.append(history.records[0].loss)
        last.append(history.records[-1].loss)
    assert np.mean(last) < np.mean(first)


def test_fit_raises_on_non_finite_loss(tiny_params):
    train_set = _separable_patches(32, 0)
    train_set.patches[:] = np.nan
    with np.errstate(invalid="ignore"):
        with pytest.raises(NumericError) as exc_info:
            fit(tiny_params, train_set, _separable_patches(16, 1), TrainConfig(batch_size=16, max_epochs=2))
    assert exc_info.value.details["epoch"] == 0
    assert exc_info.value.details["batch_start"] == 0


def test_fit_stops_early_when_validation_auc_stalls(tiny_params):
    # Every layer frozen: inference never changes, so the first epoch stays best
    for layer in tiny_params.layers:
        layer.frozen = True
    config = TrainConfig(batch_size=16, max_epochs=20, patience=3, seed=0)
    _, history = fit(tiny_params, _separable_patches(32, 0), _separable_patches(16, 1), config)
    assert history.epochs_run == 4
    assert history.best_epoch == 0


def test_fit_is_deterministic(tiny_spec):
    config = TrainConfig(lr0=0.01, batch_size=16, max_epochs=2, patience=2, seed=3)
    runs = []
    for _ in range(2):
        params = build_network(tiny_spec, np.random.default_rng(0))
        best, history = fit(params, _separable_patches(32, 0), _separable_patches(16, 1), config)
        runs.append((best.digest(), [r.val_auc for r in history.records]))
    assert runs[0] == runs[1]


def test_fit_rejects_empty_sets(tiny_params):
    empty = PatchSet(patches=np.zeros((0, 2, 12, 12), dtype=np.float32), labels=np.zeros(0, dtype=np.float32))
    with pytest.raises(DataError):
        fit(tiny_params, empty, _separable_patches(8, 1), TrainConfig())
