from pathlib import Path

import numpy as np
import pytest

from app.config import load_run_config
from app.schemas.domain import SynthConfig
from app.schemas.results import Scenario
from app.schemas.training import TrainConfig
from app.services.inference import evaluate_split, to_fcn
from app.services.synthesis import generate_pair
from app.services.transfer import run_scenario, train_model

CONFIG_DIR = Path(__file__).parents[1] / "configs"
SEEDS = [0, 1, 2]
SIZES = [2, 20]
FREEZE = [0, 8, 12, 14]


@pytest.fixture(scope="module")
def desk_pair():
    return generate_pair(load_run_config(CONFIG_DIR / "desk_synth.cfg", SynthConfig))


@pytest.fixture(scope="module")
def desk_config():
    return load_run_config(CONFIG_DIR / "desk_train.cfg", TrainConfig)


@pytest.fixture(scope="module")
def seed_results(desk_pair, desk_config):
    """Per seed: source-test Dice, direct Dice, scratch and best-freeze adapted Dice by size."""
    source, target = desk_pair
    results = []
    for seed in SEEDS:
        config = desk_config.copy(update={"seed": seed})
        model = train_model(source.split("train"), source.split("val"), config)
        source_dice = evaluate_split(to_fcn(model.params, config.bn_epsilon), source.split("test")).mean_dice

        rows = []
        for scenario in Scenario:
            rows += run_scenario(scenario, model, target, SIZES, FREEZE, [seed], desk_config, jobs=4)
        assert not [r for r in rows if r.error], [r.error for r in rows if r.error]

        direct = next(r.dice_test_mean for r in rows if r.scenario == Scenario.DIRECT)
        scratch = {r.target_train_size: r.dice_test_mean for r in rows if r.scenario == Scenario.SCRATCH}
        adapted = {
            size: max(r.dice_test_mean for r in rows
                      if r.scenario == Scenario.ADAPTED and r.target_train_size == size)
            for size in SIZES
        }
        results.append({"source": source_dice, "direct": direct, "scratch": scratch, "adapted": adapted})
    return results


def _mean(results, key, size=None):
    return float(np.mean([r[key] if size is None else r[key][size] for r in results]))


@pytest.mark.slow
def test_source_model_segments_source_test_set(seed_results):
    assert _mean(seed_results, "source") >= 0.70


@pytest.mark.slow
def test_direct_application_to_target_drops(seed_results):
    assert _mean(seed_results, "source") - _mean(seed_results, "direct") >= 0.25


@pytest.mark.slow
def test_adaptation_beats_scratch_on_two_patients(seed_results):
    assert _mean(seed_results, "adapted", 2) - _mean(seed_results, "scratch", 2) >= 0.15


@pytest.mark.slow
def test_adaptation_gap_narrows_with_more_target_data(seed_results):
    gap = {size: _mean(seed_results, "adapted", size) - _mean(seed_results, "scratch", size) for size in SIZES}
    assert gap[20] < gap[2]
