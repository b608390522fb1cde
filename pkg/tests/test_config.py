import pytest

from app.config import Settings, load_key_value_file, load_run_config, nest_keys
from app.exceptions import ConfigError
from app.schemas.domain import SynthConfig
from app.schemas.training import TrainConfig


def _write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_key_value_file_ignores_comments(tmp_path):
    path = _write(tmp_path, "# header\nlr0 = 0.01  # inline\n\nbatch_size=32\n")
    assert load_key_value_file(path) == {"lr0": "0.01", "batch_size": "32"}


def test_key_value_file_rejects_repeated_key(tmp_path):
    with pytest.raises(ConfigError):
        load_key_value_file(_write(tmp_path, "seed = 1\nseed = 2\n"))


def test_key_value_file_rejects_malformed_line(tmp_path):
    with pytest.raises(ConfigError) as exc_info:
        load_key_value_file(_write(tmp_path, "seed 1\n"))
    assert exc_info.value.details["line"] == 1


def test_nest_keys_builds_sections():
    nested = nest_keys({"seed": "3", "source.blur_sigma": "0.9", "source.lesion_count_range": "0, 2"})
    assert nested == {"seed": "3", "source": {"blur_sigma": "0.9", "lesion_count_range": ["0", "2"]}}


def test_train_config_from_file(tmp_path):
    config = load_run_config(_write(tmp_path, "lr0 = 0.01\nmax_epochs = 3\n"), TrainConfig)
    assert config.lr0 == 0.01
    assert config.max_epochs == 3
    assert config.batch_size == 128


def test_unknown_key_is_named(tmp_path):
    with pytest.raises(ConfigError) as exc_info:
        load_run_config(_write(tmp_path, "learning_rate = 0.1\n"), TrainConfig)
    assert exc_info.value.details["unknown_keys"] == ["learning_rate"]
    assert "learning_rate" in exc_info.value.message


def test_missing_key_is_named(tmp_path):
    with pytest.raises(ConfigError) as exc_info:
        load_run_config(_write(tmp_path, "source.blur_sigma = 1.0\n"), SynthConfig)
    assert exc_info.value.details["missing_keys"] == ["seed"]


def test_invalid_value_is_named(tmp_path):
    with pytest.raises(ConfigError) as exc_info:
        load_run_config(_write(tmp_path, "lr0 = -1\n"), TrainConfig)
    assert "lr0" in exc_info.value.details["invalid"]


@pytest.mark.parametrize("line,key", [
    ("eval_batch_size = 0", "eval_batch_size"),
    ("bn_momentum = 1.0", "bn_momentum"),
    ("bn_momentum = -0.1", "bn_momentum"),
    ("bn_epsilon = 0", "bn_epsilon"),
])
def test_normalization_and_eval_settings_are_validated(tmp_path, line, key):
    with pytest.raises(ConfigError) as exc_info:
        load_run_config(_write(tmp_path, line + "\n"), TrainConfig)
    assert key in exc_info.value.details["invalid"]


def test_nested_unknown_key(tmp_path):
    with pytest.raises(ConfigError) as exc_info:
        load_run_config(_write(tmp_path, "seed = 1\ntarget.sharpness = 2\n"), SynthConfig)
    assert exc_info.value.details["unknown_keys"] == ["target.sharpness"]


def test_synth_config_from_file(tmp_path):
    text = "seed = 5\nsource.lesion_count_range = 0, 0\ntarget_split.train = 4\ntarget_split.val = 1\ntarget_split.test = 1\n"
    config = load_run_config(_write(tmp_path, text), SynthConfig)
    assert config.source.lesion_count_range == (0, 0)
    assert config.source.seed == 5 and config.target.seed == 6
    assert config.target_split.total == 6


def test_overrides_replace_file_values(tmp_path):
    path = _write(tmp_path, "seed = 1\n")
    assert load_run_config(path, SynthConfig, overrides={"seed": 9}).seed == 9
    assert load_run_config(path, SynthConfig, overrides={"seed": None}).seed == 1


def test_defaults_without_file():
    assert load_run_config(None, TrainConfig) == TrainConfig()


def test_settings_normalize_log_level():
    assert Settings(LOG_LEVEL="debug  # verbose").LOG_LEVEL == "DEBUG"
    with pytest.raises(ValueError):
        Settings(LOG_LEVEL="chatty")
    with pytest.raises(ValueError):
        Settings(DEFAULT_JOBS=0)
