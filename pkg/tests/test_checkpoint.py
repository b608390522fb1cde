import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from app.exceptions import FormatError, UnsupportedVersionError
from app.models.params import TrainedModel
from app.schemas.training import EpochRecord, TrainingHistory
from app.schemas.transfer import ModelProvenance, ProvenanceKind
from app.services.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from app.services.inference import fcn_forward, to_fcn
from app.services.transfer import make_plan


@pytest.fixture
def adapted_model(tiny_params):
    tiny_params.layers[0].frozen = True
    tiny_params.layers[0].running_mean[...] = [0.1, 0.2, 0.3]
    tiny_params.step = 42
    history = TrainingHistory(records=[EpochRecord(epoch=0, loss=0.6, val_auc=0.7, lr=1e-3)],
                              best_epoch=0, best_val_auc=0.7)
    provenance = ModelProvenance(kind=ProvenanceKind.ADAPTED, domain="target", source_checkpoint="src.ckpt",
                                 source_digest="abc", plan=make_plan(1, tiny_params.spec))
    return TrainedModel(params=tiny_params, provenance=provenance, history=history, seed=3)


def test_checkpoint_round_trip(adapted_model, tmp_path):
    path = save_checkpoint(adapted_model, tmp_path / "model.ckpt")
    loaded = load_checkpoint(path)

    assert loaded.params.spec == adapted_model.params.spec
    assert loaded.params.digest() == adapted_model.params.digest()
    assert loaded.params.step == 42
    assert [layer.frozen for layer in loaded.params.layers] == [True, False, False, False, False]
    assert loaded.provenance == adapted_model.provenance
    assert loaded.history == adapted_model.history
    assert loaded.seed == 3


def test_loaded_checkpoint_predicts_identically(adapted_model):
    loaded = decode_checkpoint(encode_checkpoint(adapted_model))
    image = np.random.default_rng(0).random((2, 24, 24)).astype(np.float32)
    assert_array_equal(fcn_forward(to_fcn(loaded.params), image), fcn_forward(to_fcn(adapted_model.params), image))


def test_bad_magic(adapted_model):
    data = b"NOPE" + encode_checkpoint(adapted_model)[4:]
    with pytest.raises(FormatError) as exc_info:
        decode_checkpoint(data)
    assert exc_info.value.details["offset"] == 0


def test_unsupported_version(adapted_model):
    data = bytearray(encode_checkpoint(adapted_model))
    data[4:8] = struct.pack("<I", 9)
    with pytest.raises(UnsupportedVersionError):
        decode_checkpoint(bytes(data))


def test_truncated_checkpoint(adapted_model):
    data = encode_checkpoint(adapted_model)
    with pytest.raises(FormatError):
        decode_checkpoint(data[:-4])


def test_trailing_bytes(adapted_model):
    with pytest.raises(FormatError):
        decode_checkpoint(encode_checkpoint(adapted_model) + b"\x00\x00")


def test_corrupt_header(adapted_model):
    data = bytearray(encode_checkpoint(adapted_model))
    data[12] = ord("!")  # first byte of the JSON header
    with pytest.raises(FormatError) as exc_info:
        decode_checkpoint(bytes(data))
    assert exc_info.value.details["offset"] == 8


def test_load_reports_path(tmp_path):
    path = tmp_path / "broken.ckpt"
    path.write_bytes(b"DSK1")
    with pytest.raises(FormatError) as exc_info:
        load_checkpoint(path)
    assert exc_info.value.details["path"] == str(path)
