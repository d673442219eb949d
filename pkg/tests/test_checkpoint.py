"""
检查点格式测试

作者：ST-Instruct
版本：0.1.0
"""

import struct

import numpy as np
import pytest

from st_instruct.checkpoint import (
    CHECKPOINT_FILENAME,
    Checkpoint,
    checkpoint_load,
    checkpoint_save,
    decode_checkpoint,
    encode_checkpoint,
    resolve_path,
    restore_model,
    restore_optimizer,
)
from st_instruct.exceptions import (
    CheckpointChecksumException,
    CheckpointException,
    CheckpointTruncatedException,
    CheckpointVersionException,
    ErrorCode,
)
from st_instruct.training import Trainer


@pytest.fixture
def trained(tiny_model, tiny_corpus):
    trainer = Trainer(tiny_model, tiny_corpus)
    trainer.train_steps(2)
    return trainer


class TestFormat:
    def test_header(self, trained):
        blob = encode_checkpoint(trained.snapshot())
        magic, version, manifest_len, payload_len = struct.unpack("<4sIIQ", blob[:20])
        assert magic == b"STIT"
        assert version == 1
        assert len(blob) == 20 + manifest_len + payload_len + 4

    def test_resave_is_byte_identical(self, tmp_path, trained):
        first = checkpoint_save(trained.snapshot(), tmp_path / "a")
        second = checkpoint_save(checkpoint_load(first), tmp_path / "b")
        assert first.read_bytes() == second.read_bytes()

    def test_contents_survive(self, tmp_path, trained):
        path = checkpoint_save(trained.snapshot(), tmp_path)
        loaded = checkpoint_load(path)
        assert loaded.step == 2
        assert loaded.adam_t == 2
        assert loaded.config == trained.model.config
        assert loaded.tokenizer.vocab == trained.model.tokenizer.vocab
        assert list(loaded.params) == trained.model.params.names()
        assert all(np.array_equal(loaded.params[n], trained.model.params[n].data) for n in loaded.params)

    def test_directory_resolution(self, tmp_path):
        assert resolve_path(tmp_path) == tmp_path / CHECKPOINT_FILENAME
        assert resolve_path(tmp_path / "run.stit") == tmp_path / "run.stit"

    def test_without_optimizer(self, tiny_model):
        checkpoint = decode_checkpoint(encode_checkpoint(Checkpoint.capture(tiny_model)))
        assert checkpoint.adam_t == 0
        assert checkpoint.adam_m == {}
        assert checkpoint.step == 0


class TestRestore:
    def test_model_outputs_match(self, tmp_path, trained, tiny_corpus):
        path = checkpoint_save(trained.snapshot(), tmp_path)
        model = restore_model(checkpoint_load(path))
        records = tiny_corpus["bike"][:2]
        expected = trained.model.forward(records)
        actual = model.forward(records)
        np.testing.assert_array_equal(actual.logits.data, expected.logits.data)
        np.testing.assert_array_equal(actual.predictions.data, expected.predictions.data)

    def test_optimizer_state(self, trained):
        checkpoint = decode_checkpoint(encode_checkpoint(trained.snapshot()))
        optimizer = restore_optimizer(checkpoint, restore_model(checkpoint))
        assert optimizer.t == trained.optimizer.t
        for name, moment in trained.optimizer.m.items():
            np.testing.assert_array_equal(optimizer.m[name], moment)
            np.testing.assert_array_equal(optimizer.v[name], trained.optimizer.v[name])


class TestCorruption:
    def _blob(self, trained):
        return bytearray(encode_checkpoint(trained.snapshot()))

    def test_flipped_byte(self, trained):
        blob = self._blob(trained)
        blob[-10] ^= 0xFF
        with pytest.raises(CheckpointChecksumException) as exc_info:
            decode_checkpoint(bytes(blob))
        assert exc_info.value.error_code == ErrorCode.CHECKPOINT_CHECKSUM

    def test_truncated(self, trained):
        blob = bytes(self._blob(trained))
        with pytest.raises(CheckpointTruncatedException):
            decode_checkpoint(blob[:-100])
        with pytest.raises(CheckpointTruncatedException):
            decode_checkpoint(blob[:10])

    def test_version(self, trained):
        blob = self._blob(trained)
        blob[4:8] = struct.pack("<I", 99)
        with pytest.raises(CheckpointVersionException) as exc_info:
            decode_checkpoint(bytes(blob))
        assert exc_info.value.details["found"] == 99

    def test_magic(self, trained):
        blob = self._blob(trained)
        blob[:4] = b"NOPE"
        with pytest.raises(CheckpointException):
            decode_checkpoint(bytes(blob))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointException) as exc_info:
            checkpoint_load(tmp_path / "absent.stit")
        assert exc_info.value.exit_code == 2
