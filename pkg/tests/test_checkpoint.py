from __future__ import annotations

import json

import pytest
import torch

from app.core.checkpoint import (
    FORMAT_VERSION,
    load_classifier,
    module_checksum,
    read_checkpoint,
    save_classifier,
    sidecar_path,
    write_checkpoint,
)
from app.core.classifier import build_model
from app.core.errors import CheckpointError


@pytest.fixture
def saved(tmp_path, teacher_spec):
    model = build_model(teacher_spec, seed=3)
    return model, save_classifier(model, tmp_path / "model.pt", seed=3, epoch=5, metrics={"accuracy": 0.5})


class TestClassifierCheckpoint:
    def test_round_trip(self, saved):
        model, path = saved
        loaded, sidecar = load_classifier(path)
        assert module_checksum(loaded) == module_checksum(model)
        assert not loaded.training
        assert sidecar["format_version"] == FORMAT_VERSION
        assert sidecar["kind"] == "classifier"
        assert (sidecar["seed"], sidecar["epoch"]) == (3, 5)
        assert sidecar["metrics"] == {"accuracy": 0.5}

    def test_resave_is_byte_identical(self, tmp_path, saved):
        _, path = saved
        loaded, _ = load_classifier(path)
        again = save_classifier(loaded, tmp_path / "again.pt", seed=3, epoch=5)
        assert again.read_bytes() == path.read_bytes()

    def test_same_outputs_after_load(self, saved):
        model, path = saved
        loaded, _ = load_classifier(path)
        x = torch.randn(2, 3, 16, 16)
        model.eval()
        with torch.no_grad():
            torch.testing.assert_close(loaded(x), model(x))

    def test_sidecar_written_next_to_blob(self, saved):
        _, path = saved
        assert sidecar_path(path).name == "model.pt.json"
        assert sidecar_path(path).exists()
        assert not list(path.parent.glob(".*.tmp"))


class TestValidation:
    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_classifier(tmp_path / "nope.pt")

    def test_missing_sidecar(self, saved):
        _, path = saved
        sidecar_path(path).unlink()
        with pytest.raises(CheckpointError):
            load_classifier(path)

    def test_corrupted_blob(self, saved):
        _, path = saved
        payload = bytearray(path.read_bytes())
        payload[len(payload) // 2] ^= 0xFF
        path.write_bytes(bytes(payload))
        with pytest.raises(CheckpointError, match="checksum"):
            load_classifier(path)

    def test_version_mismatch(self, saved):
        _, path = saved
        meta = json.loads(sidecar_path(path).read_text())
        meta["format_version"] = FORMAT_VERSION + 1
        sidecar_path(path).write_text(json.dumps(meta))
        with pytest.raises(CheckpointError, match="format version"):
            load_classifier(path)

    def test_kind_mismatch(self, tmp_path):
        path = write_checkpoint(tmp_path / "x.pt", {"w": torch.zeros(2)}, kind="distill", spec={}, seed=0, epoch=0)
        with pytest.raises(CheckpointError):
            load_classifier(path)
        blob, _ = read_checkpoint(path, "distill")
        assert torch.equal(blob["w"], torch.zeros(2))

    def test_spec_disagrees_with_weights(self, saved, student_spec):
        _, path = saved
        meta = json.loads(sidecar_path(path).read_text())
        meta["spec"] = student_spec.model_dump()
        sidecar_path(path).write_text(json.dumps(meta))
        with pytest.raises(CheckpointError):
            load_classifier(path)
