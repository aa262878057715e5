from __future__ import annotations

import json
import math

import pandas as pd
import pytest
import torch

from app.core.checkpoint import load_classifier, module_checksum
from app.core.engine import (
    HISTORY_PLOT,
    LAST_CHECKPOINT,
    METRICS_FILE,
    REPORT_FILE,
    build_state,
    cosine_lr,
    generator_phase,
    load_checkpoint,
    run,
    sample_images,
    save_checkpoint,
    student_phase,
)
from app.core.errors import CheckpointError, RunAbortedError, ShapeError
from app.core.models import ConvNetSpec
from app.core.reports import METRICS_COLUMNS


@pytest.fixture
def state(teacher_ckpt, student_spec, tiny_hyper, generator_spec):
    teacher, _ = load_classifier(teacher_ckpt)
    return build_state(teacher, student_spec, tiny_hyper, generator_spec, embed_dim=8)


def _sums(*modules):
    return [module_checksum(m) for m in modules]


def _student_side(state):
    return _sums(state.teacher, state.student, state.adapters, state.mha_t, state.mha_s, state.head_t, state.head_s)


class TestPhases:
    def test_generator_phase_freeze_contract(self, state):
        """Only the generator changes during its phase."""
        frozen = _student_side(state)
        gen_before = module_checksum(state.generator)
        losses = generator_phase(state)
        assert _student_side(state) == frozen
        assert module_checksum(state.generator) != gen_before
        assert set(losses) == {"l_bn", "l_kd", "gen_obj"}
        expected = state.hyper.alpha * losses["l_bn"] - losses["l_kd"]
        assert losses["gen_obj"] == pytest.approx(expected, rel=1e-5, abs=1e-6)

    def test_student_trainable_after_generator_phase(self, state):
        generator_phase(state)
        assert all(p.requires_grad for p in state.student.parameters())
        assert all(p.requires_grad for p in state.head_s.parameters())
        assert not any(p.requires_grad for p in state.teacher.parameters())

    def test_student_phase_freeze_contract(self, state):
        """Generator and teacher stay bit-identical; the student moves."""
        frozen = _sums(state.teacher, state.generator)
        student_before = module_checksum(state.student)
        losses = student_phase(state)
        assert _sums(state.teacher, state.generator) == frozen
        assert module_checksum(state.student) != student_before
        assert set(losses) == {"l_kd", "l_mhad", "l_sfcl", "stu_obj"}

    def test_empty_phases(self, state):
        """Zero steps leave every module and the noise stream untouched."""
        state.hyper = state.hyper.model_copy(update={"gen_steps": 0, "student_steps": 0})
        sums = _sums(state.generator, state.student)
        rng = state.rng.get_state().clone()
        assert generator_phase(state) == {"l_bn": 0.0, "l_kd": 0.0, "gen_obj": 0.0}
        assert student_phase(state)["stu_obj"] == 0.0
        assert _sums(state.generator, state.student) == sums
        assert torch.equal(state.rng.get_state(), rng)

    def test_kd_only_objective_equals_kd(self, state):
        state.hyper = state.hyper.model_copy(update={"beta": 0.0, "gamma": 0.0, "student_steps": 2})
        losses = student_phase(state)
        assert losses["stu_obj"] == losses["l_kd"]

    def test_non_finite_loss_aborts(self, state):
        with torch.no_grad():
            state.teacher.head.weight.fill_(float("nan"))
        with pytest.raises(RunAbortedError) as info:
            generator_phase(state)
        assert info.value.snapshot["phase"] == "generator"
        assert all(p.requires_grad for p in state.student.parameters())

    def test_class_mismatch(self, teacher_ckpt, tiny_hyper, generator_spec):
        teacher, _ = load_classifier(teacher_ckpt)
        other = ConvNetSpec(stage_channels=[4, 8, 8], blocks_per_stage=1, num_classes=3, input_size=16)
        with pytest.raises(ShapeError):
            build_state(teacher, other, tiny_hyper, generator_spec)


class TestSchedule:
    def test_cosine_closed_form(self):
        assert cosine_lr(1e-2, 0, 200) == pytest.approx(1e-2)
        assert cosine_lr(1e-2, 100, 200) == pytest.approx(5e-3)
        assert cosine_lr(1e-2, 199, 200) == pytest.approx(0.5e-2 * (1 + math.cos(math.pi * 199 / 200)))

    def test_scheduler_follows_closed_form(self, teacher_ckpt, student_spec, tiny_hyper, generator_spec):
        teacher, _ = load_classifier(teacher_ckpt)
        hyper = tiny_hyper.model_copy(update={"epochs": 8})
        state = build_state(teacher, student_spec, hyper, generator_spec, embed_dim=8)
        for epoch in range(hyper.epochs):
            assert state.opt_s.param_groups[0]["lr"] == pytest.approx(cosine_lr(hyper.lr_s, epoch, hyper.epochs))
            state.opt_s.step()
            state.scheduler.step()


class TestRun:
    def test_single_epoch_report(self, tmp_path, teacher_ckpt, student_spec, tiny_hyper, generator_spec, tiny_data):
        _, test = tiny_data
        hyper = tiny_hyper.model_copy(update={"epochs": 1})
        out = tmp_path / "run"
        report = run(teacher_ckpt, student_spec, hyper, test, out, generator_spec=generator_spec, embed_dim=8)
        assert len(report.records) == 1
        rec = report.records[0]
        for name in ("l_kd", "l_bn", "l_mhad", "l_sfcl", "gen_obj", "stu_obj"):
            assert math.isfinite(getattr(rec, name))
        assert 0.0 <= rec.accuracy <= 1.0
        assert rec.lr == pytest.approx(hyper.lr_s)
        assert report.baseline_accuracy is not None and report.teacher_accuracy is not None
        metrics = pd.read_csv(out / METRICS_FILE)
        assert list(metrics.columns) == METRICS_COLUMNS
        assert json.loads((out / REPORT_FILE).read_text())["seed"] == hyper.seed
        assert (out / LAST_CHECKPOINT).exists()
        assert (out / HISTORY_PLOT).stat().st_size > 0

    def test_reproducible_metrics(self, tmp_path, teacher_ckpt, student_spec, tiny_hyper, generator_spec, tiny_data):
        """Two identical runs write identical metric rows apart from wall-clock seconds."""
        _, test = tiny_data
        frames = []
        for name in ("a", "b"):
            run(teacher_ckpt, student_spec, tiny_hyper, test, tmp_path / name, generator_spec=generator_spec, embed_dim=8)
            frames.append(pd.read_csv(tmp_path / name / METRICS_FILE).drop(columns=["seconds"]))
        pd.testing.assert_frame_equal(frames[0], frames[1])

    def test_rerun_in_same_directory_overwrites_metrics(
        self, tmp_path, teacher_ckpt, student_spec, tiny_hyper, generator_spec, tiny_data
    ):
        _, test = tiny_data
        for _ in range(2):
            run(teacher_ckpt, student_spec, tiny_hyper, test, tmp_path / "out", generator_spec=generator_spec, embed_dim=8)
        assert len(pd.read_csv(tmp_path / "out" / METRICS_FILE)) == tiny_hyper.epochs

    def test_invalid_teacher_checkpoint(self, tmp_path, student_spec, tiny_hyper, tiny_data):
        _, test = tiny_data
        with pytest.raises(CheckpointError):
            run(tmp_path / "missing.pt", student_spec, tiny_hyper, test, tmp_path / "out")
        assert not (tmp_path / "out" / METRICS_FILE).exists()

    def test_checkpoint_restores_state(self, tmp_path, state):
        generator_phase(state)
        student_phase(state)
        state.scheduler.step()
        state.epoch = 1
        restored = load_checkpoint(save_checkpoint(state, tmp_path / "cut.pt"))
        assert restored.epoch == 1
        assert _student_side(restored) == _student_side(state)
        assert module_checksum(restored.generator) == module_checksum(state.generator)
        assert torch.equal(restored.rng.get_state(), state.rng.get_state())
        assert restored.opt_s.param_groups[0]["lr"] == pytest.approx(state.opt_s.param_groups[0]["lr"])

    def test_resave_is_byte_identical(self, tmp_path, state):
        generator_phase(state)
        student_phase(state)
        state.scheduler.step()
        state.epoch = 1
        first = save_checkpoint(state, tmp_path / "first.pt")
        second = save_checkpoint(load_checkpoint(first), tmp_path / "second.pt")
        assert second.read_bytes() == first.read_bytes()

    def test_resume_matches_continuous(
        self, tmp_path, teacher_ckpt, student_spec, tiny_hyper, generator_spec, tiny_data
    ):
        """Cutting after epoch 1 and resuming reproduces epoch 2 of an unbroken run."""
        _, test = tiny_data
        full = run(teacher_ckpt, student_spec, tiny_hyper, test, tmp_path / "full", generator_spec=generator_spec, embed_dim=8)

        # the same first epoch as `run`, stopped before the second
        cut = build_state(load_classifier(teacher_ckpt)[0], student_spec, tiny_hyper, generator_spec, embed_dim=8)
        generator_phase(cut)
        student_phase(cut)
        cut.scheduler.step()
        cut.epoch = 1
        path = save_checkpoint(cut, tmp_path / "cut.pt")

        resumed = run(
            teacher_ckpt, student_spec, tiny_hyper, test, tmp_path / "resumed",
            generator_spec=generator_spec, embed_dim=8, resume_from=path,
        )
        assert [r.epoch for r in resumed.records] == [2]
        assert abs(resumed.records[0].l_kd - full.records[1].l_kd) <= 1e-6
        assert abs(resumed.records[0].l_bn - full.records[1].l_bn) <= 1e-6

    def test_resume_rejects_changed_hyperparams(
        self, tmp_path, state, teacher_ckpt, student_spec, tiny_hyper, tiny_data
    ):
        _, test = tiny_data
        path = save_checkpoint(state, tmp_path / "cut.pt")
        changed = tiny_hyper.model_copy(update={"beta": 1.0})
        with pytest.raises(CheckpointError):
            run(teacher_ckpt, student_spec, changed, test, tmp_path / "out", resume_from=path)


class TestSamples:
    def test_deterministic_in_seed(self, tmp_path, state):
        path = save_checkpoint(state, tmp_path / "g.pt")
        a, b = sample_images(path, 4, seed=3), sample_images(path, 4, seed=3)
        assert a.shape == (4, 3, 16, 16)
        assert torch.equal(a, b)
        assert not torch.equal(a, sample_images(path, 4, seed=4))
