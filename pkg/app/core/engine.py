"""Alternating adversarial distillation.

Each epoch runs `gen_steps` generator updates (student and teacher frozen)
followed by `student_steps` student updates (generator and teacher frozen),
then evaluates the student on real held-out images.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import json
import math
import time

import pandas as pd
import torch
import torch.nn as nn
from tqdm import tqdm

from .checkpoint import load_classifier, module_checksum, read_checkpoint, write_checkpoint
from .classifier import Adapter, BNLayerStats, ConvNet, adapt_channels, build_model, collect_bn_running_stats
from .classifier import forward_with_bn_stats, forward_with_taps
from .config import CFG, logger
from .errors import CheckpointError, DfkdError, NonFiniteLossError, RunAbortedError, ShapeError
from .generator import AttentionGenerator, build_generator
from .mha import MixedHighOrderAttention, attend, mhad_loss
from .models import ConvNetSpec, EpochRecord, GeneratorSpec, Hyperparams, RunReport
from .objectives import bn_regularization, generator_objective, kd_loss, student_objective
from .reports import METRICS_COLUMNS, append_metrics_row, plot_history
from .sfcl import ProjectionHead, project, sfcl_loss
from .toy_data import LabeledImageSet, evaluate_accuracy

PathLike = Union[str, Path]

METRICS_FILE = "metrics.csv"
LAST_CHECKPOINT = "last.pt"
BEST_CHECKPOINT = "best.pt"
REPORT_FILE = "report.json"
HISTORY_PLOT = "history.png"


@dataclass
class DistillState:
    teacher: ConvNet
    student: ConvNet
    generator: AttentionGenerator
    adapters: nn.ModuleList
    mha_t: nn.ModuleList
    mha_s: nn.ModuleList
    head_t: ProjectionHead
    head_s: ProjectionHead
    opt_g: torch.optim.Optimizer
    opt_s: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    rng: torch.Generator
    hyper: Hyperparams
    generator_spec: GeneratorSpec
    embed_dim: int
    epoch: int = 0
    running_stats: List[BNLayerStats] = field(default_factory=list)

    def student_side(self) -> List[nn.Module]:
        """Modules updated by the student optimizer."""
        return [self.student, self.adapters, self.mha_t, self.mha_s, self.head_t, self.head_s]

    def next_noise(self) -> torch.Tensor:
        z = torch.randn(self.hyper.batch_size, self.generator_spec.z_dim, generator=self.rng)
        return z.to(CFG.device)

    def spec_dict(self) -> Dict[str, Any]:
        return {
            "teacher": self.teacher.spec.model_dump(),
            "student": self.student.spec.model_dump(),
            "generator": self.generator_spec.model_dump(),
            "hyper": self.hyper.model_dump(mode="json"),
            "embed_dim": self.embed_dim,
        }


def _freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


def _set_trainable(modules: List[nn.Module], flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def build_state(
    teacher: ConvNet,
    student_spec: ConvNetSpec,
    hyper: Hyperparams,
    generator_spec: Optional[GeneratorSpec] = None,
    embed_dim: int = 128,
) -> DistillState:
    if student_spec.num_classes != teacher.num_classes:
        raise ShapeError(f"student predicts {student_spec.num_classes} classes, teacher {teacher.num_classes}")
    if student_spec.input_size != teacher.spec.input_size:
        raise ShapeError(f"student input {student_spec.input_size} vs teacher input {teacher.spec.input_size}")
    generator_spec = (generator_spec or GeneratorSpec(out_size=teacher.spec.input_size)).model_copy(
        update={"lam": hyper.lam}
    )
    if generator_spec.out_size != teacher.spec.input_size:
        raise ShapeError(f"generator emits {generator_spec.out_size}px images, teacher takes {teacher.spec.input_size}px")

    device = CFG.device
    teacher = teacher.to(device).eval()
    _freeze(teacher)

    student = build_model(student_spec, hyper.seed).to(device)
    generator = build_generator(generator_spec, hyper.seed + 1).to(device)
    t_channels = teacher.spec.stage_channels
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(hyper.seed + 2)
        adapters = nn.ModuleList(Adapter(cs, ct) for cs, ct in zip(student_spec.stage_channels, t_channels))
        mha_t = nn.ModuleList(MixedHighOrderAttention(c, hyper.order) for c in t_channels)
        mha_s = nn.ModuleList(MixedHighOrderAttention(c, hyper.order) for c in t_channels)
        head_t = ProjectionHead(teacher.feature_dim, embed_dim)
        head_s = ProjectionHead(student.feature_dim, embed_dim)
    for m in (adapters, mha_t, mha_s, head_t, head_s):
        m.to(device)

    opt_g = torch.optim.Adam(generator.parameters(), lr=hyper.lr_g, betas=hyper.betas_g)
    student_params = [p for m in (student, adapters, mha_t, mha_s, head_t, head_s) for p in m.parameters()]
    opt_s = torch.optim.SGD(
        student_params, lr=hyper.lr_s, momentum=hyper.momentum_s, weight_decay=hyper.weight_decay_s
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(opt_s, T_max=max(1, hyper.epochs), eta_min=0.0)

    return DistillState(
        teacher=teacher,
        student=student,
        generator=generator,
        adapters=adapters,
        mha_t=mha_t,
        mha_s=mha_s,
        head_t=head_t,
        head_s=head_s,
        opt_g=opt_g,
        opt_s=opt_s,
        scheduler=scheduler,
        rng=torch.Generator().manual_seed(hyper.seed),
        hyper=hyper,
        generator_spec=generator_spec,
        embed_dim=embed_dim,
        running_stats=collect_bn_running_stats(teacher),
    )


def _abort(phase: str, state: DistillState, step: int, e: NonFiniteLossError) -> RunAbortedError:
    snapshot = {"phase": phase, "epoch": state.epoch, "step": step, **e.snapshot}
    return RunAbortedError(f"{phase} phase diverged at epoch {state.epoch} step {step}: {e.detail}", snapshot=snapshot)


def generator_phase(state: DistillState) -> Dict[str, float]:
    """`gen_steps` Adam steps on the generator against alpha * L_BN - L_KD."""
    h = state.hyper
    totals = {"l_bn": 0.0, "l_kd": 0.0, "gen_obj": 0.0}
    if h.gen_steps == 0:
        return totals
    state.generator.train()
    state.student.eval()
    _set_trainable(state.student_side(), False)
    try:
        for step in range(h.gen_steps):
            images = state.generator(state.next_noise())
            t_record, batch_stats = forward_with_bn_stats(state.teacher, images)
            s_logits = state.student(images)
            l_kd = kd_loss(s_logits, t_record.logits)
            l_bn = bn_regularization(batch_stats, state.running_stats)
            try:
                objective = generator_objective(h, l_bn, l_kd)
            except NonFiniteLossError as e:
                raise _abort("generator", state, step, e) from e
            state.opt_g.zero_grad(set_to_none=True)
            objective.backward()
            state.opt_g.step()
            totals["l_bn"] += float(l_bn)
            totals["l_kd"] += float(l_kd)
            totals["gen_obj"] += float(objective)
            logger.debug(f"epoch {state.epoch} G step {step}: l_bn={float(l_bn):.4f} l_kd={float(l_kd):.4f}")
    finally:
        _set_trainable(state.student_side(), True)
    return {k: v / h.gen_steps for k, v in totals.items()}


def student_phase(state: DistillState) -> Dict[str, float]:
    """`student_steps` SGD steps on the student side against L_KD + beta * L_MHAD + gamma * L_SFCL."""
    h = state.hyper
    totals = {"l_kd": 0.0, "l_mhad": 0.0, "l_sfcl": 0.0, "stu_obj": 0.0}
    if h.student_steps == 0:
        return totals
    state.generator.eval()
    t_channels = state.teacher.spec.stage_channels
    for step in range(h.student_steps):
        with torch.no_grad():
            images = state.generator(state.next_noise())
            t_record = forward_with_taps(state.teacher, images, "eval")
        s_record = forward_with_taps(state.student, images, "train")

        t_maps = [attend(f, m) for f, m in zip(t_record.stage_features, state.mha_t)]
        s_maps = [
            attend(adapt_channels(f, a, c), m)
            for f, a, c, m in zip(s_record.stage_features, state.adapters, t_channels, state.mha_s)
        ]
        l_kd = kd_loss(s_record.logits, t_record.logits)
        l_mhad = mhad_loss(t_maps, s_maps)
        l_sfcl = sfcl_loss(project(t_record.penultimate, state.head_t), project(s_record.penultimate, state.head_s), h.tau)
        try:
            objective = student_objective(h, l_kd, l_mhad, l_sfcl)
        except NonFiniteLossError as e:
            raise _abort("student", state, step, e) from e
        state.opt_s.zero_grad(set_to_none=True)
        objective.backward()
        state.opt_s.step()
        totals["l_kd"] += float(l_kd)
        totals["l_mhad"] += float(l_mhad)
        totals["l_sfcl"] += float(l_sfcl)
        totals["stu_obj"] += float(objective)
        logger.debug(
            f"epoch {state.epoch} S step {step}: l_kd={float(l_kd):.4f} "
            f"l_mhad={float(l_mhad):.4f} l_sfcl={float(l_sfcl):.4f}"
        )
    return {k: v / h.student_steps for k, v in totals.items()}


def cosine_lr(base_lr: float, epoch: int, epochs: int) -> float:
    """Closed-form cosine-annealed rate at `epoch` (annealing to 0 at `epochs`)."""
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / epochs))


# Checkpoints
def _module_blob(state: DistillState) -> Dict[str, Any]:
    modules = {
        "teacher": state.teacher,
        "student": state.student,
        "generator": state.generator,
        "adapters": state.adapters,
        "mha_t": state.mha_t,
        "mha_s": state.mha_s,
        "head_t": state.head_t,
        "head_s": state.head_s,
    }
    return {name: {k: v.detach().cpu() for k, v in m.state_dict().items()} for name, m in modules.items()}


def save_checkpoint(state: DistillState, path: PathLike, metrics: Optional[Dict[str, Any]] = None) -> Path:
    blob = _module_blob(state)
    blob.update(
        opt_g=state.opt_g.state_dict(),
        opt_s=state.opt_s.state_dict(),
        scheduler=state.scheduler.state_dict(),
        rng=state.rng.get_state(),
        epoch=state.epoch,
    )
    return write_checkpoint(
        path, blob, kind="distill", spec=state.spec_dict(), seed=state.hyper.seed, epoch=state.epoch, metrics=metrics
    )


def load_checkpoint(path: PathLike) -> DistillState:
    state, _ = load_checkpoint_with_meta(path)
    return state


def load_checkpoint_with_meta(path: PathLike):
    blob, sidecar = read_checkpoint(path, "distill")
    try:
        spec = sidecar["spec"]
        teacher = build_model(ConvNetSpec(**spec["teacher"]), sidecar["seed"])
        teacher.load_state_dict(blob["teacher"])
        state = build_state(
            teacher,
            ConvNetSpec(**spec["student"]),
            Hyperparams(**spec["hyper"]),
            GeneratorSpec(**spec["generator"]),
            int(spec["embed_dim"]),
        )
        for name in ("student", "generator", "adapters", "mha_t", "mha_s", "head_t", "head_s"):
            getattr(state, name).load_state_dict(blob[name])
        state.opt_g.load_state_dict(blob["opt_g"])
        state.opt_s.load_state_dict(blob["opt_s"])
        state.scheduler.load_state_dict(blob["scheduler"])
        state.rng.set_state(blob["rng"])
        state.epoch = int(blob["epoch"])
    except (KeyError, TypeError, RuntimeError, ValueError) as e:
        raise CheckpointError(f"checkpoint {path} is inconsistent: {e}") from e
    return state, sidecar


# Run
def _write_report(report: RunReport, out_dir: Path) -> None:
    (out_dir / REPORT_FILE).write_text(report.model_dump_json(indent=2))
    if report.records:
        history = pd.DataFrame([r.model_dump() for r in report.records])
        plot_history(history.drop(columns=["gen_obj", "stu_obj"]), out_dir / HISTORY_PLOT, title="distillation")


def _reset_metrics(path: Path, keep_epochs: int) -> None:
    if not path.exists():
        return
    if keep_epochs == 0:
        path.unlink()
        return
    df = pd.read_csv(path)
    df[df["epoch"] <= keep_epochs][METRICS_COLUMNS].to_csv(path, index=False)


def run(
    teacher_ckpt: PathLike,
    student_spec: ConvNetSpec,
    hyper: Hyperparams,
    eval_set: LabeledImageSet,
    out_dir: PathLike,
    generator_spec: Optional[GeneratorSpec] = None,
    embed_dim: int = 128,
    resume_from: Optional[PathLike] = None,
) -> RunReport:
    """Distill the checkpointed teacher into a fresh (or resumed) student.

    Writes metrics.csv row by row, last.pt every epoch, best.pt on improvement,
    then report.json and history.png. A non-finite loss aborts with
    RunAbortedError carrying the partial report.
    """
    out_dir = Path(out_dir)
    teacher, teacher_meta = load_classifier(teacher_ckpt)
    if eval_set.num_classes != teacher.num_classes:
        raise ShapeError(f"eval set has {eval_set.num_classes} classes, teacher head {teacher.num_classes}")
    if student_spec.num_classes != teacher.num_classes:
        raise ShapeError(f"student predicts {student_spec.num_classes} classes, teacher {teacher.num_classes}")

    report = RunReport(seed=hyper.seed)
    if resume_from is not None:
        state, sidecar = load_checkpoint_with_meta(resume_from)
        if module_checksum(state.teacher) != module_checksum(teacher):
            raise CheckpointError(f"{resume_from} was distilled from a different teacher than {teacher_ckpt}")
        if state.hyper.model_dump(exclude={"epochs"}) != hyper.model_dump(exclude={"epochs"}):
            raise CheckpointError(f"{resume_from} was saved with different hyper-parameters")
        previous = sidecar.get("metrics", {})
        report.records = [EpochRecord(**r) for r in previous.get("records", [])]
        report.baseline_accuracy = previous.get("baseline_accuracy")
        report.best_accuracy = previous.get("best_accuracy")
        report.best_checkpoint = previous.get("best_checkpoint")
        logger.info(f"Resuming from {resume_from} at epoch {state.epoch}")
    else:
        state = build_state(teacher, student_spec, hyper, generator_spec, embed_dim)
        report.baseline_accuracy = evaluate_accuracy(state.student, eval_set)

    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / METRICS_FILE
    _reset_metrics(metrics_path, state.epoch)
    report.metrics_csv = str(metrics_path)
    report.teacher_accuracy = evaluate_accuracy(state.teacher, eval_set)
    report.config = {**state.spec_dict(), "teacher_ckpt": str(teacher_ckpt), "teacher_seed": teacher_meta.get("seed")}
    teacher_sum = module_checksum(state.teacher)

    def metrics() -> Dict[str, Any]:
        return {
            "records": [r.model_dump() for r in report.records],
            "baseline_accuracy": report.baseline_accuracy,
            "best_accuracy": report.best_accuracy,
            "best_checkpoint": report.best_checkpoint,
        }

    logger.info(
        f"Distilling epochs {state.epoch + 1}..{hyper.epochs}: teacher_acc={report.teacher_accuracy:.4f} "
        f"baseline_acc={report.baseline_accuracy}"
    )
    started = time.perf_counter()
    try:
        for _ in tqdm(range(state.epoch, hyper.epochs), desc="distill", disable=not CFG.PROGRESS):
            t0 = time.perf_counter()
            lr = state.opt_s.param_groups[0]["lr"]
            g = generator_phase(state)
            s = student_phase(state)
            state.scheduler.step()
            state.epoch += 1
            if module_checksum(state.teacher) != teacher_sum:
                raise RunAbortedError(f"teacher weights changed during epoch {state.epoch}")

            record = EpochRecord(
                epoch=state.epoch,
                l_kd=s["l_kd"],
                l_bn=g["l_bn"],
                l_mhad=s["l_mhad"],
                l_sfcl=s["l_sfcl"],
                gen_obj=g["gen_obj"],
                stu_obj=s["stu_obj"],
                accuracy=evaluate_accuracy(state.student, eval_set),
                seconds=time.perf_counter() - t0,
                lr=lr,
            )
            report.records.append(record)
            append_metrics_row(metrics_path, record)
            logger.info(
                f"epoch {record.epoch}/{hyper.epochs} acc={record.accuracy:.4f} l_kd={record.l_kd:.4f} "
                f"l_bn={record.l_bn:.4f} l_mhad={record.l_mhad:.4f} l_sfcl={record.l_sfcl:.4f} lr={lr:.5f}"
            )

            if report.best_accuracy is None or record.accuracy > report.best_accuracy:
                report.best_accuracy = record.accuracy
                report.best_checkpoint = str(out_dir / BEST_CHECKPOINT)
                save_checkpoint(state, out_dir / BEST_CHECKPOINT, metrics())
            report.last_checkpoint = str(save_checkpoint(state, out_dir / LAST_CHECKPOINT, metrics()))
    except RunAbortedError as e:
        report.aborted = True
        report.wall_clock = time.perf_counter() - started
        _write_report(report, out_dir)
        logger.error(f"Run aborted: {e.detail} snapshot={json.dumps(e.snapshot, default=str)}")
        raise RunAbortedError(e.detail, report=report, snapshot=e.snapshot) from e

    report.wall_clock = time.perf_counter() - started
    _write_report(report, out_dir)
    logger.info(f"Distillation finished: final_acc={report.final_accuracy} best_acc={report.best_accuracy}")
    return report


def evaluate_checkpoint(path: PathLike, data: LabeledImageSet) -> float:
    """Accuracy of the classifier (or the distilled student) stored at `path`."""
    try:
        model, _ = load_classifier(path)
    except CheckpointError as classifier_error:
        try:
            model = load_checkpoint(path).student
        except CheckpointError:
            raise classifier_error
    return evaluate_accuracy(model, data)


def sample_images(path: PathLike, n: int, seed: int) -> torch.Tensor:
    """n images from the generator stored in a distill checkpoint, eval mode, deterministic in seed."""
    if n < 1:
        raise DfkdError(f"need at least one sample, got {n}")
    state = load_checkpoint(path)
    z = torch.randn(n, state.generator_spec.z_dim, generator=torch.Generator().manual_seed(seed))
    state.generator.eval()
    with torch.no_grad():
        return state.generator(z.to(CFG.device)).cpu()
