from __future__ import annotations

from typing import Dict, Sequence

import torch
import torch.nn.functional as F

from .classifier import BNLayerStats
from .errors import NonFiniteLossError, ShapeError
from .models import Hyperparams


def kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Batch mean of KL(softmax(student) || softmax(teacher)) at temperature 1."""
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"student logits {tuple(student_logits.shape)} vs teacher {tuple(teacher_logits.shape)}")
    if student_logits.ndim != 2 or student_logits.shape[1] < 2:
        raise ShapeError(f"logits must be N x K with K >= 2, got {tuple(student_logits.shape)}")
    log_p_s = F.log_softmax(student_logits, dim=1)
    log_p_t = F.log_softmax(teacher_logits, dim=1)
    # kl_div(input, target) computes KL(target || input)
    return F.kl_div(log_p_t, log_p_s, log_target=True, reduction="batchmean")


def bn_regularization(batch: Sequence[BNLayerStats], running: Sequence[BNLayerStats]) -> torch.Tensor:
    """Sum over layers of the unsquared L2 distances between batch and running mean/variance."""
    if len(batch) != len(running):
        raise ShapeError(f"{len(batch)} batch layers vs {len(running)} running layers")
    if not batch:
        raise ShapeError("bn_regularization needs at least one layer")
    terms = []
    for b, r in zip(batch, running):
        if b.layer_id != r.layer_id:
            raise ShapeError(f"layer mismatch: {b.layer_id!r} vs {r.layer_id!r}")
        if b.mean.shape != r.mean.shape:
            raise ShapeError(f"{b.layer_id}: {tuple(b.mean.shape)} vs {tuple(r.mean.shape)}")
        terms.append(torch.linalg.vector_norm(r.mean - b.mean) + torch.linalg.vector_norm(r.variance - b.variance))
    return torch.stack(terms).sum()


def _require_finite(which: str, **terms: torch.Tensor | float) -> None:
    bad: Dict[str, float] = {}
    for name, value in terms.items():
        v = float(value)
        if not torch.isfinite(torch.tensor(v)):
            bad[name] = v
    if bad:
        snapshot = {name: float(value) for name, value in terms.items()}
        raise NonFiniteLossError(f"{which}: non-finite {', '.join(sorted(bad))}", snapshot=snapshot)


def generator_objective(h: Hyperparams, L_BN: torch.Tensor, L_KD: torch.Tensor) -> torch.Tensor:
    _require_finite("generator objective", l_bn=L_BN, l_kd=L_KD)
    return h.alpha * L_BN - L_KD


def student_objective(h: Hyperparams, L_KD: torch.Tensor, L_MHAD: torch.Tensor, L_SFCL: torch.Tensor) -> torch.Tensor:
    _require_finite("student objective", l_kd=L_KD, l_mhad=L_MHAD, l_sfcl=L_SFCL)
    return L_KD + h.beta * L_MHAD + h.gamma * L_SFCL
