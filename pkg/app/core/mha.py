"""Mixed high-order attention over tapped feature maps and the MHAD loss."""
from __future__ import annotations

from typing import List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DfkdError, ShapeError, require_shape

MAX_ORDER = 3


class MixedHighOrderAttention(nn.Module):
    """Route r (1..R) owns r bias-free 1x1 convs whose outputs multiply
    elementwise, then ReLU, then a bias-free 1x1 fuse conv. Routes sum into a
    sigmoid gate."""

    def __init__(self, channels: int, order: int):
        super().__init__()
        if not 1 <= order <= MAX_ORDER:
            raise DfkdError(f"order must lie in [1, {MAX_ORDER}], got {order}")
        self.channels = channels
        self.order = order
        self.routes = nn.ModuleList(
            nn.ModuleList(nn.Conv2d(channels, channels, 1, bias=False) for _ in range(r)) for r in range(1, order + 1)
        )
        self.fuses = nn.ModuleList(nn.Conv2d(channels, channels, 1, bias=False) for _ in range(order))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return mha_attention(features, self)


def mha_attention(F_m: torch.Tensor, state: MixedHighOrderAttention) -> torch.Tensor:
    if F_m.ndim != 4 or F_m.shape[1] != state.channels:
        raise ShapeError(f"MHA expects {state.channels} channels, got {tuple(F_m.shape)}")
    total = None
    for convs, fuse in zip(state.routes, state.fuses):
        rep = convs[0](F_m)
        for conv in convs[1:]:
            rep = rep * conv(F_m)
        out = fuse(F.relu(rep))
        total = out if total is None else total + out
    return torch.sigmoid(total)


def mha_apply(F_m: torch.Tensor, A_m: torch.Tensor) -> torch.Tensor:
    require_shape("attention", A_m.shape, F_m.shape)
    return A_m * F_m


def attend(F_m: torch.Tensor, state: MixedHighOrderAttention) -> torch.Tensor:
    return mha_apply(F_m, mha_attention(F_m, state))


def mhad_loss(teacher_maps: Sequence[torch.Tensor], student_maps_adapted: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over taps of the mean squared difference (per-slice MSE averaged over N and C)."""
    if len(teacher_maps) != len(student_maps_adapted):
        raise ShapeError(f"{len(teacher_maps)} teacher taps vs {len(student_maps_adapted)} student taps")
    if not teacher_maps:
        raise DfkdError("mhad_loss needs at least one tap")
    losses: List[torch.Tensor] = []
    for i, (t, s) in enumerate(zip(teacher_maps, student_maps_adapted)):
        require_shape(f"student tap {i}", s.shape, t.shape)
        losses.append(F.mse_loss(s, t, reduction="mean"))
    return torch.stack(losses).sum()
