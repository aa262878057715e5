"""Semantic feature contrast: projection heads onto the unit hypersphere and an
NT-Xent loss pooling teacher and student embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DfkdError, ShapeError

NORM_EPS = 1e-12


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, out_dim: int = 128, hidden_dim: int | None = None, identity: bool = False):
        super().__init__()
        hidden_dim = hidden_dim or in_dim
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)
        if identity:
            # rectangular identity: keeps the leading min(in, out) coordinates
            with torch.no_grad():
                for fc in (self.fc1, self.fc2):
                    fc.weight.copy_(torch.eye(fc.out_features, fc.in_features))
                    fc.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


@dataclass
class EmbeddingBatch:
    vectors: torch.Tensor

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ShapeError(f"embeddings must be N x E, got {tuple(self.vectors.shape)}")
        norms = self.vectors.detach().norm(dim=1)
        if norms.numel() and not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
            raise DfkdError("embedding rows must be unit-norm")

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


def project(penultimate: torch.Tensor, head: ProjectionHead) -> EmbeddingBatch:
    if penultimate.ndim != 2 or penultimate.shape[1] != head.in_dim:
        raise ShapeError(f"head expects N x {head.in_dim} features, got {tuple(penultimate.shape)}")
    out = head(penultimate)
    norms = out.norm(dim=1, keepdim=True)
    if torch.any(norms < NORM_EPS):
        raise DfkdError("projected feature row has zero norm")
    return EmbeddingBatch(vectors=out / norms)


def pairwise_cosine(A: EmbeddingBatch, B: EmbeddingBatch) -> torch.Tensor:
    if A.dim != B.dim:
        raise ShapeError(f"embedding dims differ: {A.dim} vs {B.dim}")
    return A.vectors @ B.vectors.t()


def sfcl_loss(F_t: EmbeddingBatch, F_s: EmbeddingBatch, tau: float) -> torch.Tensor:
    """Symmetric NT-Xent over the pooled 2N embeddings; row i of F_s is the positive for row i of F_t."""
    n = len(F_t)
    if n == 0:
        raise DfkdError("sfcl_loss needs a non-empty batch")
    if len(F_s) != n:
        raise ShapeError(f"teacher batch {n} vs student batch {len(F_s)}")
    if tau <= 0:
        raise DfkdError(f"tau must be positive, got {tau}")
    if F_t.dim != F_s.dim:
        raise ShapeError(f"embedding dims differ: {F_t.dim} vs {F_s.dim}")

    pooled = EmbeddingBatch(vectors=torch.cat([F_t.vectors, F_s.vectors], dim=0))
    logits = pairwise_cosine(pooled, pooled) / tau
    self_mask = torch.eye(2 * n, dtype=torch.bool, device=logits.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(logits.device)
    return F.cross_entropy(logits, targets)
