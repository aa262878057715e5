"""DCGAN-style attention generator.

Four upsampling blocks, each: 3x3 stride-2 deconvolution under spectral
normalization -> LeakyReLU(0.2) -> spatial-wise attention module (SAM).
The SAM is an encoder/decoder whose max-unpool reuses the encoder's max-pool
indices; its output map is softmaxed over each channel's H x W sites and
blended back into the block features with weight `lam`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parametrize

from .errors import DfkdError, ShapeError, SpecError, require_shape
from .models import GeneratorSpec


def sample_noise(n: int, z_dim: int, seed: int) -> torch.Tensor:
    if n < 1 or z_dim < 1:
        raise DfkdError(f"noise shape must be positive, got ({n}, {z_dim})")
    return torch.randn(n, z_dim, generator=torch.Generator().manual_seed(seed))


# Spectral normalization
def _as_matrix(weight: torch.Tensor, dim: int) -> torch.Tensor:
    if dim != 0:
        weight = weight.movedim(dim, 0)
    return weight.reshape(weight.shape[0], -1)


def power_iteration(
    mat: torch.Tensor, u: torch.Tensor, iters: int, eps: float = 1e-12
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Run `iters` power iterations on `mat` from `u`; returns the refined (u, v)."""
    if iters < 1:
        raise DfkdError(f"power iteration needs iters >= 1, got {iters}")
    for _ in range(iters):
        v = F.normalize(mat.t() @ u, dim=0, eps=eps)
        u = F.normalize(mat @ v, dim=0, eps=eps)
    return u, v


def spectral_normalize(
    weight: torch.Tensor,
    iters: int,
    u: Optional[torch.Tensor] = None,
    dim: int = 0,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """W / sigma_hat with sigma_hat from `iters` power iterations.

    Returns (normalized weight, updated u, updated v); pass u back in on the
    next call to carry the estimate across steps.
    """
    if iters < 1:
        raise DfkdError(f"iters must be >= 1, got {iters}")
    mat = _as_matrix(weight, dim)
    if not torch.any(mat):
        raise DfkdError("spectral norm of a zero matrix is undefined")
    if u is None:
        u = F.normalize(torch.randn(mat.shape[0], dtype=mat.dtype, device=mat.device), dim=0)
    with torch.no_grad():
        u, v = power_iteration(mat, u, iters)
    sigma = torch.dot(u, mat @ v)
    return weight / sigma, u, v


class SpectralNorm(nn.Module):
    """Parametrization W -> W / sigma_hat with persistent power-iteration vectors.

    One power iteration per training-mode access; eval mode reuses the stored
    vectors without updating them.
    """

    def __init__(self, weight: torch.Tensor, dim: int = 0, iters: int = 1, init_iters: int = 50):
        super().__init__()
        self.dim = dim
        self.iters = iters
        mat = _as_matrix(weight.detach(), dim)
        u = F.normalize(torch.randn(mat.shape[0], dtype=mat.dtype, device=mat.device), dim=0)
        u, v = power_iteration(mat, u, init_iters)
        self.register_buffer("_u", u)
        self.register_buffer("_v", v)

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        mat = _as_matrix(weight, self.dim)
        if self.training:
            with torch.no_grad():
                u, v = power_iteration(mat, self._u, self.iters)
                self._u.copy_(u)
                self._v.copy_(v)
        u = self._u.clone(memory_format=torch.contiguous_format)
        v = self._v.clone(memory_format=torch.contiguous_format)
        sigma = torch.dot(u, mat @ v)
        return weight / sigma


def spectral_deconv(in_channels: int, out_channels: int) -> nn.ConvTranspose2d:
    """3x3 stride-2 deconvolution that exactly doubles H and W, weight spectrally normalized."""
    deconv = nn.ConvTranspose2d(in_channels, out_channels, 3, stride=2, padding=1, output_padding=1)
    # ConvTranspose2d stores (in, out, kh, kw); out-channels sit on dim 1
    parametrize.register_parametrization(deconv, "weight", SpectralNorm(deconv.weight, dim=1))
    return deconv


# Spatial-wise attention module
@dataclass
class PoolIndices:
    indices: torch.Tensor
    size: torch.Size


class SpatialAttention(nn.Module):
    """Encoder/decoder attention. Channel chain for ratio r:
    C -> C/r (1x1) -> 2C/r (3x3, BN, ReLU, maxpool) -> 4C/r (3x3, BN, ReLU)
      -> 2C/r (3x3 deconv, BN, ReLU, maxunpool) -> C/r (3x3 deconv, BN, ReLU) -> C (1x1)
    """

    def __init__(self, channels: int, ratio: int):
        super().__init__()
        if channels % ratio:
            raise SpecError(f"ratio {ratio} does not divide {channels} channels")
        c = channels // ratio
        self.channels = channels
        self.ratio = ratio
        self.reduce = nn.Conv2d(channels, c, 1)
        self.enc1 = nn.Sequential(nn.Conv2d(c, 2 * c, 3, padding=1), nn.BatchNorm2d(2 * c), nn.ReLU())
        self.pool = nn.MaxPool2d(2, stride=2, return_indices=True)
        self.enc2 = nn.Sequential(nn.Conv2d(2 * c, 4 * c, 3, padding=1), nn.BatchNorm2d(4 * c), nn.ReLU())
        self.dec1 = nn.Sequential(nn.ConvTranspose2d(4 * c, 2 * c, 3, padding=1), nn.BatchNorm2d(2 * c), nn.ReLU())
        self.unpool = nn.MaxUnpool2d(2, stride=2)
        self.dec2 = nn.Sequential(nn.ConvTranspose2d(2 * c, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU())
        self.expand = nn.Conv2d(c, channels, 1)

    def encode(self, features: torch.Tensor) -> Tuple[torch.Tensor, PoolIndices]:
        if features.ndim != 4 or features.shape[1] != self.channels:
            raise ShapeError(f"SAM expects {self.channels} channels, got {tuple(features.shape)}")
        if features.shape[-2] < 2 or features.shape[-1] < 2:
            raise ShapeError(f"SAM needs H, W >= 2, got {tuple(features.shape[-2:])}")
        psi = self.enc1(self.reduce(features))
        pooled, indices = self.pool(psi)
        return self.enc2(pooled), PoolIndices(indices=indices, size=psi.shape)

    def decode(self, gamma: torch.Tensor, pool: PoolIndices) -> torch.Tensor:
        h = self.dec1(gamma)
        if h.shape != pool.indices.shape:
            raise ShapeError(f"pool indices {tuple(pool.indices.shape)} do not match decoder features {tuple(h.shape)}")
        psi = self.unpool(h, pool.indices, output_size=pool.size[-2:])
        return self.expand(self.dec2(psi))

    def forward(self, features: torch.Tensor, lam: float) -> torch.Tensor:
        gamma, pool = self.encode(features)
        return sam_apply(features, self.decode(gamma, pool), lam)


def sam_encode(F_g: torch.Tensor, state: SpatialAttention) -> Tuple[torch.Tensor, PoolIndices]:
    return state.encode(F_g)


def sam_decode(gamma: torch.Tensor, pool_indices: PoolIndices, state: SpatialAttention) -> torch.Tensor:
    return state.decode(gamma, pool_indices)


def spatial_softmax(attention: torch.Tensor) -> torch.Tensor:
    """Softmax over each channel's flattened H x W sites."""
    n, c, h, w = attention.shape
    return torch.softmax(attention.reshape(n, c, h * w), dim=-1).reshape(n, c, h, w)


def sam_apply(F_g: torch.Tensor, A_s: torch.Tensor, lam: float) -> torch.Tensor:
    require_shape("attention", A_s.shape, F_g.shape)
    return lam * (spatial_softmax(A_s) * F_g) + F_g


# Generator
class GeneratorBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, ratio: int, lam: float, attention: bool):
        super().__init__()
        self.lam = lam
        self.deconv = spectral_deconv(in_channels, out_channels)
        self.act = nn.LeakyReLU(0.2)
        self.sam = SpatialAttention(out_channels, ratio) if attention else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.act(self.deconv(x))
        if self.sam is not None:
            x = self.sam(x, self.lam)
        return x


class AttentionGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        self.z_dim = spec.z_dim
        grid = spec.grid_size
        self.project = nn.Linear(spec.z_dim, spec.base_channels * grid * grid)
        self.project_bn = nn.BatchNorm2d(spec.base_channels)
        chain = [spec.base_channels] + spec.block_channels
        self.blocks = nn.ModuleList(
            GeneratorBlock(cin, cout, spec.sam_ratio, spec.lam, spec.attention) for cin, cout in zip(chain[:-1], chain[1:])
        )
        self.to_image = nn.Sequential(nn.Conv2d(chain[-1], 3, 3, padding=1), nn.Tanh())

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.z_dim:
            raise ShapeError(f"noise must be N x {self.z_dim}, got {tuple(z.shape)}")
        grid = self.spec.grid_size
        x = self.project_bn(self.project(z).view(-1, self.spec.base_channels, grid, grid))
        for block in self.blocks:
            x = block(x)
        return self.to_image(x)

    def deconvs(self):
        return [block.deconv for block in self.blocks]


def build_generator(spec: GeneratorSpec, seed: int) -> AttentionGenerator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return AttentionGenerator(spec)


def generate(G: AttentionGenerator, z: torch.Tensor) -> torch.Tensor:
    return G(z)
