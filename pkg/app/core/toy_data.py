"""Procedural fine-grained image set: super-classes share a silhouette, their
sub-classes differ only in a small colored part carrying a marker."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple
import hashlib
import io
import json
import math

import torch
from matplotlib.colors import hsv_to_rgb
from pydantic import ValidationError

from .config import logger
from .errors import DfkdError, ShapeError, SpecError
from .models import DatasetSpec


BACKGROUND = -0.6
BODY = 0.25
MARKER = 1.0
JITTER_BRIGHTNESS = 0.1


@dataclass
class LabeledImageSet:
    images: torch.Tensor
    labels: torch.Tensor
    class_names: List[str]
    seed: int
    indices: Optional[torch.Tensor] = None
    params: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ShapeError(f"images must be M x 3 x H x W, got {tuple(self.images.shape)}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.numel() and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise SpecError(f"labels must lie in [0, {self.num_classes})")
        if self.indices is None:
            self.indices = torch.arange(len(self.labels))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    def subset(self, idx: torch.Tensor) -> "LabeledImageSet":
        return LabeledImageSet(
            images=self.images[idx],
            labels=self.labels[idx],
            class_names=list(self.class_names),
            seed=self.seed,
            indices=self.indices[idx],
            params=dict(self.params),
        )


# Silhouettes are masks over centered coordinates scaled to [-1, 1]
def _disk(y, x):
    return (x**2 + y**2) <= 0.45**2


def _square(y, x):
    return (x.abs() <= 0.4) & (y.abs() <= 0.4)


def _triangle(y, x):
    return (y <= 0.4) & (y >= -0.45) & (x.abs() <= (y + 0.45) * 0.5)


def _diamond(y, x):
    return (x.abs() + y.abs()) <= 0.5


def _cross(y, x):
    return ((x.abs() <= 0.14) & (y.abs() <= 0.5)) | ((y.abs() <= 0.14) & (x.abs() <= 0.5))


def _ring(y, x):
    r2 = x**2 + y**2
    return (r2 <= 0.5**2) & (r2 >= 0.25**2)


def _wide(y, x):
    return (x / 0.55) ** 2 + (y / 0.3) ** 2 <= 1.0


def _tall(y, x):
    return (x / 0.3) ** 2 + (y / 0.55) ** 2 <= 1.0


SILHOUETTES: List[Callable] = [_disk, _square, _triangle, _diamond, _cross, _ring, _wide, _tall]


def _part_geometry(image_size: int) -> Tuple[int, int, int]:
    """(top, left, side) of the part patch before jitter; sits on the body's upper right."""
    side = image_size // 4
    top = image_size // 2 - image_size // 4
    left = image_size // 2 + image_size // 16
    return top, left, side


def part_region(image_size: int) -> Tuple[int, int, int, int]:
    """Pixel box (y0, y1, x0, x1) containing the part under every translation jitter."""
    top, left, side = _part_geometry(image_size)
    shift = image_size // 8
    return (
        max(0, top - shift),
        min(image_size, top + side + shift),
        max(0, left - shift),
        min(image_size, left + side + shift),
    )


def _part_color(sub: int, subs_per_super: int) -> torch.Tensor:
    rgb = hsv_to_rgb([sub / subs_per_super, 1.0, 1.0])
    return torch.tensor(rgb, dtype=torch.float32) * 2.0 - 1.0


def synth_fgvc_dataset(
    num_super: int,
    subs_per_super: int,
    samples_per_class: int,
    image_size: int,
    seed: int,
) -> LabeledImageSet:
    try:
        spec = DatasetSpec(
            num_super=num_super,
            subs_per_super=subs_per_super,
            samples_per_class=samples_per_class,
            image_size=image_size,
            seed=seed,
        )
    except ValidationError as ve:
        raise SpecError(f"invalid dataset parameters: {ve}") from ve

    K = spec.num_classes
    S = image_size
    gen = torch.Generator().manual_seed(seed)
    shift = S // 8
    top, left, side = _part_geometry(S)
    cell = max(1, side // 3)

    labels = torch.arange(K).repeat_interleave(samples_per_class)
    M = labels.numel()
    dy = torch.randint(-shift, shift + 1, (M,), generator=gen)
    dx = torch.randint(-shift, shift + 1, (M,), generator=gen)
    brightness = (torch.rand(M, generator=gen) * 2.0 - 1.0) * JITTER_BRIGHTNESS

    rows = torch.arange(S).view(1, S, 1)
    cols = torch.arange(S).view(1, 1, S)
    ry = rows - dy.view(M, 1, 1)
    rx = cols - dx.view(M, 1, 1)
    # centered coordinates in [-1, 1]
    yc = (ry.float() + 0.5) / S * 2.0 - 1.0
    xc = (rx.float() + 0.5) / S * 2.0 - 1.0

    supers = labels // subs_per_super
    subs = labels % subs_per_super
    images = torch.full((M, 3, S, S), BACKGROUND)

    for s in range(num_super):
        base = SILHOUETTES[s % len(SILHOUETTES)]
        angle = (s // len(SILHOUETTES)) * math.pi / 7
        sel = supers == s
        y, x = yc[sel], xc[sel]
        if angle:
            y, x = y * math.cos(angle) - x * math.sin(angle), y * math.sin(angle) + x * math.cos(angle)
        body = base(y, x).unsqueeze(1).expand(-1, 3, -1, -1)
        block = images[sel]
        block[body] = BODY
        images[sel] = block

    in_part = (ry >= top) & (ry < top + side) & (rx >= left) & (rx < left + side)
    for j in range(subs_per_super):
        sel = subs == j
        color = _part_color(j, subs_per_super).view(1, 3, 1, 1)
        block = images[sel]
        mask = in_part[sel].unsqueeze(1)
        block = torch.where(mask, color.expand_as(block), block)
        # marker: one cell of a 3x3 grid inside the part, position keyed by sub-class
        my = top + (j % 9) // 3 * cell
        mx = left + (j % 9) % 3 * cell
        ry_s, rx_s = ry[sel], rx[sel]
        marker = (ry_s >= my) & (ry_s < my + cell) & (rx_s >= mx) & (rx_s < mx + cell)
        block = torch.where(marker.unsqueeze(1), torch.full_like(block, MARKER), block)
        images[sel] = block

    images = (images + brightness.view(M, 1, 1, 1)).clamp_(-1.0, 1.0)
    class_names = [f"super{s}_sub{j}" for s in range(num_super) for j in range(subs_per_super)]
    return LabeledImageSet(
        images=images.contiguous(),
        labels=labels,
        class_names=class_names,
        seed=seed,
        params=spec.model_dump(),
    )


def split(data: LabeledImageSet, train_frac: float, seed: int) -> Tuple[LabeledImageSet, LabeledImageSet]:
    """Stratified per-class split, deterministic in `seed`."""
    if not 0.0 < train_frac < 1.0:
        raise DfkdError(f"train_frac must lie in (0, 1), got {train_frac}")
    gen = torch.Generator().manual_seed(seed)
    train_idx: List[torch.Tensor] = []
    test_idx: List[torch.Tensor] = []
    for c in range(data.num_classes):
        members = torch.nonzero(data.labels == c, as_tuple=False).flatten()
        n = members.numel()
        if n < 2:
            raise DfkdError(f"class {data.class_names[c]!r} has {n} samples; a split needs at least 2")
        n_train = min(n - 1, max(1, round(train_frac * n)))
        perm = members[torch.randperm(n, generator=gen)]
        train_idx.append(perm[:n_train])
        test_idx.append(perm[n_train:])
    train = torch.sort(torch.cat(train_idx)).values
    test = torch.sort(torch.cat(test_idx)).values
    return data.subset(train), data.subset(test)


@torch.no_grad()
def evaluate_accuracy(model: torch.nn.Module, data: LabeledImageSet, batch_size: int = 256) -> float:
    """Top-1 accuracy with the model in inference mode; restores the model's mode afterwards."""
    if len(data) == 0:
        raise DfkdError("cannot evaluate on an empty dataset")
    num_classes = getattr(model, "num_classes", None)
    if num_classes is not None and num_classes != data.num_classes:
        raise ShapeError(f"model predicts {num_classes} classes, dataset has {data.num_classes}")

    was_training = model.training
    model.eval()
    device = next((p.device for p in model.parameters()), torch.device("cpu"))
    correct = 0
    try:
        for start in range(0, len(data), batch_size):
            images = data.images[start : start + batch_size].to(device)
            labels = data.labels[start : start + batch_size].to(device)
            logits = model(images)
            if logits.shape[1] != data.num_classes:
                raise ShapeError(f"model emits {logits.shape[1]} logits, dataset has {data.num_classes} classes")
            correct += int((logits.argmax(dim=1) == labels).sum())
    finally:
        model.train(was_training)
    return correct / len(data)


# On-disk cache: tensor blob + JSON sidecar
def _checksum(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def save_dataset(data: LabeledImageSet, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save({"images": data.images, "labels": data.labels}, buf)
    payload = buf.getvalue()
    path.write_bytes(payload)
    sidecar = {
        "params": data.params,
        "seed": data.seed,
        "K": data.num_classes,
        "M": len(data),
        "class_names": data.class_names,
        "checksum": _checksum(payload),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_dataset(path: Path) -> LabeledImageSet:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not path.exists() or not sidecar_path.exists():
        raise DfkdError(f"no cached dataset at {path}")
    sidecar = json.loads(sidecar_path.read_text())
    payload = path.read_bytes()
    if _checksum(payload) != sidecar.get("checksum"):
        raise DfkdError(f"checksum mismatch for cached dataset {path}")
    blob = torch.load(io.BytesIO(payload), weights_only=True)
    return LabeledImageSet(
        images=blob["images"],
        labels=blob["labels"],
        class_names=list(sidecar["class_names"]),
        seed=int(sidecar["seed"]),
        params=dict(sidecar["params"]),
    )


def cached_fgvc_dataset(cache_dir: Optional[str], spec: DatasetSpec) -> LabeledImageSet:
    """synth_fgvc_dataset behind the optional cache; regenerates on any mismatch."""
    args = (spec.num_super, spec.subs_per_super, spec.samples_per_class, spec.image_size, spec.seed)
    if not cache_dir:
        return synth_fgvc_dataset(*args)
    key = "fgvc_" + "_".join(str(a) for a in args)
    path = Path(cache_dir) / f"{key}.pt"
    if path.exists():
        try:
            data = load_dataset(path)
            if data.params == spec.model_dump():
                return data
            logger.warning(f"Cached dataset {path} has different parameters; regenerating")
        except DfkdError as e:
            logger.warning(f"Ignoring cached dataset: {e}")
    data = synth_fgvc_dataset(*args)
    save_dataset(data, path)
    logger.info(f"Cached dataset K={data.num_classes} M={len(data)} at {path}")
    return data
