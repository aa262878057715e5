"""Teacher/student convolutional classifiers with tapped stage features,
BatchNorm statistic capture, the channel Adapter, and supervised pretraining."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, List, Literal, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import ValidationError
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from .config import CFG, logger
from .errors import DfkdError, ShapeError, SpecError
from .models import ConvNetSpec, Hyperparams, PretrainHistory
from .toy_data import LabeledImageSet, evaluate_accuracy


Mode = Literal["train", "eval"]


@dataclass
class ForwardRecord:
    logits: torch.Tensor
    stage_features: List[torch.Tensor]
    penultimate: torch.Tensor


@dataclass
class BNLayerStats:
    layer_id: str
    mean: torch.Tensor
    variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.variance.shape:
            raise ShapeError(f"{self.layer_id}: mean {tuple(self.mean.shape)} vs variance {tuple(self.variance.shape)}")


def conv_bn_relu(in_channels: int, out_channels: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_channels, momentum=0.1),
        nn.ReLU(inplace=True),
    )


class ConvNet(nn.Module):
    """stem -> 3 stages (x2 downsample at each stage entry) -> GAP -> linear head."""

    def __init__(self, spec: ConvNetSpec):
        super().__init__()
        self.spec = spec
        self.num_classes = spec.num_classes
        c = spec.stage_channels
        self.stem = conv_bn_relu(3, c[0])
        stages = []
        in_ch = c[0]
        for out_ch in c:
            blocks = [conv_bn_relu(in_ch, out_ch, stride=2)]
            blocks += [conv_bn_relu(out_ch, out_ch) for _ in range(spec.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(c[-1], spec.num_classes)

    @property
    def feature_dim(self) -> int:
        return self.spec.stage_channels[-1]

    def forward_features(self, x: torch.Tensor) -> ForwardRecord:
        expected = (3, self.spec.input_size, self.spec.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"expected N x {expected[0]} x {expected[1]} x {expected[2]} images, got {tuple(x.shape)}")
        h = self.stem(x)
        taps = []
        for stage in self.stages:
            h = stage(h)
            taps.append(h)
        penultimate = self.pool(h).flatten(1)
        return ForwardRecord(logits=self.head(penultimate), stage_features=taps, penultimate=penultimate)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x).logits


def build_model(spec: ConvNetSpec, seed: int) -> ConvNet:
    if not isinstance(spec, ConvNetSpec):
        try:
            spec = ConvNetSpec(**dict(spec))
        except (ValidationError, TypeError) as ve:
            raise SpecError(f"invalid network spec: {ve}") from ve
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ConvNet(spec)
    return model


def forward_with_taps(model: ConvNet, images: torch.Tensor, mode: Mode) -> ForwardRecord:
    """One forward pass in the requested BN mode; the model is left in that mode."""
    if mode not in ("train", "eval"):
        raise DfkdError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    return model.forward_features(images)


def _bn_layers(model: nn.Module) -> List[Tuple[str, nn.BatchNorm2d]]:
    layers = [(name, m) for name, m in model.named_modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not layers:
        raise DfkdError(f"{type(model).__name__} has no BatchNorm layers")
    return layers


def collect_bn_running_stats(model: nn.Module) -> List[BNLayerStats]:
    return [
        BNLayerStats(layer_id=name, mean=bn.running_mean.detach().clone(), variance=bn.running_var.detach().clone())
        for name, bn in _bn_layers(model)
    ]


@contextmanager
def bn_input_stats(model: nn.Module) -> Iterator[List[BNLayerStats]]:
    """Record, per BN layer, the batch mean and biased variance of its input over (N, H, W).

    Stats stay attached to the graph so a loss on them reaches whatever produced the input.
    """
    captured: List[BNLayerStats] = []
    handles = []

    def make_hook(name: str):
        def hook(module, inputs):
            x = inputs[0]
            if x.shape[0] < 2:
                raise DfkdError(f"batch size {x.shape[0]} too small for batch statistics")
            dims = [0] + list(range(2, x.ndim))
            captured.append(BNLayerStats(layer_id=name, mean=x.mean(dim=dims), variance=x.var(dim=dims, unbiased=False)))

        return hook

    for name, bn in _bn_layers(model):
        handles.append(bn.register_forward_pre_hook(make_hook(name)))
    try:
        yield captured
    finally:
        for h in handles:
            h.remove()


def forward_with_bn_stats(model: ConvNet, images: torch.Tensor) -> Tuple[ForwardRecord, List[BNLayerStats]]:
    """Eval-mode forward (running stats normalize) that also returns per-layer batch stats."""
    if images.shape[0] < 2:
        raise DfkdError(f"batch size {images.shape[0]} too small for batch statistics")
    was_training = model.training
    model.eval()
    try:
        with bn_input_stats(model) as stats:
            record = model.forward_features(images)
    finally:
        model.train(was_training)
    return record, list(stats)


def batch_stats_under_forward(model: ConvNet, images: torch.Tensor) -> List[BNLayerStats]:
    return forward_with_bn_stats(model, images)[1]


class Adapter(nn.Module):
    """1x1 convolution (no bias) lifting student channels to the teacher's."""

    def __init__(self, in_channels: int, out_channels: int, identity: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.proj = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        if identity:
            if in_channels != out_channels:
                raise SpecError("identity adapter needs equal channel counts")
            with torch.no_grad():
                self.proj.weight.copy_(torch.eye(in_channels).view(in_channels, in_channels, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)


def adapt_channels(feature: torch.Tensor, adapter: Adapter, C_t: int) -> torch.Tensor:
    if feature.ndim != 4 or feature.shape[1] != adapter.in_channels:
        raise ShapeError(f"adapter expects {adapter.in_channels} input channels, got {tuple(feature.shape)}")
    if adapter.out_channels != C_t:
        raise ShapeError(f"adapter emits {adapter.out_channels} channels, teacher tap has {C_t}")
    return adapter(feature)


def pretrain(
    model: ConvNet,
    train: LabeledImageSet,
    test: LabeledImageSet,
    hyper: Hyperparams,
    seed: int,
) -> Tuple[ConvNet, PretrainHistory]:
    """Supervised cross-entropy training with SGD + cosine annealing; deterministic in `seed`."""
    for name, data in (("train", train), ("test", test)):
        if data.num_classes != model.num_classes:
            raise ShapeError(f"{name} set has {data.num_classes} classes, model has {model.num_classes}")

    history = PretrainHistory()
    if hyper.epochs == 0:
        return model, history

    device = CFG.device
    model.to(device)
    loader = DataLoader(
        TensorDataset(train.images, train.labels),
        batch_size=hyper.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(seed),
    )
    optimizer = torch.optim.SGD(
        model.parameters(), lr=hyper.lr_s, momentum=hyper.momentum_s, weight_decay=hyper.weight_decay_s
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=hyper.epochs)

    for epoch in tqdm(range(hyper.epochs), desc="pretrain", disable=not CFG.PROGRESS):
        model.train()
        total, seen = 0.0, 0
        for images, labels in loader:
            images, labels = images.to(device), labels.to(device)
            loss = F.cross_entropy(model(images), labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * labels.numel()
            seen += labels.numel()
        scheduler.step()
        history.train_loss.append(total / seen)
        history.test_accuracy.append(evaluate_accuracy(model, test))
        logger.info(
            f"pretrain epoch {epoch + 1}/{hyper.epochs} loss={history.train_loss[-1]:.4f} "
            f"test_acc={history.test_accuracy[-1]:.4f}"
        )
    return model, history
