from __future__ import annotations

from typing import Callable, Iterable, List, Optional, Sequence

import pytest
import torch

from app.core.checkpoint import save_classifier
from app.core.classifier import build_model
from app.core.config import CFG
from app.core.models import ConvNetSpec, GeneratorSpec, Hyperparams
from app.core.toy_data import split, synth_fgvc_dataset

TINY_SIZE = 16


def pytest_collection_modifyitems(config, items):
    if CFG.RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="long training run; set DFKD_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _quiet(monkeypatch):
    monkeypatch.setattr(CFG, "PROGRESS", False)


@pytest.fixture
def tiny_data():
    data = synth_fgvc_dataset(num_super=2, subs_per_super=2, samples_per_class=6, image_size=TINY_SIZE, seed=0)
    return split(data, 0.5, seed=0)


@pytest.fixture
def teacher_spec():
    return ConvNetSpec(stage_channels=[8, 16, 16], blocks_per_stage=1, num_classes=4, input_size=TINY_SIZE)


@pytest.fixture
def student_spec():
    return ConvNetSpec(stage_channels=[4, 8, 8], blocks_per_stage=1, num_classes=4, input_size=TINY_SIZE)


@pytest.fixture
def generator_spec():
    return GeneratorSpec(z_dim=8, base_channels=16, out_size=TINY_SIZE, sam_ratio=2)


@pytest.fixture
def tiny_hyper():
    return Hyperparams(gen_steps=1, student_steps=1, batch_size=4, epochs=2, seed=0)


@pytest.fixture
def teacher_ckpt(tmp_path, teacher_spec):
    model = build_model(teacher_spec, seed=0)
    # non-trivial running stats so the BN prior is not the identity
    model.train()
    with torch.no_grad():
        model(torch.randn(8, 3, TINY_SIZE, TINY_SIZE, generator=torch.Generator().manual_seed(0)))
    model.eval()
    return save_classifier(model, tmp_path / "teacher.pt", seed=0)


class KinkRecorder:
    """Records max-pool argmax indices and ReLU sign patterns seen by forward passes of `model`."""

    def __init__(self, model: torch.nn.Module) -> None:
        self.seen: List[torch.Tensor] = []
        self.handles = []
        for module in model.modules():
            if isinstance(module, torch.nn.MaxPool2d) and module.return_indices:
                self.handles.append(module.register_forward_hook(self._pool))
            elif isinstance(module, (torch.nn.ReLU, torch.nn.LeakyReLU)):
                self.handles.append(module.register_forward_hook(self._relu))

    def _pool(self, module, inputs, output) -> None:
        self.seen.append(output[1].detach().clone())

    def _relu(self, module, inputs, output) -> None:
        self.seen.append(inputs[0].detach() > 0)

    def take(self) -> List[torch.Tensor]:
        seen, self.seen = self.seen, []
        return seen

    def remove(self) -> None:
        for handle in self.handles:
            handle.remove()


def _same_pattern(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def finite_difference_agreement(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    step: float = 1e-3,
    rtol: float = 1e-3,
    atol: float = 1e-7,
    max_coords: int = 400,
    seed: int = 0,
    pattern: Optional[KinkRecorder] = None,
    min_checked: int = 1,
) -> float:
    """Fraction of sampled coordinates whose analytic gradient matches central differences.

    With `pattern`, coordinates whose +-step perturbation changes any recorded
    pool index or ReLU sign are skipped; at least `min_checked` must remain.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    if pattern is not None:
        pattern.take()
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    base = pattern.take() if pattern is not None else []

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    if len(coords) > max_coords:
        pick = torch.randperm(len(coords), generator=torch.Generator().manual_seed(seed))[:max_coords]
        coords = [coords[k] for k in pick.tolist()]

    agree = checked = 0
    with torch.no_grad():
        for i, j in coords:
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + step
            plus = loss_fn().item()
            seen_plus = pattern.take() if pattern is not None else []
            flat[j] = orig - step
            minus = loss_fn().item()
            seen_minus = pattern.take() if pattern is not None else []
            stable = _same_pattern(seen_plus, base) and _same_pattern(seen_minus, base)
            flat[j] = orig
            if not stable:
                continue
            checked += 1
            numeric = (plus - minus) / (2 * step)
            a = analytic[i].view(-1)[j].item()
            if abs(a - numeric) <= rtol * max(abs(a), abs(numeric)) + atol:
                agree += 1
    assert checked >= min_checked, f"only {checked} of {len(coords)} coordinates kept a stable pattern"
    return agree / checked


@pytest.fixture
def fd_agreement():
    return finite_difference_agreement


@pytest.fixture
def kink_recorder():
    return KinkRecorder
