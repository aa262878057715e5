from __future__ import annotations

import pytest
import torch

from app.core.classifier import (
    Adapter,
    adapt_channels,
    batch_stats_under_forward,
    build_model,
    collect_bn_running_stats,
    forward_with_taps,
    pretrain,
)
from app.core.errors import DfkdError, ShapeError
from app.core.models import ConvNetSpec, Hyperparams
from app.core.toy_data import evaluate_accuracy, synth_fgvc_dataset

TINY_SIZE = 16


def _images(n=4, seed=0, size=TINY_SIZE):
    return torch.randn(n, 3, size, size, generator=torch.Generator().manual_seed(seed))


class TestConvNet:
    def test_tap_shapes(self, teacher_spec):
        """One tap per stage, each halving the spatial size."""
        model = build_model(teacher_spec, seed=0)
        record = forward_with_taps(model, _images(), "eval")
        assert record.logits.shape == (4, 4)
        assert [tuple(f.shape) for f in record.stage_features] == [(4, 8, 8, 8), (4, 16, 4, 4), (4, 16, 2, 2)]
        assert record.penultimate.shape == (4, 16)

    def test_taps_equal_truncated_network(self, teacher_spec):
        """Recomputing each stage by truncating the network reproduces the tap exactly."""
        model = build_model(teacher_spec, seed=0).eval()
        x = _images()
        record = forward_with_taps(model, x, "eval")
        with torch.no_grad():
            h = model.stem(x)
            for stage, tap in zip(model.stages, record.stage_features):
                h = stage(h)
                assert torch.equal(h, tap)

    def test_build_is_deterministic(self, teacher_spec):
        a, b = build_model(teacher_spec, seed=7), build_model(teacher_spec, seed=7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_fresh_bn_stats(self, teacher_spec):
        """Fresh BN layers hold mean 0 and variance 1."""
        stats = collect_bn_running_stats(build_model(teacher_spec, seed=0))
        assert len(stats) == teacher_spec.num_bn_layers
        for s in stats:
            assert torch.equal(s.mean, torch.zeros_like(s.mean))
            assert torch.equal(s.variance, torch.ones_like(s.variance))

    def test_eval_forward_is_deterministic(self, teacher_spec):
        model = build_model(teacher_spec, seed=0)
        x = _images()
        a = forward_with_taps(model, x, "eval").logits
        b = forward_with_taps(model, x, "eval").logits
        assert torch.equal(a, b)

    def test_train_and_eval_modes_differ(self, teacher_spec):
        """Batch statistics of shifted inputs give different logits than the fresh running statistics."""
        model = build_model(teacher_spec, seed=0)
        x = _images() * 2 + 1
        with torch.no_grad():
            eval_logits = forward_with_taps(model, x, "eval").logits
            train_logits = forward_with_taps(model, x, "train").logits
        assert not torch.allclose(eval_logits, train_logits)

    def test_wrong_input_shape(self, teacher_spec):
        with pytest.raises(ShapeError):
            forward_with_taps(build_model(teacher_spec, seed=0), _images(size=32), "eval")

    def test_bad_mode(self, teacher_spec):
        with pytest.raises(DfkdError):
            forward_with_taps(build_model(teacher_spec, seed=0), _images(), "test")

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            ConvNetSpec(stage_channels=[8, 16], input_size=32)
        with pytest.raises(ValueError):
            ConvNetSpec(input_size=30)


class TestBatchStats:
    def test_running_stats_untouched(self, teacher_spec):
        """Recording batch statistics leaves running stats bit-identical, twice in a row."""
        model = build_model(teacher_spec, seed=0)
        before = [(s.mean.clone(), s.variance.clone()) for s in collect_bn_running_stats(model)]
        x = _images()
        first = batch_stats_under_forward(model, x)
        second = batch_stats_under_forward(model, x)
        after = collect_bn_running_stats(model)
        for (m, v), s in zip(before, after):
            assert torch.equal(m, s.mean) and torch.equal(v, s.variance)
        for a, b in zip(first, second):
            assert torch.equal(a.mean, b.mean) and torch.equal(a.variance, b.variance)

    def test_first_layer_matches_direct_reduction(self, teacher_spec):
        """First BN layer stats equal mean / biased variance of the stem conv output."""
        model = build_model(teacher_spec, seed=0)
        x = _images()
        stats = batch_stats_under_forward(model, x)
        with torch.no_grad():
            conv_out = model.stem[0](x)
        flat = conv_out.transpose(0, 1).reshape(conv_out.shape[1], -1)
        torch.testing.assert_close(stats[0].mean, flat.mean(dim=1))
        torch.testing.assert_close(stats[0].variance, ((flat - flat.mean(dim=1, keepdim=True)) ** 2).mean(dim=1))

    def test_layer_ids_align_with_running_stats(self, teacher_spec):
        model = build_model(teacher_spec, seed=0)
        ids = [s.layer_id for s in batch_stats_under_forward(model, _images())]
        assert ids == [s.layer_id for s in collect_bn_running_stats(model)]

    def test_batch_of_one_rejected(self, teacher_spec):
        with pytest.raises(DfkdError):
            batch_stats_under_forward(build_model(teacher_spec, seed=0), _images(n=1))

    def test_gradient_reaches_input(self, teacher_spec):
        """Stats stay on the graph so a loss on them reaches the images."""
        model = build_model(teacher_spec, seed=0)
        for p in model.parameters():
            p.requires_grad_(False)
        x = _images().requires_grad_(True)
        stats = batch_stats_under_forward(model, x)
        sum(s.mean.sum() + s.variance.sum() for s in stats).backward()
        assert x.grad is not None and x.grad.abs().sum() > 0


class TestAdapter:
    def test_identity(self):
        x = torch.randn(2, 8, 4, 4)
        assert torch.equal(adapt_channels(x, Adapter(8, 8, identity=True), 8), x)

    def test_shape(self):
        assert adapt_channels(torch.randn(4, 64, 8, 8), Adapter(64, 128), 128).shape == (4, 128, 8, 8)

    def test_per_site_matrix_product(self):
        adapter = Adapter(3, 5)
        x = torch.randn(2, 3, 4, 4)
        out = adapt_channels(x, adapter, 5)
        W = adapter.proj.weight.view(5, 3)
        expected = torch.einsum("oc,nchw->nohw", W, x)
        torch.testing.assert_close(out, expected)

    def test_linearity(self):
        adapter = Adapter(3, 5)
        x, y = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
        lhs = adapt_channels(2.0 * x - 0.5 * y, adapter, 5)
        rhs = 2.0 * adapt_channels(x, adapter, 5) - 0.5 * adapt_channels(y, adapter, 5)
        torch.testing.assert_close(lhs, rhs)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            adapt_channels(torch.randn(1, 4, 2, 2), Adapter(3, 5), 5)
        with pytest.raises(ShapeError):
            adapt_channels(torch.randn(1, 3, 2, 2), Adapter(3, 5), 6)


class TestPretrain:
    def test_zero_epochs_keeps_weights(self, teacher_spec, tiny_data):
        train, test = tiny_data
        model = build_model(teacher_spec, seed=0)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        model, history = pretrain(model, train, test, Hyperparams(epochs=0), seed=0)
        assert history.train_loss == []
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k])

    def test_history_and_determinism(self, teacher_spec, tiny_data):
        """Two runs with one seed produce identical histories; last accuracy matches a fresh evaluation."""
        train, test = tiny_data
        hyper = Hyperparams(epochs=2, batch_size=4, lr_s=0.05)
        m1, h1 = pretrain(build_model(teacher_spec, seed=0), train, test, hyper, seed=0)
        _, h2 = pretrain(build_model(teacher_spec, seed=0), train, test, hyper, seed=0)
        assert len(h1.train_loss) == 2 and h1.train_loss == h2.train_loss
        assert h1.final_accuracy == evaluate_accuracy(m1, test)

    def test_class_mismatch(self, tiny_data):
        train, test = tiny_data
        model = build_model(ConvNetSpec(stage_channels=[4, 4, 4], blocks_per_stage=1, num_classes=3, input_size=16), 0)
        with pytest.raises(ShapeError):
            pretrain(model, train, test, Hyperparams(epochs=1), seed=0)

    def test_running_mean_moves(self, teacher_spec, tiny_data):
        train, test = tiny_data
        model, _ = pretrain(build_model(teacher_spec, seed=0), train, test, Hyperparams(epochs=1, batch_size=4), seed=0)
        assert any(float(s.mean.norm()) > 0 for s in collect_bn_running_stats(model))

    def test_loss_falls_over_first_epochs(self, teacher_spec, tiny_data):
        """Full-batch training loss is non-increasing over five epochs for at least four of five seeds."""
        train, test = tiny_data
        hyper = Hyperparams(epochs=5, batch_size=len(train), lr_s=0.02)
        falling = 0
        for seed in range(5):
            _, history = pretrain(build_model(teacher_spec, seed=seed), train, test, hyper, seed=seed)
            losses = history.train_loss
            falling += all(b <= a for a, b in zip(losses, losses[1:]))
        assert falling >= 4

    def test_random_init_near_chance(self):
        """Untrained networks stay near 1/K on a balanced ten-class set."""
        data = synth_fgvc_dataset(num_super=2, subs_per_super=5, samples_per_class=10, image_size=TINY_SIZE, seed=0)
        spec = ConvNetSpec(stage_channels=[8, 16, 16], blocks_per_stage=1, num_classes=10, input_size=TINY_SIZE)
        for seed in range(10):
            assert 0.0 <= evaluate_accuracy(build_model(spec, seed=seed), data) <= 0.3
