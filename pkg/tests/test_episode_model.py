import math

import numpy as np
import pytest
import torch

from forumlink.episode_model import (
    AuthorEncoder,
    EmptyBatch,
    EpisodeEncoder,
    EpisodeEncoderConfig,
    IndexOutOfRange,
    MarketHead,
    multitask_loss,
    softmax_xent,
)
from forumlink.text_encoder import DimensionMismatch, TextEncoder, TextEncoderConfig, init_parameters
from forumlink.time_encoder import TimeEncoder


def make_episode_encoder(seed=0, **overrides) -> EpisodeEncoder:
    cfg = EpisodeEncoderConfig(
        d_in=10, episode_len=3, d_agg=8, n_heads=2, d_ff=16, out_dim=4, **overrides
    )
    enc = EpisodeEncoder(cfg)
    init_parameters(enc, seed)
    return enc


class TestEpisodeEncoder:
    def test_unit_norm(self):
        enc = make_episode_encoder()
        x = torch.randn(5, 3, 10)
        norms = enc(x).norm(dim=-1)
        assert torch.allclose(norms, torch.ones(5), atol=1e-6)

    def test_post_permutation_invariance_with_positions_zeroed(self):
        enc = make_episode_encoder(seed=2)
        enc.post_positions.data.zero_()
        x = torch.randn(2, 3, 10)
        out = enc(x)
        out_perm = enc(x[:, torch.tensor([2, 0, 1])])
        assert torch.allclose(out, out_perm, atol=1e-6)

    def test_positions_break_permutation_invariance(self):
        enc = make_episode_encoder(seed=2)
        with torch.no_grad():
            enc.post_positions.add_(torch.randn(3, 8))
        x = torch.randn(2, 3, 10)
        assert not torch.allclose(enc(x), enc(x[:, torch.tensor([2, 0, 1])]), atol=1e-6)

    def test_degenerate_input_hits_unit_fallback(self):
        enc = make_episode_encoder()
        with torch.no_grad():
            for p in enc.parameters():
                p.zero_()
        out = enc(torch.zeros(2, 3, 10))
        expected = torch.zeros(2, 4)
        expected[:, 0] = 1.0
        assert torch.equal(out, expected)

    def test_shape_validation(self):
        enc = make_episode_encoder()
        with pytest.raises(DimensionMismatch):
            enc(torch.zeros(2, 4, 10))
        with pytest.raises(DimensionMismatch):
            enc(torch.zeros(2, 3, 9))


class TestMarketHead:
    def test_zero_parameters_zero_logits(self):
        head = MarketHead("m", 4, {"a": 0, "b": 1})
        with torch.no_grad():
            head.linear.weight.zero_()
            head.linear.bias.zero_()
        assert torch.equal(head(torch.randn(3, 4)), torch.zeros(3, 2))

    def test_single_class_head(self):
        head = MarketHead("m", 4, {"only": 0})
        assert head(torch.randn(2, 4)).shape == (2, 1)

    def test_orthogonal_rows_argmax_is_nearest_row(self):
        head = MarketHead("m", 4, {"a": 0, "b": 1, "c": 2, "d": 3})
        with torch.no_grad():
            head.linear.weight.copy_(torch.eye(4))
            head.linear.bias.zero_()
        queries = torch.eye(4) * 2.5
        logits = head(queries)
        assert torch.equal(logits.argmax(dim=-1), torch.arange(4))

    def test_label_map_must_be_dense(self):
        with pytest.raises(ValueError):
            MarketHead("m", 4, {"a": 0, "b": 2})


class TestSoftmaxXent:
    def test_uniform_logits(self):
        loss = softmax_xent(torch.zeros(4, dtype=torch.float64), torch.tensor(2))
        assert math.isclose(loss.item(), math.log(4), rel_tol=1e-12)

    def test_saturated_logits_stay_stable(self):
        loss = softmax_xent(torch.tensor([30.0, -30.0]), torch.tensor(0))
        assert 0.0 <= loss.item() < 1e-9
        big = softmax_xent(torch.tensor([1e4, -1e4]), torch.tensor(0))
        assert torch.isfinite(big)

    def test_matches_direct_formula(self):
        gen = torch.Generator().manual_seed(0)
        logits = torch.randn(5, 7, dtype=torch.float64, generator=gen)
        targets = torch.randint(0, 7, (5,), generator=gen)
        loss = softmax_xent(logits, targets)
        probs = torch.exp(logits) / torch.exp(logits).sum(dim=-1, keepdim=True)
        direct = -torch.log(probs[torch.arange(5), targets])
        assert torch.allclose(loss, direct, atol=1e-10)

    def test_nonnegative(self):
        gen = torch.Generator().manual_seed(1)
        logits = torch.randn(100, 3, generator=gen)
        targets = torch.randint(0, 3, (100,), generator=gen)
        assert (softmax_xent(logits, targets) >= 0).all()

    def test_index_validation(self):
        with pytest.raises(IndexOutOfRange):
            softmax_xent(torch.zeros(3), torch.tensor(3))


class TestMultitaskLoss:
    def _task(self, seed, n=6, dim=4, classes=3):
        gen = torch.Generator().manual_seed(seed)
        emb = torch.randn(n, dim, generator=gen)
        labels = torch.randint(0, classes, (n,), generator=gen)
        head = MarketHead(f"t{seed}", dim, {f"a{i}": i for i in range(classes)})
        init_parameters(head, seed)
        return emb, labels, head

    def test_single_task_equals_mean_loss(self):
        emb, labels, head = self._task(0)
        total = multitask_loss({"t0": (emb, labels)}, {"t0": head})
        assert torch.allclose(total, softmax_xent(head(emb), labels).mean())

    def test_identical_tasks_double_the_loss(self):
        emb, labels, head = self._task(0)
        single = multitask_loss({"t0": (emb, labels)}, {"t0": head})
        double = multitask_loss({"t0": (emb, labels), "t1": (emb, labels)}, {"t0": head, "t1": head})
        assert torch.allclose(double, 2 * single, atol=1e-9)

    def test_additivity_against_separate_computation(self):
        a = self._task(1)
        b = self._task(2)
        combined = multitask_loss(
            {"t1": (a[0], a[1]), "t2": (b[0], b[1])}, {"t1": a[2], "t2": b[2]}
        )
        separate = (
            softmax_xent(a[2](a[0]), a[1]).mean() + softmax_xent(b[2](b[0]), b[1]).mean()
        )
        assert abs(combined.item() - separate.item()) < 1e-9

    def test_gradients_isolated_per_head(self):
        a = self._task(3)
        b = self._task(4)
        total = multitask_loss({"t3": (a[0], a[1]), "t4": (b[0], b[1])}, {"t3": a[2], "t4": b[2]})
        total.backward()
        grad_a = a[2].linear.weight.grad.clone()
        a[2].linear.weight.grad = None
        solo = softmax_xent(a[2](a[0]), a[1]).mean()
        solo.backward()
        assert torch.allclose(grad_a, a[2].linear.weight.grad, atol=1e-7)

    def test_empty_batch_rejected(self):
        _, _, head = self._task(5)
        with pytest.raises(EmptyBatch):
            multitask_loss({"t5": (torch.zeros(0, 4), torch.zeros(0, dtype=torch.long))}, {"t5": head})


class TestAuthorEncoder:
    def _model(self, use_time=True, use_graph=True, seed=0):
        text_cfg = TextEncoderConfig(
            vocab_size=9, seq_len=6, d_tok=8, filters=2, kernel_sizes=(2, 3),
            d_c=8, d_s=8, n_heads=2, n_blocks=1, d_ff=16,
        )
        text = TextEncoder(text_cfg)
        time_enc = TimeEncoder(d_tau=4)
        ep = EpisodeEncoder(EpisodeEncoderConfig(
            d_in=text_cfg.out_dim + 4 + 4, episode_len=2, d_agg=8, n_heads=2, d_ff=16, out_dim=4,
        ))
        model = AuthorEncoder(text, time_enc, ep, d_m=4, use_time=use_time, use_graph=use_graph)
        init_parameters(model, seed)
        return model

    def _inputs(self, seed=0):
        gen = torch.Generator().manual_seed(seed)
        tokens = torch.randint(0, 9, (3, 2, 6), generator=gen)
        dows = torch.randint(0, 7, (3, 2), generator=gen)
        doys = torch.randint(1, 367, (3, 2), generator=gen)
        ctx = torch.randn(3, 2, 4, generator=gen)
        return tokens, dows, doys, ctx

    def test_output_is_unit_norm(self):
        model = self._model()
        out = model(*self._inputs())
        assert torch.allclose(out.norm(dim=-1), torch.ones(3), atol=1e-6)

    def test_time_ablation_zeroes_the_channel(self):
        model = self._model(use_time=False)
        tokens, dows, doys, ctx = self._inputs()
        out_a = model(tokens, dows, doys, ctx)
        out_b = model(tokens, (dows + 3) % 7, torch.clamp(doys + 30, max=366), ctx)
        assert torch.equal(out_a, out_b)

    def test_graph_ablation_ignores_context_values(self):
        model = self._model(use_graph=False)
        tokens, dows, doys, ctx = self._inputs()
        assert torch.equal(model(tokens, dows, doys, ctx), model(tokens, dows, doys, ctx * 100))

    def test_channel_width_validated(self):
        text_cfg = TextEncoderConfig(
            vocab_size=9, seq_len=6, d_tok=8, filters=2, kernel_sizes=(2, 3),
            d_c=8, d_s=8, n_heads=2, n_blocks=1, d_ff=16,
        )
        text = TextEncoder(text_cfg)
        ep = EpisodeEncoder(EpisodeEncoderConfig(d_in=99, episode_len=2, d_agg=8, n_heads=2, d_ff=16, out_dim=4))
        with pytest.raises(DimensionMismatch):
            AuthorEncoder(text, TimeEncoder(4), ep, d_m=4)
