import math

import numpy as np
import pytest
import torch

from reportalign.decoder import (
    AugmentationConfig,
    ReportDecoder,
    augment_locals,
    build_decoder_memory,
    language_loss,
)
from reportalign.errors import ConfigError, InputError
from reportalign.synth import BOS, EOS, PAD, validate_token_sequence

from oracles import finite_diff_grad, language_loss_oracle, rel_err


def gen():
    g = torch.Generator()
    g.manual_seed(0)
    return g


class TestAugmentLocals:
    def test_none_is_identity(self):
        z = torch.randn(2, 5, 4)
        mask = torch.ones(2, 5, dtype=torch.bool)
        z2, m2 = augment_locals(z, mask, AugmentationConfig(mode="none"), gen())
        assert torch.equal(z2, z) and torch.equal(m2, mask)

    def test_dropout_p_zero_keeps_everything(self):
        z = torch.randn(2, 5, 4)
        mask = torch.ones(2, 5, dtype=torch.bool)
        _, m2 = augment_locals(z, mask, AugmentationConfig(mode="dropout", p=0.0), gen())
        assert m2.all()

    def test_dropout_survival_rate(self):
        z = torch.zeros(1, 10_000, 4)
        mask = torch.ones(1, 10_000, dtype=torch.bool)
        _, m2 = augment_locals(z, mask, AugmentationConfig(mode="dropout", p=0.9), gen())
        frac = m2.float().mean().item()
        assert 0.08 <= frac <= 0.12

    def test_all_dropped_guard_retains_one_row(self):
        z = torch.randn(64, 3, 4)
        mask = torch.ones(64, 3, dtype=torch.bool)
        g = gen()
        for _ in range(50):
            _, m2 = augment_locals(z, mask, AugmentationConfig(mode="dropout", p=0.9), g)
            assert bool(m2.any(dim=-1).all())

    def test_dropout_never_revives_padding(self):
        z = torch.randn(8, 4, 4)
        mask = torch.zeros(8, 4, dtype=torch.bool)
        mask[:, 0] = True  # single valid row per sample
        _, m2 = augment_locals(z, mask, AugmentationConfig(mode="dropout", p=0.9), gen())
        assert torch.equal(m2, mask)

    def test_noise_mode_perturbs_values_not_mask(self):
        z = torch.randn(2, 5, 4)
        mask = torch.ones(2, 5, dtype=torch.bool)
        z2, m2 = augment_locals(z, mask, AugmentationConfig(mode="noise", sigma=5.0), gen())
        assert torch.equal(m2, mask)
        spread = (z2 - z).std().item()
        assert 3.0 < spread < 7.0

    def test_invalid_config_rejected(self):
        z = torch.randn(1, 2, 2)
        mask = torch.ones(1, 2, dtype=torch.bool)
        with pytest.raises(ConfigError):
            augment_locals(z, mask, AugmentationConfig(mode="dropout", p=1.0), gen())
        with pytest.raises(ConfigError):
            augment_locals(z, mask, AugmentationConfig(mode="blur"), gen())


def make_decoder(d=8, heads=2, depth=2, vocab=20, max_len=16, dtype=torch.float32, seed=0):
    torch.manual_seed(seed)
    dec = ReportDecoder(vocab, d, heads, ffn_dim=16, depth=depth, max_len=max_len)
    return dec.to(dtype)


def make_memory_inputs(b=1, n=5, d=8, dtype=torch.float32, seed=1):
    torch.manual_seed(seed)
    z_global = torch.randn(b, d, dtype=dtype)
    z_local = torch.randn(b, n, d, dtype=dtype)
    mask = torch.ones(b, n, dtype=torch.bool)
    return z_global, z_local, mask


class TestDecodeStep:
    def test_logit_width_is_vocab_size(self):
        dec = make_decoder()
        z_g, z_l, mask = make_memory_inputs()
        memory, memory_mask = build_decoder_memory(z_g, z_l, mask)
        logits = dec.decode_step(torch.tensor([[BOS]]), memory, memory_mask)
        assert logits.shape == (1, 20)

    def test_cross_attention_weights_normalized(self):
        dec = make_decoder()
        z_g, z_l, mask = make_memory_inputs()
        memory, memory_mask = build_decoder_memory(z_g, z_l, mask)
        _, cross = dec(torch.tensor([[BOS, 4, 5]]), memory, memory_mask,
                       return_cross_attn=True)
        sums = cross.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_global_path_is_live(self):
        dec = make_decoder()
        z_g, z_l, mask = make_memory_inputs()
        prefix = torch.tensor([[BOS, 3]])
        mem_a, mm = build_decoder_memory(z_g, torch.zeros_like(z_l), mask)
        mem_b, _ = build_decoder_memory(torch.zeros_like(z_g), torch.zeros_like(z_l), mask)
        a = dec.decode_step(prefix, mem_a, mm)
        b = dec.decode_step(prefix, mem_b, mm)
        assert not torch.allclose(a, b)

    def test_memory_wiring_modes(self):
        z_g, z_l, mask = make_memory_inputs(n=4)
        both, both_mask = build_decoder_memory(z_g, z_l, mask, "global+local")
        assert both.shape[1] == 5 and both_mask.shape[1] == 5
        local, _ = build_decoder_memory(z_g, z_l, mask, "local")
        assert local.shape[1] == 4
        glob, glob_mask = build_decoder_memory(z_g, z_l, mask, "global")
        assert glob.shape[1] == 1 and bool(glob_mask.all())
        with pytest.raises(ConfigError):
            build_decoder_memory(z_g, z_l, mask, "nothing")

    def test_too_long_prefix_rejected(self):
        dec = make_decoder(max_len=8)
        z_g, z_l, mask = make_memory_inputs()
        memory, memory_mask = build_decoder_memory(z_g, z_l, mask)
        with pytest.raises(InputError):
            dec.decode_step(torch.zeros(1, 9, dtype=torch.long), memory, memory_mask)

    def test_causal_masking_blocks_future_tokens(self):
        dec = make_decoder()
        z_g, z_l, mask = make_memory_inputs()
        memory, memory_mask = build_decoder_memory(z_g, z_l, mask)
        base = torch.tensor([[BOS, 4, 5, 6]])
        perturbed = torch.tensor([[BOS, 4, 9, 9]])
        la = dec(base, memory, memory_mask)
        lb = dec(perturbed, memory, memory_mask)
        assert torch.allclose(la[:, :2], lb[:, :2], atol=1e-6)
        assert not torch.allclose(la[:, 2:], lb[:, 2:])


class TestGenerate:
    def test_untrained_model_yields_valid_sequence(self):
        dec = make_decoder(vocab=20, max_len=12)
        z_g, z_l, mask = make_memory_inputs()
        memory, memory_mask = build_decoder_memory(z_g, z_l, mask)
        out = dec.generate(memory, memory_mask)[0]
        validate_token_sequence(out, max_len=12)

    def test_generation_is_deterministic(self):
        dec = make_decoder(seed=2)
        z_g, z_l, mask = make_memory_inputs(seed=3)
        memory, memory_mask = build_decoder_memory(z_g, z_l, mask)
        assert dec.generate(memory, memory_mask) == dec.generate(memory, memory_mask)

    def test_batched_generation_matches_single(self):
        dec = make_decoder(seed=4)
        z_g, z_l, mask = make_memory_inputs(b=3, seed=5)
        memory, memory_mask = build_decoder_memory(z_g, z_l, mask)
        batched = dec.generate(memory, memory_mask)
        singles = [
            dec.generate(memory[i : i + 1], memory_mask[i : i + 1])[0] for i in range(3)
        ]
        assert batched == singles


class TestLanguageLoss:
    def test_uniform_logits_give_log_vocab(self):
        logits = torch.zeros(1, 3, 160)
        targets = torch.tensor([[4, 5, EOS]])
        loss = language_loss(logits, targets)
        assert abs(loss.item() - math.log(160)) < 1e-6

    def test_confident_correct_logits_drive_loss_to_zero(self):
        targets = torch.tensor([[4, 5, EOS]])
        logits = torch.full((1, 3, 20), -50.0)
        for t, tok in enumerate(targets[0]):
            logits[0, t, tok] = 50.0
        assert language_loss(logits, targets).item() < 1e-6

    def test_matches_direct_oracle(self):
        torch.manual_seed(0)
        logits = torch.randn(2, 6, 20, dtype=torch.float64)
        targets = torch.randint(3, 20, (2, 6))
        targets[0, 4:] = PAD
        loss = language_loss(logits, targets)
        expected = language_loss_oracle(logits.numpy(), targets.numpy(), PAD)
        assert abs(loss.item() - expected) < 1e-6

    def test_pad_positions_excluded(self):
        torch.manual_seed(1)
        logits = torch.randn(1, 4, 20)
        targets = torch.tensor([[4, 5, PAD, PAD]])
        short = language_loss(logits[:, :2], targets[:, :2])
        padded = language_loss(logits, targets)
        assert torch.allclose(short, padded, atol=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InputError):
            language_loss(torch.zeros(1, 3, 20), torch.zeros(1, 4, dtype=torch.long))

    def test_gradient_wrt_decoder_inputs_matches_finite_differences(self):
        dec = make_decoder(d=6, heads=2, depth=1, vocab=12, dtype=torch.float64, seed=6)
        tokens = torch.tensor([[BOS, 4, 5, EOS]])
        z_g = torch.randn(1, 6, dtype=torch.float64, requires_grad=True)
        z_l = torch.randn(1, 3, 6, dtype=torch.float64, requires_grad=True)
        mask = torch.ones(1, 3, dtype=torch.bool)

        def compute(zg, zl):
            memory, memory_mask = build_decoder_memory(zg, zl, mask)
            logits = dec(tokens[:, :-1], memory, memory_mask)
            return language_loss(logits, tokens[:, 1:])

        loss = compute(z_g, z_l)
        grad_g, grad_l = torch.autograd.grad(loss, (z_g, z_l))

        zg_fd, zl_fd = z_g.detach().clone(), z_l.detach().clone()
        numeric_g = finite_diff_grad(lambda: compute(zg_fd, zl_fd), zg_fd)
        numeric_l = finite_diff_grad(lambda: compute(zg_fd, zl_fd), zl_fd)
        assert rel_err(grad_g.numpy(), numeric_g.numpy()) < 1e-3
        assert rel_err(grad_l.numpy(), numeric_l.numpy()) < 1e-3
