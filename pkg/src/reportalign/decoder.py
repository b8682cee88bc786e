"""Shared autoregressive decoder, decoder-input augmentation, language loss.

The same parameter set decodes report representations during training and
image representations at inference. The cross-attention memory is the global
representation (position 0) followed by the surviving local vectors; either
side can be switched off for the wiring ablations.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import sinusoidal_positions
from .errors import ConfigError, InputError
from .synth import BOS, EOS, PAD


@dataclass
class AugmentationConfig:
    mode: str = "none"  # none | dropout | noise
    p: float = 0.9
    sigma: float = 5.0

    def validate(self):
        if self.mode not in ("none", "dropout", "noise"):
            raise ConfigError(f"unknown augmentation mode {self.mode!r}")
        if not (0.0 <= self.p < 1.0):
            raise ConfigError("drop probability must lie in [0, 1)")
        if self.sigma < 0:
            raise ConfigError("noise std must be non-negative")
        return self


def augment_locals(z_local: torch.Tensor, mask: torch.Tensor, cfg: AugmentationConfig,
                   generator: torch.Generator | None = None):
    """Training-time augmentation of the decoder's local inputs.

    dropout: each valid row is independently dropped with probability p;
    if a sample loses every row, one surviving row is drawn uniformly.
    noise: i.i.d. Gaussian noise added to every entry. none: identity.
    """
    cfg.validate()
    if cfg.mode == "none":
        return z_local, mask
    if cfg.mode == "noise":
        noise = torch.empty_like(z_local).normal_(0.0, cfg.sigma, generator=generator)
        return z_local + noise, mask
    # dropout over rows
    u = torch.rand(mask.shape, generator=generator, device=z_local.device)
    keep = (u >= cfg.p) & mask
    dead = ~keep.any(dim=-1)
    if bool(dead.any()):
        # retain one uniformly chosen valid row per starved sample
        weights = mask[dead].float()
        pick = torch.multinomial(weights, 1, generator=generator).squeeze(-1)
        rows = torch.nonzero(dead, as_tuple=False).squeeze(-1)
        keep[rows, pick] = True
    return z_local, keep


class MultiHeadAttention(nn.Module):
    """Generic attention used for both causal self-attention and
    cross-attention inside the decoder."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        assert d % heads == 0
        self.heads = heads
        self.dk = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, query, key, value, key_mask=None, causal=False,
                return_weights=False):
        b, tq, d = query.shape
        tk = key.shape[1]
        q = self.q(query).view(b, tq, self.heads, self.dk).transpose(1, 2)
        k = self.k(key).view(b, tk, self.heads, self.dk).transpose(1, 2)
        v = self.v(value).view(b, tk, self.heads, self.dk).transpose(1, 2)
        if not return_weights:
            attn_mask = None
            if key_mask is not None:
                attn_mask = key_mask[:, None, None, :]
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask,
                                               is_causal=causal)
            return self.out(y.transpose(1, 2).reshape(b, tq, d))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.dk)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.triu(
                torch.ones(tq, tk, dtype=torch.bool, device=query.device), diagonal=1
            )
            scores = scores.masked_fill(future, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, tq, d)
        y = self.out(y)
        if return_weights:
            return y, attn
        return y


class DecoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, heads)
        self.cross_attn = MultiHeadAttention(d, heads)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, d))

    def forward(self, x, memory, memory_mask, return_weights=False):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h, causal=True)
        h = self.norm2(x)
        cross = self.cross_attn(h, memory, memory, key_mask=memory_mask,
                                return_weights=return_weights)
        if return_weights:
            y, weights = cross
        else:
            y, weights = cross, None
        x = x + y
        x = x + self.ffn(self.norm3(x))
        return (x, weights) if return_weights else x


class ReportDecoder(nn.Module):
    """Two-block transformer decoder with a linear vocabulary head."""

    def __init__(self, vocab_size: int, d: int, heads: int, ffn_dim: int,
                 depth: int, max_len: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, d)
        self.register_buffer("pos", sinusoidal_positions(max_len, d), persistent=False)
        self.blocks = nn.ModuleList(DecoderBlock(d, heads, ffn_dim) for _ in range(depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, vocab_size)

    def forward(self, tokens: torch.Tensor, memory: torch.Tensor,
                memory_mask: torch.Tensor, return_cross_attn: bool = False):
        """Teacher-forced logits for every prefix position.

        tokens: (B, T) decoder inputs starting at BOS.
        memory: (B, M, d) cross-attention memory; memory_mask marks live rows.
        """
        if tokens.shape[1] > self.max_len:
            raise InputError("prefix longer than the configured maximum")
        x = self.embed(tokens) + self.pos[: tokens.shape[1]]
        last_weights = None
        for block in self.blocks:
            if return_cross_attn:
                x, last_weights = block(x, memory, memory_mask, return_weights=True)
            else:
                x = block(x, memory, memory_mask)
        logits = self.head(self.norm(x))
        if return_cross_attn:
            return logits, last_weights
        return logits

    def decode_step(self, prefix: torch.Tensor, memory: torch.Tensor,
                    memory_mask: torch.Tensor) -> torch.Tensor:
        """Next-token logits given a non-empty prefix; (B, T) -> (B, V)."""
        if prefix.shape[1] < 1:
            raise InputError("prefix must contain at least BOS")
        logits = self.forward(prefix, memory, memory_mask)
        return logits[:, -1]

    @torch.no_grad()
    def generate(self, memory: torch.Tensor, memory_mask: torch.Tensor,
                 max_len: int | None = None) -> list:
        """Batched greedy decoding from BOS until EOS or the length budget.

        Returns one token list per batch row; every output starts with BOS
        and ends with EOS (EOS is forced if the budget runs out).
        """
        max_len = self.max_len if max_len is None else min(max_len, self.max_len)
        b = memory.shape[0]
        device = memory.device
        tokens = torch.full((b, 1), BOS, dtype=torch.long, device=device)
        finished = torch.zeros(b, dtype=torch.bool, device=device)
        while tokens.shape[1] < max_len - 1 and not bool(finished.all()):
            logits = self.decode_step(tokens, memory, memory_mask)
            nxt = logits.argmax(dim=-1)
            nxt = torch.where(finished, torch.full_like(nxt, PAD), nxt)
            tokens = torch.cat([tokens, nxt.unsqueeze(1)], dim=1)
            finished = finished | (nxt == EOS)
        out = []
        for row in tokens.tolist():
            seq = [row[0]]
            for t in row[1:]:
                if t == PAD:
                    break
                seq.append(t)
                if t == EOS:
                    break
            if seq[-1] != EOS:
                seq.append(EOS)
            out.append(seq)
        return out


def build_decoder_memory(z_global: torch.Tensor, z_local: torch.Tensor,
                         mask: torch.Tensor, inputs: str = "global+local"):
    """Assemble the cross-attention memory per wiring mode.

    global+local: global vector prepended at position 0, then the locals.
    local: locals only. global: the single global vector.
    """
    if inputs == "global+local":
        memory = torch.cat([z_global.unsqueeze(1), z_local], dim=1)
        ones = torch.ones(mask.shape[0], 1, dtype=torch.bool, device=mask.device)
        memory_mask = torch.cat([ones, mask], dim=1)
    elif inputs == "local":
        memory, memory_mask = z_local, mask
    elif inputs == "global":
        memory = z_global.unsqueeze(1)
        memory_mask = torch.ones(mask.shape[0], 1, dtype=torch.bool, device=mask.device)
    else:
        raise ConfigError(f"unknown decoder input mode {inputs!r}")
    return memory, memory_mask


def language_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean token-level cross-entropy over non-PAD target positions."""
    if logits.shape[:-1] != targets.shape:
        raise InputError("logits and targets are misaligned")
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=PAD
    )
