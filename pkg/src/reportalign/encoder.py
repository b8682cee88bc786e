"""Feature extraction, modality-specific and shared encoders, and the
attention pooling that turns local representations into the global one."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError
from .synth import PAD


def sinusoidal_positions(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=dtype).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=dtype) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d, dtype=dtype)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: d // 2])
    return pe


class ReportFeatures(nn.Module):
    """Token embedding plus sinusoidal positions; PAD rows carried but masked."""

    def __init__(self, vocab_size: int, d: int, max_len: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, d)
        self.register_buffer("pos", sinusoidal_positions(max_len, d), persistent=False)

    def forward(self, tokens: torch.Tensor):
        if int(tokens.max()) >= self.vocab_size:
            raise InputError("token id out of vocabulary range")
        if tokens.shape[1] > self.pos.shape[0]:
            raise InputError("sequence longer than the configured maximum")
        feats = self.embed(tokens) + self.pos[: tokens.shape[1]]
        mask = tokens != PAD
        return feats, mask


class ImageFeatures(nn.Module):
    """Per-patch affine map to model width plus a learned position table."""

    def __init__(self, patch_dim: int, d: int, n_patches: int):
        super().__init__()
        self.patch_dim = patch_dim
        self.proj = nn.Linear(patch_dim, d)
        self.pos = nn.Parameter(torch.zeros(n_patches, d))

    def forward(self, grids: torch.Tensor, keep_mask: torch.Tensor | None = None):
        if grids.shape[-1] != self.patch_dim or grids.shape[-2] != self.pos.shape[0]:
            raise InputError("patch grid shape does not match the model")
        feats = self.proj(grids) + self.pos
        if keep_mask is None:
            mask = torch.ones(grids.shape[:-1], dtype=torch.bool, device=grids.device)
        else:
            mask = keep_mask.bool()
        return feats, mask


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        assert d % heads == 0
        self.heads = heads
        self.dk = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, mask: torch.Tensor, return_weights: bool = False):
        b, n, d = x.shape
        q, k, v = self.q(x), self.k(x), self.v(x)
        q, k, v = (t.view(b, n, self.heads, self.dk).transpose(1, 2) for t in (q, k, v))
        if not return_weights:
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask[:, None, None, :])
            return self.out(y.transpose(1, 2).reshape(b, n, d))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.dk)
        # masked keys contribute zero attention from every query
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y), attn


class EncoderBlock(nn.Module):
    """Pre-norm self-attention block with a feed-forward sublayer."""

    def __init__(self, d: int, heads: int, ffn_dim: int):
        super().__init__()
        self.attn = MultiHeadSelfAttention(d, heads)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, d))

    def forward(self, x, mask):
        x = x + self.attn(self.norm1(x), mask)
        x = x + self.ffn(self.norm2(x))
        return x


class StackedEncoder(nn.Module):
    """A stack of encoder blocks; used for E_R/E_I (depth 1) and the shared
    encoder (depth 2, one instance serving both modalities)."""

    def __init__(self, d: int, heads: int, ffn_dim: int, depth: int):
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(d, heads, ffn_dim) for _ in range(depth))

    def forward(self, x, mask):
        for block in self.blocks:
            x = block(x, mask)
        return x


class GlobalAggregator(nn.Module):
    """Attention pooling: scores = w2 . tanh(w1 . Z^T), softmax over valid
    positions, global = weighted average of the locals."""

    def __init__(self, d: int):
        super().__init__()
        self.w1 = nn.Linear(d, d, bias=False)
        self.w2 = nn.Linear(d, 1, bias=False)

    def forward(self, z_local: torch.Tensor, mask: torch.Tensor):
        if not bool(mask.any(dim=-1).all()):
            raise InputError("global aggregation needs at least one valid position")
        scores = self.w2(torch.tanh(self.w1(z_local))).squeeze(-1)
        scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        z_global = torch.einsum("bn,bnd->bd", weights, z_local)
        return z_global, weights
