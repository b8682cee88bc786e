"""Trainable shared memory queried by both modalities.

A query projects the input vector and all slots into a common space, ranks
slots by cosine similarity, and returns a softmax-weighted sum of the top-K
slots' output projections. Selection is hard (non-differentiable); gradients
reach only the selected slots and the three projections.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

COS_EPS = 1e-8


@dataclass
class MemoryResponse:
    r: torch.Tensor          # response vector, shape (d,)
    selected: torch.Tensor   # K slot indices, best first
    similarities: torch.Tensor  # cosine scores of the selected slots, non-increasing


class SharedMemory(nn.Module):
    def __init__(self, n_slots: int, slot_dim: int, feat_dim: int, top_k: int,
                 query_dim: int | None = None):
        super().__init__()
        if not (1 <= top_k <= n_slots):
            raise ValueError("top_k must satisfy 1 <= K <= n_slots")
        query_dim = feat_dim if query_dim is None else query_dim
        self.top_k = top_k
        self.slots = nn.Parameter(torch.randn(n_slots, slot_dim) / slot_dim ** 0.5)
        self.w_f = nn.Linear(feat_dim, query_dim, bias=False)
        self.w_in = nn.Linear(slot_dim, query_dim, bias=False)
        self.w_out = nn.Linear(slot_dim, feat_dim, bias=False)

    def similarities(self, f: torch.Tensor) -> torch.Tensor:
        """Clamped cosine similarity of projected inputs vs projected slots.

        f: (..., feat_dim) -> (..., n_slots)
        """
        fp = self.w_f(f)
        proj = self.w_in(self.slots)
        num = fp @ proj.T
        denom = (fp.norm(dim=-1, keepdim=True) * proj.norm(dim=-1)).clamp_min(COS_EPS)
        return num / denom

    def _select(self, sims: torch.Tensor):
        """Top-K slot indices, equal scores resolving to the lower index."""
        k = self.top_k
        vals, idx = torch.topk(sims, k, dim=-1)
        # a tie crossing the selection boundary needs the full stable sort
        boundary = (sims >= vals[..., -1:]).sum(dim=-1) > k
        if bool(boundary.any()):
            order = torch.argsort(-sims, dim=-1, stable=True)
            return order[..., :k]
        if k == 1:
            return idx
        # reorder the window by (descending value, ascending index)
        by_index = torch.argsort(idx, dim=-1)
        vals = torch.gather(vals, -1, by_index)
        idx = torch.gather(idx, -1, by_index)
        by_value = torch.argsort(-vals, dim=-1, stable=True)
        return torch.gather(idx, -1, by_value)

    def respond(self, f: torch.Tensor, return_selected: bool = False):
        """Memory response for each input row; f has shape (..., feat_dim)."""
        sims = self.similarities(f)
        idx = self._select(sims)
        top = torch.gather(sims, -1, idx)
        weights = torch.softmax(top, dim=-1)
        out = self.w_out(self.slots)[idx]  # (..., K, feat_dim)
        r = (weights.unsqueeze(-1) * out).sum(dim=-2)
        if return_selected:
            return r, idx, top
        return r

    def query(self, f: torch.Tensor) -> MemoryResponse:
        """Single-vector query contract; f has shape (feat_dim,)."""
        r, idx, top = self.respond(f, return_selected=True)
        return MemoryResponse(r=r, selected=idx, similarities=top)

    def enrich(self, f: torch.Tensor) -> torch.Tensor:
        """Add the memory response to every input vector: f + r(f)."""
        return f + self.respond(f)
