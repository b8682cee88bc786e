"""Auxiliary alignment tasks: multi-label supervised contrastive learning and
multi-label classification, plus the per-modality view augmentations that
expand a batch to two views per sample."""

import numpy as np
import torch
import torch.nn as nn

from .config import NUM_CLASSES
from .errors import ConfigError, InputError
from .synth import BOS, EOS, PERIOD

SIGMOID_EPS = 1e-7


def positive_mask(labels: torch.Tensor, view_of: torch.Tensor) -> torch.Tensor:
    """P(i) membership matrix: share at least one class, or same origin.

    Modality-blind; the diagonal is excluded.
    """
    share = (labels.float() @ labels.float().T) >= 1.0
    sibling = view_of.unsqueeze(0) == view_of.unsqueeze(1)
    mask = share | sibling
    mask.fill_diagonal_(False)
    return mask


def positive_set(i: int, labels: torch.Tensor, view_of: torch.Tensor) -> list:
    mask = positive_mask(labels, view_of)
    return torch.nonzero(mask[i], as_tuple=False).squeeze(-1).tolist()


def contrastive_loss(z: torch.Tensor, labels: torch.Tensor, view_of: torch.Tensor,
                     tau: float) -> torch.Tensor:
    """Supervised contrastive loss over one batch of global representations.

    Rows are L2-normalized before the dot products. Each anchor averages the
    log-softmax similarity of its positives against all other rows; anchors
    with no positives are skipped. The result is the mean over anchors that
    have at least one positive.
    """
    if tau <= 0:
        raise ConfigError("tau must be positive")
    b = z.shape[0]
    if b < 2:
        raise InputError("contrastive loss needs at least two rows")
    zn = torch.nn.functional.normalize(z, dim=-1)
    sims = zn @ zn.T / tau
    eye = torch.eye(b, dtype=torch.bool, device=z.device)
    # log denominator over j != i, numerically stabilized per row
    masked = sims.masked_fill(eye, float("-inf"))
    row_max = masked.max(dim=-1, keepdim=True).values
    log_denom = row_max.squeeze(-1) + torch.log(
        torch.exp(masked - row_max).sum(dim=-1)
    )
    log_prob = sims - log_denom.unsqueeze(-1)
    pos = positive_mask(labels, view_of)
    n_pos = pos.sum(dim=-1)
    anchor_terms = -(log_prob * pos).sum(dim=-1) / n_pos.clamp_min(1)
    valid = n_pos > 0
    if not bool(valid.any()):
        return z.sum() * 0.0
    return anchor_terms[valid].mean()


def shuffle_sentences(tokens: list, rng: np.random.Generator) -> list:
    """Report view: permute the period-terminated sentences, keeping the
    tokens inside each sentence (and the sentinels) fixed."""
    body = tokens[1 : tokens.index(EOS)]
    sentences, cur = [], []
    for t in body:
        cur.append(t)
        if t == PERIOD:
            sentences.append(cur)
            cur = []
    if cur:
        sentences.append(cur)
    order = rng.permutation(len(sentences))
    out = [BOS]
    for k in order:
        out.extend(sentences[int(k)])
    out.append(EOS)
    return out


class ImageAugmentStrengths:
    """Knobs of the image view augmentation; zero() gives the identity."""

    def __init__(self, crop_frac=0.25, blur_max=0.5, gain_jitter=0.1,
                 offset_std=0.1, max_shift=1):
        self.crop_frac = crop_frac
        self.blur_max = blur_max
        self.gain_jitter = gain_jitter
        self.offset_std = offset_std
        self.max_shift = max_shift

    @classmethod
    def zero(cls):
        return cls(crop_frac=0.0, blur_max=0.0, gain_jitter=0.0, offset_std=0.0, max_shift=0)


def image_view(grid: np.ndarray, rng: np.random.Generator,
               strengths: ImageAugmentStrengths | None = None):
    """Image view: border crop (as a keep mask), neighborhood smoothing,
    global gain/offset, and a small positional jitter of the patch grid.

    Returns (augmented grid, keep mask over patches).
    """
    strengths = strengths or ImageAugmentStrengths()
    n_p, d_raw = grid.shape
    side = int(round(n_p ** 0.5))
    if side * side != n_p:
        raise InputError("image view augmentation expects a square patch grid")
    g = grid.reshape(side, side, d_raw).astype(np.float64, copy=True)

    # positional jitter: shift the grid by up to max_shift in each axis
    if strengths.max_shift > 0:
        dx = int(rng.integers(-strengths.max_shift, strengths.max_shift + 1))
        dy = int(rng.integers(-strengths.max_shift, strengths.max_shift + 1))
        g = np.roll(g, (dx, dy), axis=(0, 1))

    # smoothing: blend each patch with its 4-neighborhood mean
    if strengths.blur_max > 0:
        beta = float(rng.uniform(0.0, strengths.blur_max))
        neigh = (
            np.roll(g, 1, axis=0) + np.roll(g, -1, axis=0)
            + np.roll(g, 1, axis=1) + np.roll(g, -1, axis=1)
        ) / 4.0
        g = (1.0 - beta) * g + beta * neigh

    # contrast analogue: global gain and offset
    if strengths.gain_jitter > 0:
        gain = float(rng.uniform(1.0 - strengths.gain_jitter, 1.0 + strengths.gain_jitter))
        g = g * gain
    if strengths.offset_std > 0:
        g = g + float(rng.normal(0.0, strengths.offset_std))

    # crop analogue: drop a random number of border patches via the mask
    keep = np.ones(n_p, dtype=bool)
    if strengths.crop_frac > 0:
        border = [
            r * side + c
            for r in range(side)
            for c in range(side)
            if r in (0, side - 1) or c in (0, side - 1)
        ]
        max_drop = min(len(border), int(strengths.crop_frac * n_p))
        n_drop = int(rng.integers(0, max_drop + 1))
        if n_drop > 0:
            dropped = rng.choice(border, size=n_drop, replace=False)
            keep[dropped] = False

    return g.reshape(n_p, d_raw), keep


class ClassifierHead(nn.Module):
    """Two affine maps with a ReLU between them; sigmoid output per class."""

    def __init__(self, d: int, hidden: int, n_classes: int = NUM_CLASSES):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(z))))


def classification_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Multi-label cross-entropy: sum over classes, mean over samples."""
    if x.shape != y.shape:
        raise InputError("predictions and labels are misaligned")
    xc = x.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS)
    yf = y.to(xc.dtype)
    per_sample = -(yf * torch.log(xc) + (1.0 - yf) * torch.log(1.0 - xc)).sum(dim=-1)
    return per_sample.mean()
