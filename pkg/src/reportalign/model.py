"""The assembled network: feature extractors, shared memory, modality and
shared encoders, attention pooling, decoder and classifier, wired per config.
A single parameter set serves both modalities everywhere past the extractors.
"""

import torch
import torch.nn as nn

from .alignment import ClassifierHead
from .config import NUM_CLASSES, TrainConfig
from .decoder import ReportDecoder, build_decoder_memory
from .encoder import GlobalAggregator, ImageFeatures, ReportFeatures, StackedEncoder
from .memory import SharedMemory


class ReportGenModel(nn.Module):
    def __init__(self, cfg: TrainConfig, vocab_size: int, max_len: int,
                 n_patches: int, patch_dim: int):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.report_features = ReportFeatures(vocab_size, cfg.d, max_len)
        self.image_features = ImageFeatures(patch_dim, cfg.d, n_patches)
        self.memory = SharedMemory(cfg.mem_slots, cfg.mem_dim, cfg.d, cfg.mem_topk)
        self.report_encoder = StackedEncoder(cfg.d, cfg.heads, cfg.ffn_dim, cfg.modality_layers)
        self.image_encoder = StackedEncoder(cfg.d, cfg.heads, cfg.ffn_dim, cfg.modality_layers)
        self.shared_encoder = StackedEncoder(cfg.d, cfg.heads, cfg.ffn_dim, cfg.shared_layers)
        self.aggregator = GlobalAggregator(cfg.d)
        self.decoder = ReportDecoder(vocab_size, cfg.d, cfg.heads, cfg.ffn_dim,
                                     cfg.decoder_layers, max_len)
        self.classifier = ClassifierHead(cfg.d, cfg.classifier_hidden, NUM_CLASSES)

    def _shared_path(self, feats, mask, modality_encoder):
        if self.cfg.use_memory and self.cfg.memory_apply == "local":
            feats = self.memory.enrich(feats)
        h = modality_encoder(feats, mask)
        z_local = self.shared_encoder(h, mask)
        z_global, attn = self.aggregator(z_local, mask)
        if self.cfg.use_memory and self.cfg.memory_apply == "global":
            z_global = self.memory.enrich(z_global)
        return z_local, z_global, attn, mask

    def encode_report(self, tokens: torch.Tensor):
        """tokens: (B, L) -> locals (B, L, d), global (B, d), attention, mask."""
        feats, mask = self.report_features(tokens)
        return self._shared_path(feats, mask, self.report_encoder)

    def encode_image(self, grids: torch.Tensor, keep_mask: torch.Tensor | None = None):
        feats, mask = self.image_features(grids, keep_mask)
        return self._shared_path(feats, mask, self.image_encoder)

    def decoder_memory(self, z_global, z_local, mask):
        return build_decoder_memory(z_global, z_local, mask, self.cfg.decoder_inputs)

    @torch.no_grad()
    def generate_from_images(self, grids: torch.Tensor, max_len: int | None = None):
        """Inference path: image representations in, greedy token lists out."""
        z_local, z_global, _, mask = self.encode_image(grids)
        memory, memory_mask = self.decoder_memory(z_global, z_local, mask)
        return self.decoder.generate(memory, memory_mask, max_len)


def build_model(cfg: TrainConfig, manifest: dict) -> ReportGenModel:
    return ReportGenModel(
        cfg,
        vocab_size=manifest["vocab_size"],
        max_len=manifest["max_len"],
        n_patches=manifest["n_patches"],
        patch_dim=manifest["patch_dim"],
    )
