"""Training: composite objective, unpaired batch assembly, optimization loop,
optional few-shot paired mode, checkpointing, and the image-to-report
inference path."""

import json
import os

import numpy as np
import torch

from . import alignment
from .config import TrainConfig, config_from_dict, config_to_dict, derive_seed
from .decoder import AugmentationConfig, augment_locals, language_loss
from .errors import ConfigError, InputError, TrainingError
from .model import ReportGenModel, build_model
from .synth import PAD, UnpairedCorpus


def total_loss(l_lang, l_contrast, l_class, cfg: TrainConfig, context: str = ""):
    """Weighted sum of the three objectives; non-finite components abort."""
    parts = {"l_lang": l_lang, "l_contrast": l_contrast, "l_class": l_class}
    for name, value in parts.items():
        if value is not None and not bool(torch.isfinite(torch.as_tensor(value))):
            raise TrainingError(f"non-finite {name} ({value}) {context}".strip())
    total = 0.0
    if l_lang is not None:
        total = total + cfg.gamma1 * l_lang
    if l_contrast is not None:
        total = total + cfg.gamma2 * l_contrast
    if l_class is not None:
        total = total + cfg.gamma3 * l_class
    return total


def collate_tokens(seqs: list, device=None) -> torch.Tensor:
    """Pad token lists to a (B, L) long tensor."""
    if not seqs:
        raise InputError("empty token batch")
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), PAD, dtype=torch.long, device=device)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


class Trainer:
    def __init__(self, cfg: TrainConfig, corpus: UnpairedCorpus, corpus_digest: str = ""):
        cfg.validate()
        self.cfg = cfg
        self.corpus = corpus
        self.corpus_digest = corpus_digest
        torch.manual_seed(derive_seed(cfg.seed, "model"))
        self.model = build_model(cfg, corpus.manifest)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.lr)
        self.rng = np.random.default_rng(derive_seed(cfg.seed, "batches"))
        self.torch_rng = torch.Generator()
        self.torch_rng.manual_seed(derive_seed(cfg.seed, "augment"))
        self.step_count = 0
        self.aug_cfg = AugmentationConfig(mode=cfg.aug_mode, p=cfg.aug_p, sigma=cfg.aug_sigma)
        self._paired_idx = self._select_paired_pool()

    def _select_paired_pool(self):
        if self.cfg.paired_fraction <= 0:
            return None
        k = round(self.cfg.paired_fraction * len(self.corpus.report_tokens))
        if k == 0:
            raise ConfigError("paired mode enabled but the fraction selects zero pairs")
        if k > len(self.corpus.pair_tokens):
            raise ConfigError(
                f"paired pool has {len(self.corpus.pair_tokens)} pairs, need {k}"
            )
        pick = self.rng.choice(len(self.corpus.pair_tokens), size=k, replace=False)
        return np.sort(pick)

    # -- batch assembly -----------------------------------------------------

    def _report_batch(self, idx):
        originals = [self.corpus.report_tokens[i] for i in idx]
        views = []
        for toks in originals:
            views.append(alignment.shuffle_sentences(toks, self.rng))
            views.append(alignment.shuffle_sentences(toks, self.rng))
        labels = torch.as_tensor([self.corpus.report_labels[i] for i in idx], dtype=torch.float32)
        return originals, views, labels

    def _image_batch(self, idx):
        originals = self.corpus.image_grids[idx]
        view_grids, view_masks = [], []
        for g in originals:
            for _ in range(2):
                vg, keep = alignment.image_view(g.astype(np.float64), self.rng)
                view_grids.append(vg)
                view_masks.append(keep)
        labels = torch.as_tensor([self.corpus.image_labels[i] for i in idx], dtype=torch.float32)
        return originals, view_grids, view_masks, labels

    # -- one optimization step ----------------------------------------------

    def train_step(self, report_idx, image_idx) -> dict:
        if len(report_idx) == 0 or len(image_idx) == 0:
            raise InputError("both modality streams must be non-empty")
        cfg = self.cfg
        model = self.model
        model.train()
        need_views = cfg.gamma2 > 0 or (cfg.gamma3 > 0 and cfg.classify_views)
        need_images = cfg.gamma2 > 0 or cfg.gamma3 > 0

        rep_orig, rep_views, rep_labels = self._report_batch(report_idx)
        rep_tokens = collate_tokens(rep_orig + (rep_views if need_views else []))
        z_local, z_global, _, mask = model.encode_report(rep_tokens)
        n = len(report_idx)

        # auto-encoding language loss on the original reports
        aug_local, aug_mask = augment_locals(
            z_local[:n], mask[:n], self.aug_cfg, self.torch_rng
        )
        memory, memory_mask = model.decoder_memory(z_global[:n], aug_local, aug_mask)
        logits = model.decoder(rep_tokens[:n, :-1], memory, memory_mask)
        l_lang = language_loss(logits, rep_tokens[:n, 1:])

        l_contrast = None
        l_class = None
        if need_images:
            img_orig, img_view_grids, img_view_masks, img_labels = self._image_batch(image_idx)
            img_all = np.concatenate(
                [img_orig, np.stack(img_view_grids)] if need_views else [img_orig]
            )
            keep = None
            if need_views:
                full = np.ones((len(img_orig), img_orig.shape[1]), dtype=bool)
                keep = torch.from_numpy(np.concatenate([full, np.stack(img_view_masks)]))
            _, img_global, _, _ = model.encode_image(
                torch.from_numpy(img_all).float(), keep
            )
            m = len(image_idx)

            if cfg.gamma2 > 0:
                # two views per sample from each modality
                view_z = torch.cat([z_global[n:], img_global[m:]], dim=0)
                view_labels = torch.cat(
                    [rep_labels.repeat_interleave(2, dim=0),
                     img_labels.repeat_interleave(2, dim=0)], dim=0,
                )
                origins = torch.arange(n + m).repeat_interleave(2)
                l_contrast = alignment.contrastive_loss(view_z, view_labels, origins, cfg.tau)

            if cfg.gamma3 > 0:
                cls_z = torch.cat([z_global[:n], img_global[:m]], dim=0)
                cls_labels = torch.cat([rep_labels, img_labels], dim=0)
                if cfg.classify_views:
                    cls_z = torch.cat([cls_z, z_global[n:], img_global[m:]], dim=0)
                    cls_labels = torch.cat(
                        [cls_labels, rep_labels.repeat_interleave(2, dim=0),
                         img_labels.repeat_interleave(2, dim=0)], dim=0,
                    )
                l_class = alignment.classification_loss(model.classifier(cls_z), cls_labels)

        l_paired = None
        if self._paired_idx is not None:
            l_paired = self._paired_language_loss()

        total = total_loss(l_lang, l_contrast, l_class, cfg,
                           context=f"at step {self.step_count}")
        if l_paired is not None:
            total = total + cfg.gamma1 * l_paired

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.step_count += 1

        metrics = {
            "step": self.step_count,
            "l_lang": l_lang.detach().item(),
            "l_contrast": l_contrast.detach().item() if l_contrast is not None else 0.0,
            "l_class": l_class.detach().item() if l_class is not None else 0.0,
            "total": total.detach().item(),
        }
        if l_paired is not None:
            metrics["l_paired"] = l_paired.detach().item()
        return metrics

    def _paired_language_loss(self):
        """Few-shot term: decode the true paired report from the image side."""
        k = min(self.cfg.batch_n, len(self._paired_idx))
        pick = self.rng.choice(self._paired_idx, size=k, replace=False)
        tokens = collate_tokens([self.corpus.pair_tokens[i] for i in pick])
        grids = torch.from_numpy(self.corpus.pair_grids[pick]).float()
        z_local, z_global, _, mask = self.model.encode_image(grids)
        memory, memory_mask = self.model.decoder_memory(z_global, z_local, mask)
        logits = self.model.decoder(tokens[:, :-1], memory, memory_mask)
        return language_loss(logits, tokens[:, 1:])

    # -- full loop ------------------------------------------------------------

    def train(self, out_dir: str | None = None, log_every: int = 1) -> list:
        cfg = self.cfg
        n_r = len(self.corpus.report_tokens)
        n_i = len(self.corpus.image_grids)
        steps_per_epoch = min(n_r, n_i) // cfg.batch_n
        if steps_per_epoch == 0:
            raise InputError("corpus smaller than one batch")
        history = []
        writer = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            writer = open(os.path.join(out_dir, "metrics.jsonl"), "w")
        try:
            for _ in range(cfg.epochs):
                rep_perm = self.rng.permutation(n_r)
                img_perm = self.rng.permutation(n_i)
                for s in range(steps_per_epoch):
                    rep_idx = rep_perm[s * cfg.batch_n : (s + 1) * cfg.batch_n]
                    img_idx = img_perm[s * cfg.batch_n : (s + 1) * cfg.batch_n]
                    metrics = self.train_step(rep_idx, img_idx)
                    history.append(metrics)
                    if writer is not None and metrics["step"] % log_every == 0:
                        writer.write(json.dumps(metrics, sort_keys=True) + "\n")
                    if (
                        out_dir is not None
                        and cfg.checkpoint_every > 0
                        and metrics["step"] % cfg.checkpoint_every == 0
                    ):
                        self.save_checkpoint(
                            os.path.join(out_dir, f"checkpoint_{metrics['step']}.pt")
                        )
            if out_dir is not None:
                self.save_checkpoint(os.path.join(out_dir, "checkpoint.pt"))
        finally:
            if writer is not None:
                writer.close()
        return history

    # -- persistence ----------------------------------------------------------

    def save_checkpoint(self, path: str):
        save_checkpoint(path, self.model, self.cfg, self.optimizer,
                        self.step_count, self.corpus_digest)


def save_checkpoint(path, model: ReportGenModel, cfg: TrainConfig, optimizer=None,
                    step: int = 0, corpus_digest: str = ""):
    payload = {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "config": config_to_dict(cfg),
        "step": step,
        "corpus_hash": corpus_digest,
        "dims": {
            "vocab_size": model.vocab_size,
            "max_len": model.max_len,
            "n_patches": model.image_features.pos.shape[0],
            "patch_dim": model.image_features.patch_dim,
        },
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, cfg, payload)."""
    payload = torch.load(path, weights_only=False)
    cfg = config_from_dict(payload["config"], "train")
    dims = payload["dims"]
    model = ReportGenModel(cfg, dims["vocab_size"], dims["max_len"],
                           dims["n_patches"], dims["patch_dim"])
    model.load_state_dict(payload["model"])
    model.eval()
    return model, cfg, payload


def infer_report(grid, model: ReportGenModel) -> list:
    """Generate one report token sequence for one patch grid."""
    if isinstance(grid, np.ndarray):
        grid = torch.from_numpy(np.ascontiguousarray(grid)).float()
    return model.generate_from_images(grid.unsqueeze(0))[0]
