"""Evaluation: n-gram metrics, clinical-efficacy scores through the exact
labeler, embedding-alignment diagnostics, attention-map export, and the
ablation harness."""

import csv
import dataclasses
import json
import math
import os
from collections import Counter

import numpy as np
import torch

from .config import NUM_CLASSES, TrainConfig, derive_seed
from .errors import ConfigError, InputError
from .synth import (
    BOS,
    EOS,
    PAD,
    UnpairedCorpus,
    extract_labels_from_report,
)

ABLATION_VARIANTS = {
    "full": {},
    "no_global": {"decoder_inputs": "local"},
    "no_local": {"decoder_inputs": "global"},
    "no_contrastive": {"gamma2": 0.0},
    "no_classification": {"gamma3": 0.0},
    "no_memory": {"use_memory": False},
    "aug_none": {"aug_mode": "none"},
    "aug_dropout": {"aug_mode": "dropout"},
    "aug_noise": {"aug_mode": "noise"},
}


def strip_sentinels(tokens) -> list:
    return [t for t in tokens if t not in (BOS, EOS, PAD)]


def _ngrams(seq, n):
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(candidates, references, n: int = 4) -> float:
    """Corpus-level BLEU-n: geometric mean of modified n-gram precisions with
    a brevity penalty. Any zero order precision yields 0 (no smoothing)."""
    if not candidates or len(candidates) != len(references):
        raise InputError("need equally many candidates and references")
    cands = [strip_sentinels(c) for c in candidates]
    refs = [strip_sentinels(r) for r in references]
    log_sum = 0.0
    for order in range(1, n + 1):
        matched, total = 0, 0
        for c, r in zip(cands, refs):
            c_counts = _ngrams(c, order)
            r_counts = _ngrams(r, order)
            matched += sum(min(cnt, r_counts[g]) for g, cnt in c_counts.items())
            total += max(len(c) - order + 1, 0)
        if total == 0 or matched == 0:
            return 0.0
        log_sum += math.log(matched / total)
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    if c_len == 0:
        return 0.0
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_sum / n)


def _lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidates, references) -> float:
    """Mean per-pair LCS F-measure (balanced harmonic mean)."""
    if not candidates or len(candidates) != len(references):
        raise InputError("need equally many candidates and references")
    scores = []
    for c, r in zip(candidates, references):
        c, r = strip_sentinels(c), strip_sentinels(r)
        lcs = _lcs_length(c, r)
        if lcs == 0:
            scores.append(0.0)
            continue
        p, q = lcs / len(c), lcs / len(r)
        scores.append(2 * p * q / (p + q))
    return sum(scores) / len(scores)


def clinical_efficacy(generated_reports, gt_labels) -> dict:
    """Label-level precision/recall/F1 of generated reports vs ground truth.

    Labels are read off each report by the exact labeler; both micro and
    macro averages are reported along with the raw per-class counts. Macro
    averages run over the classes that occur at all (predicted or true).
    """
    preds = [extract_labels_from_report(r) for r in generated_reports]
    tp = [0] * NUM_CLASSES
    fp = [0] * NUM_CLASSES
    fn = [0] * NUM_CLASSES
    for p, y in zip(preds, gt_labels):
        for c in range(NUM_CLASSES):
            if p[c] and y[c]:
                tp[c] += 1
            elif p[c] and not y[c]:
                fp[c] += 1
            elif y[c] and not p[c]:
                fn[c] += 1

    def prf(t, f_p, f_n):
        prec = t / (t + f_p) if t + f_p else 0.0
        rec = t / (t + f_n) if t + f_n else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        return prec, rec, f1

    # classes that never occur (no hits either way) are left out of the macro
    # average so that a perfect prediction set scores exactly 1.0
    active = [c for c in range(NUM_CLASSES) if tp[c] + fp[c] + fn[c] > 0]
    per_class = {c: prf(tp[c], fp[c], fn[c]) for c in active}
    micro = prf(sum(tp), sum(fp), sum(fn))
    if active:
        macro = tuple(sum(per_class[c][k] for c in active) / len(active) for k in range(3))
    else:
        macro = (0.0, 0.0, 0.0)
    return {
        "ce_micro_precision": micro[0],
        "ce_micro_recall": micro[1],
        "ce_micro_f1": micro[2],
        "ce_macro_precision": macro[0],
        "ce_macro_recall": macro[1],
        "ce_macro_f1": macro[2],
        "per_class_counts": {"tp": tp, "fp": fp, "fn": fn},
    }


def _labels_share(a, b) -> bool:
    return any(x and y for x, y in zip(a, b))


@torch.no_grad()
def alignment_gap(model, report_tokens, report_labels, image_grids, image_labels,
                  n_pairs: int = 1000, seed: int = 0) -> float:
    """Mean cross-modal cosine between label-sharing pairs minus the mean over
    label-disjoint pairs."""
    from .trainer import collate_tokens

    model.eval()
    rng = np.random.default_rng(seed)
    _, rep_g, _, _ = model.encode_report(collate_tokens(report_tokens))
    _, img_g, _, _ = model.encode_image(torch.from_numpy(np.asarray(image_grids)).float())
    rep_g = torch.nn.functional.normalize(rep_g, dim=-1)
    img_g = torch.nn.functional.normalize(img_g, dim=-1)
    share, disjoint = [], []
    for _ in range(n_pairs):
        i = int(rng.integers(len(report_tokens)))
        j = int(rng.integers(len(image_grids)))
        cos = float(rep_g[i] @ img_g[j])
        if _labels_share(report_labels[i], image_labels[j]):
            share.append(cos)
        else:
            disjoint.append(cos)
    if not share or not disjoint:
        raise InputError("sampled pairs do not cover both label-sharing and disjoint cases")
    return float(np.mean(share) - np.mean(disjoint))


@torch.no_grad()
def export_attention_maps(model, grid, out_dir: str | None = None, max_len: int | None = None):
    """Cross-attention mass over patch positions for every generated token.

    Uses the final decoder block, averaged over heads; the global position is
    excluded so each map sums to at most one. Optionally writes a JSON record
    and one grayscale PNG per token.
    """
    from .synth import ID_TO_WORD
    from .trainer import infer_report

    model.eval()
    if isinstance(grid, np.ndarray):
        grid_t = torch.from_numpy(np.ascontiguousarray(grid)).float()
    else:
        grid_t = grid.float()
    tokens = infer_report(grid_t, model)
    z_local, z_global, _, mask = model.encode_image(grid_t.unsqueeze(0))
    memory, memory_mask = model.decoder_memory(z_global, z_local, mask)
    _, cross = model.decoder(
        torch.as_tensor(tokens[:-1], dtype=torch.long).unsqueeze(0),
        memory, memory_mask, return_cross_attn=True,
    )
    weights = cross.mean(dim=1)[0]  # (T, memory positions), head-averaged
    has_global = model.cfg.decoder_inputs == "global+local"
    patch_attn = weights[:, 1:] if has_global else weights
    if model.cfg.decoder_inputs == "global":
        patch_attn = weights[:, :0]  # no patch positions to report
    maps = []
    generated = tokens[1:]  # every produced token, EOS included
    for t, tok in enumerate(generated):
        maps.append({
            "token": tok,
            "word": ID_TO_WORD.get(tok, f"<{tok}>"),
            "attention": [float(v) for v in patch_attn[t]],
        })
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "attention.json"), "w") as fh:
            json.dump({"tokens": tokens, "maps": maps}, fh, sort_keys=True)
        _write_map_images(maps, out_dir)
    return tokens, maps


def _write_map_images(maps, out_dir, upscale: int = 16):
    from PIL import Image

    for t, rec in enumerate(maps):
        values = np.asarray(rec["attention"], dtype=np.float64)
        if values.size == 0:
            continue
        side = int(round(values.size ** 0.5))
        img = values.reshape(side, side)
        peak = img.max()
        if peak > 0:
            img = img / peak
        img8 = (img * 255).astype(np.uint8)
        img8 = np.kron(img8, np.ones((upscale, upscale), dtype=np.uint8))
        Image.fromarray(img8, mode="L").save(
            os.path.join(out_dir, f"map_{t:03d}_{rec['word']}.png")
        )


@torch.no_grad()
def evaluate_model(model, corpus: UnpairedCorpus, gap_pairs: int = 1000,
                   gap_seed: int = 0, batch_size: int = 64) -> dict:
    """Generate reports for the held-out images and score them."""
    from .trainer import collate_tokens  # noqa: F401  (shared collation helper)

    model.eval()
    generated = []
    grids = corpus.eval_grids
    for start in range(0, len(grids), batch_size):
        chunk = torch.from_numpy(grids[start : start + batch_size]).float()
        generated.extend(model.generate_from_images(chunk))
    record = {
        "bleu1": bleu(generated, corpus.eval_tokens, n=1),
        "bleu4": bleu(generated, corpus.eval_tokens, n=4),
        "rougeL": rouge_l(generated, corpus.eval_tokens),
    }
    record.update(clinical_efficacy(generated, corpus.eval_labels))
    record["alignment_gap"] = alignment_gap(
        model,
        corpus.eval_tokens,
        corpus.eval_labels,
        corpus.eval_grids,
        corpus.eval_labels,
        n_pairs=gap_pairs,
        seed=gap_seed,
    )
    return record


@torch.no_grad()
def memory_usage_histogram(model, corpus: UnpairedCorpus, batch_size: int = 64) -> np.ndarray:
    """How often each memory slot is selected over the held-out images."""
    model.eval()
    counts = np.zeros(model.memory.slots.shape[0], dtype=np.int64)
    for start in range(0, len(corpus.eval_grids), batch_size):
        chunk = torch.from_numpy(corpus.eval_grids[start : start + batch_size]).float()
        feats, _ = model.image_features(chunk)
        _, idx, _ = model.memory.respond(feats, return_selected=True)
        flat = idx.reshape(-1).numpy()
        np.add.at(counts, flat, 1)
    return counts


def apply_variant(cfg: TrainConfig, name: str) -> TrainConfig:
    """One configuration switch per ablation variant."""
    if name not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {name!r}")
    data = dataclasses.asdict(cfg)
    data.update(ABLATION_VARIANTS[name])
    from .config import config_from_dict

    return config_from_dict(data, "train")


def run_ablation(variant_names, base_cfg: TrainConfig, corpus: UnpairedCorpus,
                 seeds, out_dir: str | None = None, progress=None) -> list:
    """Train and evaluate each variant over the given seeds.

    Returns a list of {variant, seed, metrics...} rows and, when out_dir is
    given, writes ablation.csv plus a formatted text table of mean +/- std.
    """
    from .trainer import Trainer

    if len(seeds) < 1:
        raise ConfigError("at least one seed is required")
    rows = []
    for name in variant_names:
        variant_cfg = apply_variant(base_cfg, name)
        for seed in seeds:
            cfg = dataclasses.replace(variant_cfg, seed=seed)
            trainer = Trainer(cfg, corpus)
            trainer.train()
            metrics = evaluate_model(trainer.model, corpus,
                                     gap_seed=derive_seed(seed, "gap"))
            row = {"variant": name, "seed": seed}
            row.update({k: v for k, v in metrics.items() if not isinstance(v, dict)})
            rows.append(row)
            if progress is not None:
                progress(row)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_ablation_outputs(rows, out_dir)
    return rows


def summarize_ablation(rows, metrics=("bleu1", "bleu4", "rougeL", "ce_macro_f1")) -> dict:
    """Per-variant mean and std of the chosen metrics."""
    summary = {}
    for row in rows:
        summary.setdefault(row["variant"], []).append(row)
    out = {}
    for name, group in summary.items():
        stats = {}
        for m in metrics:
            vals = np.asarray([r[m] for r in group], dtype=np.float64)
            stats[m] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0))}
        out[name] = stats
    return out


def write_ablation_outputs(rows, out_dir,
                           metrics=("bleu1", "bleu4", "rougeL", "ce_macro_f1")):
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    summary = summarize_ablation(rows, metrics)
    lines = [" | ".join(["variant".ljust(18)] + [m.ljust(16) for m in metrics])]
    lines.append("-" * len(lines[0]))
    for name, stats in summary.items():
        cells = [name.ljust(18)]
        for m in metrics:
            cells.append(f"{stats[m]['mean']:.3f} +/- {stats[m]['std']:.3f}".ljust(16))
        lines.append(" | ".join(cells))
    table = "\n".join(lines) + "\n"
    with open(os.path.join(out_dir, "ablation.txt"), "w") as fh:
        fh.write(table)
    return table
