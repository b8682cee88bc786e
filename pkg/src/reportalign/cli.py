"""Command-line entry point: synth / train / eval / ablate / infer.

Every command resolves its configuration, writes an experiment manifest
(experiment.json) into the output directory before doing any work, and
finishes by recording the produced artifact paths. The name manifest.json is
reserved for the corpus format. Exit codes: 0 success, 1 domain error,
2 usage error.
"""

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from .config import (
    SynthConfig,
    TrainConfig,
    config_from_dict,
    config_to_dict,
    derive_seed,
    load_config,
)
from .errors import ConfigError, InputError, TrainingError

BASE_SEED_ENV = "REPORTALIGN_BASE_SEED"


def _resolve_seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(BASE_SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{BASE_SEED_ENV} must be an integer") from exc
    return None


def _write_manifest(out_dir, command, args, cfg_dict, corpus_digest=None, outputs=None):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(args),
        "config": cfg_dict,
        "corpus_hash": corpus_digest,
        "code_version": __version__,
        "started": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "outputs": outputs or [],
    }
    path = os.path.join(out_dir, "experiment.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _finish_manifest(out_dir, manifest, outputs):
    manifest["outputs"] = sorted(outputs)
    manifest["finished"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    with open(os.path.join(out_dir, "experiment.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _load_cfg(path, kind, seed):
    if path is None:
        cfg = {"synth": SynthConfig, "train": TrainConfig}[kind]()
        cfg.validate()
    else:
        cfg = load_config(path, kind)
    if seed is not None:
        cfg.seed = seed
    return cfg


def cmd_synth(args, argv) -> int:
    from . import synth

    cfg = _load_cfg(args.config, "synth", _resolve_seed(args))
    manifest = _write_manifest(args.out, "synth", argv, config_to_dict(cfg))
    synth.build_corpus(cfg, args.out)
    digest = synth.corpus_hash(args.out)
    manifest["corpus_hash"] = digest
    _finish_manifest(args.out, manifest, [
        os.path.join(args.out, name)
        for name in ("manifest.json", "reports.jsonl", "images.bin", "images.json",
                      "eval.jsonl", "eval_images.bin", "pairs.jsonl", "pairs_images.bin")
    ])
    print(f"corpus written to {args.out} (hash {digest[:12]})")
    return 0


def cmd_train(args, argv) -> int:
    from . import synth
    from .trainer import Trainer

    cfg = _load_cfg(args.config, "train", _resolve_seed(args))
    digest = synth.corpus_hash(args.corpus)
    manifest = _write_manifest(args.out, "train", argv, config_to_dict(cfg), digest)
    corpus = synth.load_corpus(args.corpus)
    trainer = Trainer(cfg, corpus, digest)
    trainer.train(out_dir=args.out)
    _finish_manifest(args.out, manifest, [
        os.path.join(args.out, "metrics.jsonl"),
        os.path.join(args.out, "checkpoint.pt"),
    ])
    print(f"trained {trainer.step_count} steps; checkpoint at {args.out}/checkpoint.pt")
    return 0


def cmd_eval(args, argv) -> int:
    from . import evalkit, synth
    from .trainer import load_checkpoint

    model, cfg, payload = load_checkpoint(args.checkpoint)
    digest = synth.corpus_hash(args.corpus)
    manifest = _write_manifest(args.out, "eval", argv, config_to_dict(cfg), digest)
    corpus = synth.load_corpus(args.corpus)
    record = evalkit.evaluate_model(model, corpus, gap_seed=derive_seed(cfg.seed, "gap"))
    outputs = []
    metrics_path = os.path.join(args.out, "metrics.json")
    with open(metrics_path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    outputs.append(metrics_path)
    csv_path = os.path.join(args.out, "metrics.csv")
    scalar = {k: v for k, v in record.items() if not isinstance(v, dict)}
    with open(csv_path, "w") as fh:
        fh.write(",".join(scalar.keys()) + "\n")
        fh.write(",".join(f"{v:.6f}" for v in scalar.values()) + "\n")
    outputs.append(csv_path)
    if args.dump_memory:
        counts = evalkit.memory_usage_histogram(model, corpus)
        hist_path = os.path.join(args.out, "memory_usage.csv")
        with open(hist_path, "w") as fh:
            fh.write("slot,selections\n")
            for i, c in enumerate(counts):
                fh.write(f"{i},{int(c)}\n")
        outputs.append(hist_path)
    _finish_manifest(args.out, manifest, outputs)
    print(json.dumps(scalar, indent=2, sort_keys=True))
    return 0


SUITES = {
    "components": ["full", "no_global", "no_local", "no_contrastive",
                   "no_classification", "no_memory"],
    "augmentation": ["aug_none", "aug_dropout", "aug_noise"],
}


def cmd_ablate(args, argv) -> int:
    from . import evalkit, synth

    base = _load_cfg(args.config, "train", _resolve_seed(args))
    digest = synth.corpus_hash(args.corpus)
    manifest = _write_manifest(args.out, "ablate", argv, config_to_dict(base), digest)
    corpus = synth.load_corpus(args.corpus)
    seeds = [derive_seed(base.seed, f"ablation-{k}") % 10_000 for k in range(args.seeds)]

    def progress(row):
        print(f"{row['variant']} seed={row['seed']}: "
              f"bleu1={row['bleu1']:.3f} ce_macro_f1={row['ce_macro_f1']:.3f}")

    rows = evalkit.run_ablation(SUITES[args.suite], base, corpus, seeds,
                                out_dir=args.out, progress=progress)
    table = evalkit.write_ablation_outputs(rows, args.out)
    print(table)
    _finish_manifest(args.out, manifest, [
        os.path.join(args.out, "ablation.csv"),
        os.path.join(args.out, "ablation.txt"),
    ])
    return 0


def cmd_infer(args, argv) -> int:
    from . import evalkit, synth
    from .trainer import load_checkpoint

    model, cfg, payload = load_checkpoint(args.checkpoint)
    try:
        index = int(args.image)
    except ValueError:
        index = None
    if index is not None:
        if args.corpus is None:
            raise ConfigError("an image index requires --corpus")
        corpus = synth.load_corpus(args.corpus)
        if not (0 <= index < len(corpus.eval_grids)):
            raise InputError(f"image index out of range (0..{len(corpus.eval_grids) - 1})")
        grid = corpus.eval_grids[index]
    else:
        grid = np.load(args.image)
        if grid.ndim != 2:
            raise InputError("image file must hold one 2-D patch grid")

    out_dir = args.out or "."
    manifest = _write_manifest(out_dir, "infer", argv, config_to_dict(cfg))
    tokens, maps = evalkit.export_attention_maps(model, grid, out_dir=None)
    text = synth.tokens_to_text(tokens)
    record_path = os.path.join(out_dir, "report.json")
    with open(record_path, "w") as fh:
        json.dump({"tokens": tokens, "text": text, "attention": maps}, fh, sort_keys=True)
    _finish_manifest(out_dir, manifest, [record_path])
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reportalign",
        description="unpaired image-to-report generation on a synthetic benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic unpaired corpus")
    p.add_argument("--config", help="JSON overrides for the generator")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on an unpaired corpus")
    p.add_argument("--config", help="JSON overrides for training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-memory", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare configuration variants")
    p.add_argument("--suite", choices=sorted(SUITES), required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--config", help="JSON overrides for the base configuration")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("infer", help="generate one report from one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="eval-image index or .npy path")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    import torch

    torch.set_num_threads(1)  # tiny kernels: thread fan-out costs more than it buys
    try:
        return args.func(args, argv)
    except (ConfigError, InputError, TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
