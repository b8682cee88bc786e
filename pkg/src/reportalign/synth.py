"""Synthetic unpaired corpus: label-driven report grammar, patch-grid images,
and the exact rule-based labeler that closes the loop.

The grammar is built from single-word atoms so that n-gram metrics are exact
and label extraction is a one-token-window rule. Every generator is a pure
function of (inputs, per-sample seed); corpus assembly discards the pairing
between the report and image streams.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .config import NUM_CLASSES, SynthConfig, derive_seed
from .errors import ConfigError, InputError

BOS, EOS, PAD = 0, 1, 2

PATHOLOGIES = [
    "cardiomegaly",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "effusion",
    "opacity",
    "lesion",
    "fracture",
    "emphysema",
    "fibrosis",
    "devices",
]

SEVERITIES = ["mild", "moderate", "severe", "trace", "extensive", "minimal", "marked", "patchy"]

LOCATIONS = [
    "left",
    "right",
    "bilateral",
    "basal",
    "apical",
    "central",
    "peripheral",
    "upper",
    "lower",
    "diffuse",
    "medial",
    "lateral",
]

NORMAL_SENTENCES = [
    ["lungs", "clear", "."],
    ["heart", "normal", "."],
    ["chest", "unremarkable", "."],
    ["contours", "stable", "."],
]

_NORMAL_WORDS = sorted({w for s in NORMAL_SENTENCES for w in s if w != "."})

WORDS = [".", "no", "present"] + PATHOLOGIES + SEVERITIES + LOCATIONS + _NORMAL_WORDS
WORD_TO_ID = {w: i + 3 for i, w in enumerate(WORDS)}
ID_TO_WORD = {i: w for w, i in WORD_TO_ID.items()}

PERIOD = WORD_TO_ID["."]
NO = WORD_TO_ID["no"]
PRESENT = WORD_TO_ID["present"]
# pathology class c (1..13) <-> its name token
NAME_IDS = {c: WORD_TO_ID[PATHOLOGIES[c - 1]] for c in range(1, NUM_CLASSES)}
CLASS_OF_NAME = {tid: c for c, tid in NAME_IDS.items()}

# fixed per-class word pools for the detail slots of a presence sentence
SEVERITY_POOLS = {
    c: [SEVERITIES[(2 * c + j) % len(SEVERITIES)] for j in range(3)] for c in range(1, NUM_CLASSES)
}
LOCATION_POOLS = {
    c: [LOCATIONS[(3 * c + j) % len(LOCATIONS)] for j in range(4)] for c in range(1, NUM_CLASSES)
}


def n_vocab_words() -> int:
    """Number of token ids actually used (sentinels + grammar words)."""
    return 3 + len(WORDS)


def tokens_to_text(tokens) -> str:
    words = [ID_TO_WORD[t] for t in tokens if t in ID_TO_WORD]
    return " ".join(words)


def validate_label_vector(bits):
    bits = list(int(b) for b in bits)
    if len(bits) != NUM_CLASSES:
        raise InputError(f"label vector must have length {NUM_CLASSES}")
    if any(b not in (0, 1) for b in bits):
        raise InputError("label bits must be 0 or 1")
    if sum(bits) == 0:
        raise InputError("label vector must have at least one active class")
    if bits[0] == 1 and sum(bits[1:]) > 0:
        raise InputError("no-finding excludes all other classes")
    return bits


def validate_token_sequence(tokens, max_len: int = 64):
    tokens = list(int(t) for t in tokens)
    if len(tokens) < 2 or tokens[0] != BOS:
        raise InputError("token sequence must start with BOS")
    if EOS not in tokens:
        raise InputError("token sequence must contain EOS")
    end = tokens.index(EOS)
    if any(t != PAD for t in tokens[end + 1 :]):
        raise InputError("only PAD may follow EOS")
    if len(tokens) > max_len:
        raise InputError(f"token sequence exceeds max length {max_len}")
    return tokens


def sample_label_vector(prevalence, rng) -> list:
    """Independent Bernoulli draws for the pathology classes; all-zero draws
    collapse to the explicit no-finding class."""
    if len(prevalence) != NUM_CLASSES:
        raise ConfigError(f"prevalence must have length {NUM_CLASSES}")
    bits = [0] * NUM_CLASSES
    draws = rng.random(NUM_CLASSES - 1)
    for c in range(1, NUM_CLASSES):
        bits[c] = int(draws[c - 1] < prevalence[c])
    if sum(bits) == 0:
        bits[0] = 1
    return bits


def generate_report(labels, rng, max_len: int = 64, neg_rate: float = 0.25) -> list:
    """Emit a findings-style token sequence for a label vector.

    Active classes each yield "<name> <severity> <location> present ."; a
    random subset of inactive classes yields "no <name> ."; no-finding
    reports get one or two generic normal sentences. Sentence order is
    shuffled. If the full presence sentences cannot fit max_len (only
    possible when nearly all classes are active), the short form
    "<name> present ." is used for all of them; negations are kept only
    while they fit. Extraction round-trips exactly in every case.
    """
    labels = validate_label_vector(labels)
    active = [c for c in range(1, NUM_CLASSES) if labels[c] == 1]

    mandatory = []
    if labels[0] == 1:
        n_norm = int(rng.integers(1, 3))
        picks = rng.choice(len(NORMAL_SENTENCES), size=n_norm, replace=False)
        for k in picks:
            mandatory.append([WORD_TO_ID[w] for w in NORMAL_SENTENCES[int(k)]])

    full_form, short_form = [], []
    for c in active:
        sev = SEVERITY_POOLS[c][int(rng.integers(len(SEVERITY_POOLS[c])))]
        loc = LOCATION_POOLS[c][int(rng.integers(len(LOCATION_POOLS[c])))]
        full_form.append([NAME_IDS[c], WORD_TO_ID[sev], WORD_TO_ID[loc], PRESENT, PERIOD])
        short_form.append([NAME_IDS[c], PRESENT, PERIOD])

    negations = []
    inactive = [c for c in range(1, NUM_CLASSES) if labels[c] == 0]
    neg_draws = rng.random(len(inactive))
    for c, u in zip(inactive, neg_draws):
        if u < neg_rate:
            negations.append([NO, NAME_IDS[c], PERIOD])

    budget = max_len - 2  # BOS/EOS
    presence = full_form
    if sum(len(s) for s in mandatory + full_form) > budget:
        presence = short_form
    sentences = mandatory + presence
    used = sum(len(s) for s in sentences)
    for s in negations:
        if used + len(s) > budget:
            break
        sentences.append(s)
        used += len(s)

    order = rng.permutation(len(sentences))
    tokens = [BOS]
    for k in order:
        tokens.extend(sentences[int(k)])
    tokens.append(EOS)
    return tokens


def extract_labels_from_report(tokens) -> list:
    """Exact labeler: class c fires iff its name token appears without an
    immediately preceding negation token; no-finding fires iff nothing does.
    Unknown token ids are ignored."""
    bits = [0] * NUM_CLASSES
    toks = list(int(t) for t in tokens)
    for i, t in enumerate(toks):
        c = CLASS_OF_NAME.get(t)
        if c is None:
            continue
        if i >= 1 and toks[i - 1] == NO:
            continue
        bits[c] = 1
    if sum(bits) == 0:
        bits[0] = 1
    return bits


def class_patterns(pattern_seed: int, patch_dim: int, n_patches: int,
                   subset_size: int = 6, max_cos: float = 0.3):
    """Fixed per-class signatures: unit vectors with pairwise |cosine| below
    max_cos, plus a fixed patch subset per class. Drawn once from the
    dedicated pattern seed so every corpus with the same seed shares them."""
    rng = np.random.default_rng(pattern_seed)
    vecs = []
    attempts = 0
    while len(vecs) < NUM_CLASSES:
        attempts += 1
        if attempts > 100_000:
            raise ConfigError(
                "could not draw class patterns with the requested separation; "
                "increase patch_dim"
            )
        v = rng.standard_normal(patch_dim)
        v = v / np.linalg.norm(v)
        if all(abs(float(v @ u)) < max_cos for u in vecs):
            vecs.append(v)
    subsets = np.stack(
        [np.sort(rng.choice(n_patches, size=subset_size, replace=False)) for _ in range(NUM_CLASSES)]
    )
    return np.stack(vecs), subsets


def generate_image(labels, rng, patterns, subsets, n_patches: int, patch_dim: int,
                   amplitude: float = 3.0, noise_std: float = 1.0) -> np.ndarray:
    """Render a patch grid: Gaussian background plus each active class's
    signature added to its fixed patch subset, scaled by amplitude."""
    labels = validate_label_vector(labels)
    grid = rng.standard_normal((n_patches, patch_dim)) * noise_std
    for c in range(NUM_CLASSES):
        if labels[c] == 1:
            grid[subsets[c]] += amplitude * patterns[c]
    return grid


def _apply_label_noise(bits, rng, noise: float) -> list:
    if noise <= 0:
        return bits
    out = list(bits)
    for c in range(1, NUM_CLASSES):
        if rng.random() < noise:
            out[c] = 1 - out[c]
    out[0] = 1 if sum(out[1:]) == 0 else 0
    return out


@dataclass
class UnpairedCorpus:
    """In-memory view of a corpus directory.

    reports/images come from independent label streams with the pairing
    index discarded. eval_* and pair_* splits keep their pairing (needed
    for NLG references and the few-shot mode) and are disjoint from the
    training streams by seed partitioning.
    """

    manifest: dict
    report_tokens: list
    report_labels: list
    image_grids: np.ndarray
    image_labels: list
    eval_tokens: list
    eval_labels: list
    eval_grids: np.ndarray
    pair_tokens: list
    pair_labels: list
    pair_grids: np.ndarray

    @property
    def n_patches(self):
        return self.manifest["n_patches"]

    @property
    def patch_dim(self):
        return self.manifest["patch_dim"]


_STREAM_REPORTS, _STREAM_IMAGES, _STREAM_EVAL, _STREAM_PAIRS = 1, 2, 3, 4


def _sample_rng(seed: int, stream: int, index: int):
    return np.random.default_rng([seed, stream, index])


def build_corpus(cfg: SynthConfig, out_dir: str) -> dict:
    """Generate and serialize a corpus directory; returns the manifest."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    pattern_seed = cfg.resolved_pattern_seed()
    patterns, subsets = class_patterns(pattern_seed, cfg.patch_dim, cfg.n_patches)

    def make_report(rng):
        labels = sample_label_vector(cfg.prevalence, rng)
        tokens = generate_report(labels, rng, cfg.max_len, cfg.neg_rate)
        return tokens, labels

    def make_image(rng):
        labels = sample_label_vector(cfg.prevalence, rng)
        grid = generate_image(
            labels, rng, patterns, subsets, cfg.n_patches, cfg.patch_dim,
            cfg.amplitude, cfg.noise_std,
        )
        stored = _apply_label_noise(labels, rng, cfg.label_noise)
        return grid, stored

    reports = [make_report(_sample_rng(cfg.seed, _STREAM_REPORTS, i)) for i in range(cfg.n_reports)]
    images = [make_image(_sample_rng(cfg.seed, _STREAM_IMAGES, i)) for i in range(cfg.n_images)]

    # eval and few-shot splits are paired by construction: one label vector
    # drives both the report and the image of a record
    def make_pair(rng):
        labels = sample_label_vector(cfg.prevalence, rng)
        tokens = generate_report(labels, rng, cfg.max_len, cfg.neg_rate)
        grid = generate_image(
            labels, rng, patterns, subsets, cfg.n_patches, cfg.patch_dim,
            cfg.amplitude, cfg.noise_std,
        )
        return tokens, labels, grid

    eval_pairs = [make_pair(_sample_rng(cfg.seed, _STREAM_EVAL, i)) for i in range(cfg.n_eval)]
    pool_pairs = [make_pair(_sample_rng(cfg.seed, _STREAM_PAIRS, i)) for i in range(cfg.n_pairs)]

    manifest = {
        "seed": cfg.seed,
        "pattern_seed": pattern_seed,
        "n_classes": NUM_CLASSES,
        "vocab_size": cfg.vocab_size,
        "max_len": cfg.max_len,
        "n_patches": cfg.n_patches,
        "patch_dim": cfg.patch_dim,
        "prevalence": list(cfg.prevalence),
        "amplitude": cfg.amplitude,
        "noise_std": cfg.noise_std,
        "neg_rate": cfg.neg_rate,
        "label_noise": cfg.label_noise,
        "counts": {
            "reports": cfg.n_reports,
            "images": cfg.n_images,
            "eval": cfg.n_eval,
            "pairs": cfg.n_pairs,
        },
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)

    with open(os.path.join(out_dir, "reports.jsonl"), "w") as fh:
        for tokens, labels in reports:
            fh.write(json.dumps({"tokens": tokens, "labels": labels}, separators=(",", ":")))
            fh.write("\n")

    _write_grids(os.path.join(out_dir, "images.bin"), [g for g, _ in images])
    _write_json(
        os.path.join(out_dir, "images.json"),
        {
            "n_patches": cfg.n_patches,
            "patch_dim": cfg.patch_dim,
            "dtype": "float32-le",
            "labels": [lab for _, lab in images],
        },
    )

    with open(os.path.join(out_dir, "eval.jsonl"), "w") as fh:
        for tokens, labels, _ in eval_pairs:
            fh.write(json.dumps({"tokens": tokens, "labels": labels}, separators=(",", ":")))
            fh.write("\n")
    _write_grids(os.path.join(out_dir, "eval_images.bin"), [g for _, _, g in eval_pairs])

    with open(os.path.join(out_dir, "pairs.jsonl"), "w") as fh:
        for tokens, labels, _ in pool_pairs:
            fh.write(json.dumps({"tokens": tokens, "labels": labels}, separators=(",", ":")))
            fh.write("\n")
    _write_grids(os.path.join(out_dir, "pairs_images.bin"), [g for _, _, g in pool_pairs])

    return manifest


_CORPUS_FILES = [
    "manifest.json",
    "reports.jsonl",
    "images.bin",
    "images.json",
    "eval.jsonl",
    "eval_images.bin",
    "pairs.jsonl",
    "pairs_images.bin",
]


def corpus_hash(corpus_dir: str) -> str:
    """sha256 over the corpus files in fixed order."""
    h = hashlib.sha256()
    for name in _CORPUS_FILES:
        path = os.path.join(corpus_dir, name)
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def load_corpus(corpus_dir: str) -> UnpairedCorpus:
    with open(os.path.join(corpus_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    n_p, d_raw = manifest["n_patches"], manifest["patch_dim"]

    def read_jsonl(name):
        tokens, labels = [], []
        with open(os.path.join(corpus_dir, name)) as fh:
            for line in fh:
                rec = json.loads(line)
                tokens.append(rec["tokens"])
                labels.append(rec["labels"])
        return tokens, labels

    report_tokens, report_labels = read_jsonl("reports.jsonl")
    with open(os.path.join(corpus_dir, "images.json")) as fh:
        image_labels = json.load(fh)["labels"]
    image_grids = _read_grids(os.path.join(corpus_dir, "images.bin"), len(image_labels), n_p, d_raw)
    eval_tokens, eval_labels = read_jsonl("eval.jsonl")
    eval_grids = _read_grids(os.path.join(corpus_dir, "eval_images.bin"), len(eval_labels), n_p, d_raw)
    pair_tokens, pair_labels = read_jsonl("pairs.jsonl")
    pair_grids = _read_grids(os.path.join(corpus_dir, "pairs_images.bin"), len(pair_labels), n_p, d_raw)
    return UnpairedCorpus(
        manifest=manifest,
        report_tokens=report_tokens,
        report_labels=report_labels,
        image_grids=image_grids,
        image_labels=image_labels,
        eval_tokens=eval_tokens,
        eval_labels=eval_labels,
        eval_grids=eval_grids,
        pair_tokens=pair_tokens,
        pair_labels=pair_labels,
        pair_grids=pair_grids,
    )


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))


def _write_grids(path, grids):
    arr = np.stack(grids).astype("<f4") if grids else np.zeros((0,), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())


def _read_grids(path, n, n_patches, patch_dim):
    data = np.fromfile(path, dtype="<f4")
    return data.reshape(n, n_patches, patch_dim)
