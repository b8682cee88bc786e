"""Configuration dataclasses, JSON loading and validation, seed derivation."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError

NUM_CLASSES = 14  # class 0 is the explicit no-finding class


def derive_seed(base: int, role: str) -> int:
    """Stable 63-bit sub-seed for a named role under one base seed."""
    digest = hashlib.sha256(f"{base}:{role}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class SynthConfig:
    """Parameters of the synthetic unpaired corpus generator."""

    seed: int = 0
    n_reports: int = 2000
    n_images: int = 2000
    n_eval: int = 500
    n_pairs: int = 200
    vocab_size: int = 160
    max_len: int = 64
    n_patches: int = 64
    patch_dim: int = 16
    # per-class Bernoulli probabilities; entry 0 (no finding) is derived, not drawn
    prevalence: list = field(default_factory=lambda: [0.0] + [0.25] * (NUM_CLASSES - 1))
    amplitude: float = 3.0
    noise_std: float = 1.0
    neg_rate: float = 0.25
    label_noise: float = 0.0
    pattern_seed: int | None = None

    def resolved_pattern_seed(self) -> int:
        if self.pattern_seed is not None:
            return self.pattern_seed
        return derive_seed(self.seed, "patterns")

    def validate(self):
        if self.n_reports <= 0 or self.n_images <= 0:
            raise ConfigError("corpus sizes must be positive")
        if len(self.prevalence) != NUM_CLASSES:
            raise ConfigError(
                f"prevalence must have length {NUM_CLASSES}, got {len(self.prevalence)}"
            )
        if any(not (0.0 <= p <= 1.0) for p in self.prevalence):
            raise ConfigError("prevalence entries must lie in [0, 1]")
        if not (0.0 <= self.label_noise <= 1.0):
            raise ConfigError("label_noise must lie in [0, 1]")
        if not (0.0 <= self.neg_rate <= 1.0):
            raise ConfigError("neg_rate must lie in [0, 1]")
        if self.max_len < 8:
            raise ConfigError("max_len too small for the report grammar")
        side = int(round(self.n_patches ** 0.5))
        if side * side != self.n_patches:
            raise ConfigError("n_patches must be a perfect square (grid layout)")
        from . import synth  # deferred: synth imports config

        if self.vocab_size < synth.n_vocab_words():
            raise ConfigError(
                f"vocab_size must be >= {synth.n_vocab_words()} to hold the grammar"
            )
        return self


@dataclass
class TrainConfig:
    """Model dimensions, loss weights and optimization settings."""

    seed: int = 0
    d: int = 64
    heads: int = 4
    modality_layers: int = 1
    shared_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: int = 128
    mem_slots: int = 128
    mem_dim: int = 64
    mem_topk: int = 8
    use_memory: bool = True
    memory_apply: str = "local"  # local | global
    tau: float = 0.5
    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 1.0
    aug_mode: str = "dropout"  # none | dropout | noise
    aug_p: float = 0.9
    aug_sigma: float = 5.0
    decoder_inputs: str = "global+local"  # global+local | local | global
    classifier_hidden: int = 64
    classify_views: bool = False
    batch_n: int = 16
    epochs: int = 10
    lr: float = 3e-4
    paired_fraction: float = 0.0
    checkpoint_every: int = 0  # steps between checkpoints; 0 keeps only the final one

    def validate(self):
        if self.gamma1 < 0 or self.gamma2 < 0 or self.gamma3 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.gamma1 == self.gamma2 == self.gamma3 == 0:
            raise ConfigError("at least one loss weight must be positive")
        if self.batch_n < 2:
            raise ConfigError("batch_n must be at least 2")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not (0.0 <= self.aug_p < 1.0):
            raise ConfigError("aug_p must lie in [0, 1)")
        if self.aug_sigma < 0:
            raise ConfigError("aug_sigma must be non-negative")
        if self.aug_mode not in ("none", "dropout", "noise"):
            raise ConfigError(f"unknown aug_mode {self.aug_mode!r}")
        if self.memory_apply not in ("local", "global"):
            raise ConfigError(f"unknown memory_apply {self.memory_apply!r}")
        if self.decoder_inputs not in ("global+local", "local", "global"):
            raise ConfigError(f"unknown decoder_inputs {self.decoder_inputs!r}")
        if not (1 <= self.mem_topk <= self.mem_slots):
            raise ConfigError("mem_topk must satisfy 1 <= K <= mem_slots")
        if self.d % self.heads != 0:
            raise ConfigError("d must be divisible by heads")
        if not (0.0 <= self.paired_fraction <= 1.0):
            raise ConfigError("paired_fraction must lie in [0, 1]")
        if self.epochs <= 0 or self.lr <= 0:
            raise ConfigError("epochs and lr must be positive")
        return self


_KINDS = {"synth": SynthConfig, "train": TrainConfig}


def config_from_dict(data: dict, kind: str):
    """Build and validate a config from a plain dict, rejecting unknown keys."""
    cls = _KINDS[kind]
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return cls(**data).validate()


def load_config(path, kind: str):
    """Load a JSON config file; missing keys take defaults."""
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(data, kind)


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
