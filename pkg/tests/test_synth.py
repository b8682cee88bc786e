import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reportalign import synth
from reportalign.config import NUM_CLASSES, SynthConfig
from reportalign.errors import ConfigError, InputError
from reportalign.synth import (
    BOS,
    EOS,
    NO,
    PAD,
    PRESENT,
    build_corpus,
    class_patterns,
    corpus_hash,
    extract_labels_from_report,
    generate_image,
    generate_report,
    load_corpus,
    sample_label_vector,
)


def label_vec(*active):
    bits = [0] * NUM_CLASSES
    for c in active:
        bits[c] = 1
    if not active:
        bits[0] = 1
    return bits


class TestSampleLabelVector:
    def test_all_pathologies_impossible_forces_no_finding(self, rng):
        prev = [0.0] * NUM_CLASSES
        assert sample_label_vector(prev, rng) == label_vec()

    def test_certain_pathology(self, rng):
        prev = [0.0] * NUM_CLASSES
        prev[1] = 1.0
        assert sample_label_vector(prev, rng) == label_vec(1)

    def test_monte_carlo_rate_matches_bernoulli(self):
        rng = np.random.default_rng(7)
        prev = [0.0] + [0.3] * (NUM_CLASSES - 1)
        hits = sum(sample_label_vector(prev, rng)[1] for _ in range(10_000))
        assert 0.27 <= hits / 10_000 <= 0.33

    def test_malformed_length_rejected(self, rng):
        with pytest.raises(ConfigError):
            sample_label_vector([0.5] * 3, rng)


class TestGenerateReport:
    def test_no_finding_report_has_no_presence_sentences(self):
        rng = np.random.default_rng(3)
        tokens = generate_report(label_vec(), rng)
        assert PRESENT not in tokens
        assert extract_labels_from_report(tokens) == label_vec()

    def test_round_trip_small_cases(self):
        for seed, active in [(0, (1,)), (1, (2, 5)), (2, (3, 7)), (3, tuple(range(1, 14)))]:
            labels = label_vec(*active)
            tokens = generate_report(labels, np.random.default_rng(seed))
            assert extract_labels_from_report(tokens) == labels

    @given(st.sets(st.integers(min_value=1, max_value=NUM_CLASSES - 1)), st.integers(0, 2**32 - 1))
    @settings(max_examples=80, deadline=None)
    def test_round_trip_property(self, active, seed):
        labels = label_vec(*active)
        tokens = generate_report(labels, np.random.default_rng(seed))
        assert extract_labels_from_report(tokens) == labels
        synth.validate_token_sequence(tokens)

    def test_deterministic_for_fixed_seed(self):
        labels = label_vec(3, 7)
        first = generate_report(labels, np.random.default_rng(11))
        again = generate_report(labels, np.random.default_rng(11))
        assert first == again

    def test_all_classes_active_fits_max_len(self):
        labels = label_vec(*range(1, NUM_CLASSES))
        tokens = generate_report(labels, np.random.default_rng(0), max_len=64)
        assert len(tokens) <= 64
        assert extract_labels_from_report(tokens) == labels


class TestExtractLabels:
    def test_negated_mention_does_not_fire(self):
        edema = synth.WORD_TO_ID["edema"]
        tokens = [BOS, NO, edema, synth.PERIOD, EOS]
        labels = extract_labels_from_report(tokens)
        assert labels[synth.CLASS_OF_NAME[edema]] == 0
        assert labels[0] == 1

    def test_plain_mention_fires(self):
        edema = synth.WORD_TO_ID["edema"]
        mild = synth.WORD_TO_ID["mild"]
        basal = synth.WORD_TO_ID["basal"]
        tokens = [BOS, edema, mild, basal, PRESENT, synth.PERIOD, EOS]
        assert extract_labels_from_report(tokens)[synth.CLASS_OF_NAME[edema]] == 1

    def test_unknown_tokens_ignored(self):
        tokens = [BOS, 150, 159, EOS]
        assert extract_labels_from_report(tokens) == label_vec()

    def test_thousand_generated_reports_round_trip(self):
        rng = np.random.default_rng(42)
        prev = [0.0] + [0.25] * (NUM_CLASSES - 1)
        for _ in range(1000):
            labels = sample_label_vector(prev, rng)
            tokens = generate_report(labels, rng)
            assert extract_labels_from_report(tokens) == labels


@pytest.fixture(scope="module")
def patterns():
    return class_patterns(99, patch_dim=16, n_patches=64)


class TestGenerateImage:
    def test_patterns_unit_norm_and_separated(self, patterns):
        vecs, subsets = patterns
        norms = np.linalg.norm(vecs, axis=1)
        assert np.allclose(norms, 1.0)
        for i in range(len(vecs)):
            for j in range(i + 1, len(vecs)):
                assert abs(float(vecs[i] @ vecs[j])) < 0.3
        assert subsets.shape == (NUM_CLASSES, 6)

    def test_same_labels_same_seed_identical(self, patterns):
        vecs, subsets = patterns
        kw = dict(n_patches=64, patch_dim=16)
        a = generate_image(label_vec(2), np.random.default_rng(8), vecs, subsets, **kw)
        b = generate_image(label_vec(2), np.random.default_rng(8), vecs, subsets, **kw)
        assert np.array_equal(a, b)

    def test_noise_free_difference_is_amplitude_times_pattern(self, patterns):
        vecs, subsets = patterns
        kw = dict(n_patches=64, patch_dim=16, amplitude=3.0, noise_std=0.0)
        with_c = generate_image(label_vec(4, 6), np.random.default_rng(0), vecs, subsets, **kw)
        without_c = generate_image(label_vec(6), np.random.default_rng(0), vecs, subsets, **kw)
        diff = with_c - without_c
        mean_over_subset = diff[subsets[4]].mean(axis=0)
        assert np.allclose(mean_over_subset, 3.0 * vecs[4])
        untouched = [i for i in range(64) if i not in set(subsets[4])]
        assert np.allclose(diff[untouched], 0.0)


class TestBuildCorpus:
    def test_regeneration_matches_checksum(self, tmp_path):
        cfg = SynthConfig(seed=1, n_reports=50, n_images=50, n_eval=10, n_pairs=5)
        build_corpus(cfg, str(tmp_path / "a"))
        build_corpus(cfg, str(tmp_path / "b"))
        assert corpus_hash(str(tmp_path / "a")) == corpus_hash(str(tmp_path / "b"))

    def test_zero_prevalence_gives_all_no_finding(self, tmp_path):
        cfg = SynthConfig(seed=2, n_reports=30, n_images=30, n_eval=5, n_pairs=5,
                          prevalence=[0.0] * NUM_CLASSES)
        build_corpus(cfg, str(tmp_path / "c"))
        corpus = load_corpus(str(tmp_path / "c"))
        assert all(lab == label_vec() for lab in corpus.report_labels)
        assert all(lab == label_vec() for lab in corpus.image_labels)

    def test_prevalence_within_relative_bound(self, tmp_path):
        cfg = SynthConfig(seed=3, n_reports=1000, n_images=1000, n_eval=10, n_pairs=5)
        build_corpus(cfg, str(tmp_path / "d"))
        corpus = load_corpus(str(tmp_path / "d"))
        for labels in (corpus.report_labels, corpus.image_labels):
            arr = np.asarray(labels)
            for c in range(1, NUM_CLASSES):
                rate = arr[:, c].mean()
                assert abs(rate - 0.25) / 0.25 <= 0.2

    def test_zero_sizes_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            build_corpus(SynthConfig(n_reports=0), str(tmp_path / "e"))

    def test_serialized_corpus_has_no_pairing_fields(self, tmp_path):
        cfg = SynthConfig(seed=4, n_reports=20, n_images=20, n_eval=5, n_pairs=5)
        build_corpus(cfg, str(tmp_path / "f"))
        with open(tmp_path / "f" / "reports.jsonl") as fh:
            for line in fh:
                assert set(json.loads(line)) == {"tokens", "labels"}
        with open(tmp_path / "f" / "images.json") as fh:
            assert set(json.load(fh)) == {"n_patches", "patch_dim", "dtype", "labels"}

    def test_label_noise_knob(self, tmp_path):
        cfg = SynthConfig(seed=6, n_reports=10, n_images=400, n_eval=5, n_pairs=5,
                          label_noise=0.5)
        build_corpus(cfg, str(tmp_path / "g"))
        corpus = load_corpus(str(tmp_path / "g"))
        arr = np.asarray(corpus.image_labels)
        # heavy flipping shifts rates well above the clean 0.25 prevalence
        assert arr[:, 1:].mean() > 0.3
        for lab in corpus.image_labels:
            synth.validate_label_vector(lab)


class TestValidation:
    def test_label_vector_rules(self):
        with pytest.raises(InputError):
            synth.validate_label_vector([0] * NUM_CLASSES)
        with pytest.raises(InputError):
            synth.validate_label_vector(label_vec(1)[:-1])
        bad = label_vec(1)
        bad[0] = 1
        with pytest.raises(InputError):
            synth.validate_label_vector(bad)

    def test_token_sequence_rules(self):
        with pytest.raises(InputError):
            synth.validate_token_sequence([EOS, BOS])
        with pytest.raises(InputError):
            synth.validate_token_sequence([BOS, 5, EOS, 5])
        with pytest.raises(InputError):
            synth.validate_token_sequence([BOS] + [5] * 80 + [EOS], max_len=64)
        assert synth.validate_token_sequence([BOS, 5, EOS, PAD, PAD]) == [BOS, 5, EOS, PAD, PAD]
