"""Tests for the synthetic corpus generator, the stream schedule and the
corpus containers, including the generator calibration oracles.
"""
import numpy as np
import pytest
from scipy.ndimage import gaussian_filter, median_filter

from dynmem.data import (TASKS, TASK_ATTRS, Corpus, CorpusConfig, build_corpus,
                         build_schedule, emit_stream, generate_background,
                         imprint_target, load_corpus, save_corpus)
from dynmem.validation import ConfigError, ShapeError

SMALL = CorpusConfig(base_count=60, continuous_counts=(60, 40, 90), eval_count=20)


def edge_count(img, threshold=0.2):
    """Local-contrast statistic: median-filtered gradient magnitudes above a
    threshold; imprinted targets add a plateau boundary, backgrounds do not."""
    d = median_filter(img, 3)
    return float(np.sum(np.abs(np.diff(d, axis=0)) > threshold)
                 + np.sum(np.abs(np.diff(d, axis=1)) > threshold))


def threshold_accuracy(clean_values, imprinted_values):
    """Best achievable accuracy of a single threshold on the statistic."""
    best = 0.0
    for t in np.concatenate([clean_values, imprinted_values]):
        acc = (np.mean(clean_values < t) + np.mean(imprinted_values >= t)) / 2
        best = max(best, float(acc))
    return best


# -- backgrounds -----------------------------------------------------------

def test_background_deterministic_per_seed():
    a = generate_background("smooth", np.random.default_rng(7))
    b = generate_background("smooth", np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_background_range_and_dtype():
    rng = np.random.default_rng(0)
    for modality in ("smooth", "sharp"):
        img = generate_background(modality, rng)
        assert img.dtype == np.float32
        assert img.shape == (32, 32)
        assert img.min() >= 0.0 and img.max() <= 1.0


def test_background_unknown_modality_raises():
    with pytest.raises(ConfigError):
        generate_background("blurry", np.random.default_rng(0))


def test_background_mean_pixel_calibration():
    rng = np.random.default_rng(1)
    for modality in ("smooth", "sharp"):
        means = [generate_background(modality, rng).mean() for _ in range(1000)]
        assert 0.3 < np.mean(means) < 0.7


def test_modalities_separable_by_highpass_energy():
    """AUC > 0.9 for a fixed high-pass energy statistic (the modality shift
    is real, not cosmetic)."""
    rng = np.random.default_rng(2)

    def energy(img):
        return float(np.mean((img - gaussian_filter(img, 2.0)) ** 2))

    smooth = np.array([energy(generate_background("smooth", rng)) for _ in range(1000)])
    sharp = np.array([energy(generate_background("sharp", rng)) for _ in range(1000)])
    auc = np.mean(sharp[:, None] > smooth[None, :])
    assert auc > 0.9


# -- target imprinting -----------------------------------------------------

def test_imprint_high_polarity_raises_region_mean():
    rng = np.random.default_rng(3)
    base = generate_background("smooth", rng)
    out = imprint_target(base, "high", np.random.default_rng(4))
    changed = out != base
    assert changed.any()
    assert np.all(out[changed] >= base[changed])


def test_imprint_low_polarity_clamps_at_zero():
    rng = np.random.default_rng(5)
    base = np.full((32, 32), 0.4, dtype=np.float32)
    cfg = CorpusConfig(offset_min=0.5, offset_max=0.5)
    out = imprint_target(base, "low", rng, cfg)
    changed = out != base
    assert np.all(out[changed] == 0.0)


def test_imprint_returns_new_image():
    rng = np.random.default_rng(6)
    base = generate_background("sharp", rng)
    copy = base.copy()
    imprint_target(base, "high", rng)
    np.testing.assert_array_equal(base, copy)


def test_imprint_unknown_polarity_raises():
    with pytest.raises(ConfigError):
        imprint_target(np.zeros((32, 32)), "medium", np.random.default_rng(0))


def test_imprint_oversized_sprite_raises():
    cfg = CorpusConfig(image_size=8, sprite_size=7, scale_min=1.5, scale_max=1.5)
    with pytest.raises(ShapeError):
        imprint_target(np.zeros((8, 8)), "high", np.random.default_rng(0), cfg)


@pytest.mark.parametrize("task", TASKS)
def test_targets_separable_by_local_contrast_threshold(task):
    """Learnability calibration: imprinted vs clean images of every task are
    separable with accuracy > 0.95 by a threshold on a local-contrast count."""
    modality, polarity = TASK_ATTRS[task]
    rng = np.random.default_rng(0)
    cfg = CorpusConfig()
    clean = np.array([edge_count(generate_background(modality, rng, cfg))
                      for _ in range(250)])
    imprinted = np.array([
        edge_count(imprint_target(generate_background(modality, rng, cfg),
                                  polarity, rng, cfg))
        for _ in range(250)
    ])
    assert threshold_accuracy(clean, imprinted) > 0.95


# -- corpus ----------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus():
    return build_corpus(SMALL, seed=5)


def test_corpus_split_counts(corpus):
    assert len(corpus.base) == 60
    assert len(corpus.continuous) == 190
    assert len(corpus.validation) == len(corpus.test) == 60
    for task, count in zip(TASKS, SMALL.continuous_counts):
        assert int(np.sum(corpus.continuous.tasks == task)) == count


def test_corpus_balanced_labels_per_split_task(corpus):
    for split in ("base", "continuous", "validation", "test"):
        ds = corpus.split(split)
        for task in TASKS:
            sub = ds.task_subset(task)
            if len(sub):
                assert int(sub.labels.sum()) == len(sub) // 2


def test_corpus_ids_disjoint_across_splits(corpus):
    all_ids = np.concatenate([corpus.split(s).ids
                              for s in ("base", "continuous", "validation", "test")])
    assert len(np.unique(all_ids)) == len(all_ids)


def test_corpus_bytewise_deterministic(tmp_path):
    a = build_corpus(SMALL, seed=5)
    b = build_corpus(SMALL, seed=5)
    np.testing.assert_array_equal(a.continuous.images, b.continuous.images)
    np.testing.assert_array_equal(a.continuous.labels, b.continuous.labels)


def test_base_split_is_task_a_only(corpus):
    assert set(corpus.base.tasks) == {"A"}


# -- schedule and stream ---------------------------------------------------

def test_schedule_default_geometry():
    sched = build_schedule([600, 400, 950])
    assert len(sched) == 1950
    assert sched.ramp_spans == [(540, 660), (940, 1060)]
    assert sched.checkpoint_positions() == {"A": 539, "B": 939, "C": 1949}
    np.testing.assert_allclose(sched.weights.sum(axis=1), 1.0)
    assert np.all(sched.weights >= 0.0)


def test_stream_pure_segments_are_pure(corpus):
    sched = build_schedule(SMALL.continuous_counts)
    stream = emit_stream(corpus.continuous, sched, np.random.default_rng(0))
    for t_idx, task in enumerate(TASKS):
        pure = sched.weights[:, t_idx] == 1.0
        assert set(stream.tasks[pure]) == {task}


def test_stream_is_permutation_of_continuous(corpus):
    sched = build_schedule(SMALL.continuous_counts)
    stream = emit_stream(corpus.continuous, sched, np.random.default_rng(1))
    assert sorted(stream.ids) == sorted(corpus.continuous.ids)


def test_stream_ramp_midpoint_mixture(corpus):
    """Near the A-to-B ramp midpoint both tasks appear roughly equally."""
    sched = build_schedule(SMALL.continuous_counts)
    mid = sched.ramp_midpoint(0)
    draws = []
    for seed in range(50):
        stream = emit_stream(corpus.continuous, sched, np.random.default_rng(seed))
        draws.extend(stream.tasks[mid - 2 : mid + 2])
    frac_a = np.mean(np.asarray(draws) == "A")
    assert 0.4 <= frac_a <= 0.6


def test_stream_length_mismatch_raises(corpus):
    sched = build_schedule([10, 10, 10])
    with pytest.raises(ConfigError):
        emit_stream(corpus.continuous, sched, np.random.default_rng(0))


# -- corpus IO -------------------------------------------------------------

def test_corpus_save_load_round_trip(tmp_path, corpus):
    save_corpus(corpus, tmp_path / "corpus")
    loaded = load_corpus(tmp_path / "corpus")
    assert loaded.config == corpus.config
    assert loaded.seed == corpus.seed
    for split in ("base", "continuous", "validation", "test"):
        a, b = corpus.split(split), loaded.split(split)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.tasks, b.tasks)
        np.testing.assert_array_equal(a.ids, b.ids)


def test_corpus_save_is_deterministic(tmp_path, corpus):
    save_corpus(corpus, tmp_path / "a")
    save_corpus(corpus, tmp_path / "b")
    for name in ("base.dmc", "continuous.dmc", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_corpus_load_rejects_tampered_hash(tmp_path, corpus):
    save_corpus(corpus, tmp_path / "corpus")
    manifest = tmp_path / "corpus" / "manifest.json"
    manifest.write_text(manifest.read_text().replace(
        corpus.config.config_hash(), "0" * 16))
    with pytest.raises(ConfigError):
        load_corpus(tmp_path / "corpus")


def test_corpus_load_missing_manifest_raises(tmp_path):
    with pytest.raises(ConfigError):
        load_corpus(tmp_path)
