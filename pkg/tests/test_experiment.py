"""Tests for the experiment driver: config validation, run reproducibility,
stream invariance across strategies and result schemas.
"""
import numpy as np
import pytest

from dynmem.data import CorpusConfig, build_corpus
from dynmem.evaluation import R_ROWS
from dynmem.experiment import (ExperimentConfig, run_base_training, run_continual,
                               run_full_training, steps_to_accuracy)
from dynmem.validation import ConfigError

TINY = CorpusConfig(base_count=40, continuous_counts=(40, 24, 40), eval_count=16)


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(TINY, seed=3)


@pytest.fixture(scope="module")
def cfg():
    return ExperimentConfig(seed=0, n_seeds=1, base_epochs=1, full_epochs=1,
                            probe_every=5, memory_size=8)


@pytest.fixture(scope="module")
def base_model(corpus, cfg):
    model, _ = run_base_training(corpus, cfg, seed=0)
    return model


# -- configuration ---------------------------------------------------------

def test_config_rejects_input_batch_larger_than_train_batch():
    with pytest.raises(ConfigError):
        ExperimentConfig(input_batch_size=16, train_batch_size=8)


def test_config_rejects_tiny_memory():
    with pytest.raises(ConfigError):
        ExperimentConfig(memory_size=1)


def test_config_seed_list_and_hash_stability():
    cfg = ExperimentConfig(seed=10, n_seeds=3)
    assert cfg.seeds() == [10, 11, 12]
    assert cfg.config_hash() == ExperimentConfig(seed=10, n_seeds=3).config_hash()
    assert cfg.config_hash() != ExperimentConfig(seed=11, n_seeds=3).config_hash()


# -- base training ---------------------------------------------------------

def test_base_training_rows_and_ewc_state(corpus, cfg, base_model):
    model, rows = run_base_training(corpus, cfg, seed=0)
    assert model.fisher is not None and model.anchor is not None
    losses = [r for r in rows if r["metric"] == "epoch_loss"]
    assert len(losses) == cfg.base_epochs
    vals = [r for r in rows if r["metric"] == "accuracy"]
    assert [r["task"] for r in vals] == ["A", "B", "C"]
    # same seed twice yields the same weights
    for n, p in model.named_params().items():
        np.testing.assert_array_equal(p, base_model.named_params()[n])


def test_base_training_without_ewc_leaves_no_anchor(corpus, cfg):
    model, _ = run_base_training(corpus, cfg, seed=0, with_ewc=False)
    assert model.fisher is None and model.anchor is None


# -- continual runs --------------------------------------------------------

def test_run_continual_is_deterministic(corpus, cfg, base_model):
    a = run_continual(corpus, base_model, "dm", cfg, seed=0)
    b = run_continual(corpus, base_model, "dm", cfg, seed=0)
    assert a.rows == b.rows
    np.testing.assert_array_equal(a.rmatrix, b.rmatrix)
    assert a.memory_dump == b.memory_dump


def test_stream_order_is_strategy_independent(corpus, cfg, base_model):
    ids = [run_continual(corpus, base_model, name, cfg, seed=0).stream_ids
           for name in ("naive", "ewc", "dm")]
    np.testing.assert_array_equal(ids[0], ids[1])
    np.testing.assert_array_equal(ids[0], ids[2])


def test_run_continual_result_schema(corpus, cfg, base_model):
    result = run_continual(corpus, base_model, "ewc-fbn", cfg, seed=0)
    assert result.rmatrix.shape == (len(R_ROWS), 3)
    assert np.all(np.isfinite(result.rmatrix))
    for key in ("acc_A", "acc_B", "acc_C", "bwt", "fwt", "rmatrix", "config_hash"):
        assert key in result.summary
    assert result.memory_dump is None
    # final R row feeds the summary accuracies
    np.testing.assert_allclose(
        [result.summary["acc_A"], result.summary["acc_B"], result.summary["acc_C"]],
        result.rmatrix[-1])


def test_run_continual_base_row_matches_base_model(corpus, cfg, base_model):
    result = run_continual(corpus, base_model, "naive", cfg, seed=0)
    from dynmem.evaluation import accuracy
    for t_idx, task in enumerate(("A", "B", "C")):
        ds = corpus.test.task_subset(task)
        assert result.rmatrix[0, t_idx] == accuracy(base_model, ds.images, ds.labels)


def test_run_continual_leaves_base_model_untouched(corpus, cfg, base_model):
    before = {n: p.copy() for n, p in base_model.named_params().items()}
    run_continual(corpus, base_model, "dm", cfg, seed=0)
    for n, p in base_model.named_params().items():
        np.testing.assert_array_equal(p, before[n])


def test_probe_rows_cover_start_and_end(corpus, cfg, base_model):
    result = run_continual(corpus, base_model, "naive", cfg, seed=0)
    total_steps = (40 + 24 + 40) // cfg.input_batch_size
    probe = sorted({r["step"] for r in result.rows if r["split"] == "val"})
    assert probe[0] == 0 and probe[-1] == total_steps


# -- full training ---------------------------------------------------------

def test_full_training_summary(corpus, cfg):
    result = run_full_training(corpus, cfg, seed=0)
    assert result.summary["strategy"] == "full"
    assert result.summary["bwt"] is None and result.summary["fwt"] is None
    for key in ("acc_A", "acc_B", "acc_C"):
        assert 0.0 <= result.summary[key] <= 1.0


# -- adaptation-speed metric -----------------------------------------------

def test_steps_to_accuracy_first_crossing():
    rows = [{"step": s, "task": "C", "split": "val", "metric": "accuracy",
             "value": v} for s, v in [(0, 0.5), (30, 0.79), (60, 0.81), (90, 0.9)]]
    assert steps_to_accuracy(rows, "C") == 60.0


def test_steps_to_accuracy_never_reached_is_inf():
    rows = [{"step": 0, "task": "C", "split": "val", "metric": "accuracy",
             "value": 0.5}]
    assert steps_to_accuracy(rows, "C") == float("inf")
