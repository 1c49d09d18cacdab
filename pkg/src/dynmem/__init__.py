"""Continual-learning toolkit: a gram-distance dynamic rehearsal memory with
naive, EWC and EWC-frozen-norm baselines on a synthetic shifted image stream.
"""

from .data import Corpus, CorpusConfig, Dataset, build_corpus, build_schedule, emit_stream
from .experiment import ExperimentConfig, run_base_training, run_continual, run_full_training
from .gram import GramSignature, gram_distance, gram_matrix, signature, signatures
from .memory import DynamicMemory, InsertOutcome, MemoryItem
from .model import ConvNetClassifier, gradient_check
from .strategies import (DMStrategy, EWCStrategy, NaiveStrategy, StepReport,
                         make_strategy, train_base, train_full)
from .validation import ConfigError, ShapeError, StateError

__version__ = "0.1.0"

__all__ = [
    "Corpus", "CorpusConfig", "Dataset", "build_corpus", "build_schedule", "emit_stream",
    "ExperimentConfig", "run_base_training", "run_continual", "run_full_training",
    "GramSignature", "gram_distance", "gram_matrix", "signature", "signatures",
    "DynamicMemory", "InsertOutcome", "MemoryItem",
    "ConvNetClassifier", "gradient_check",
    "DMStrategy", "EWCStrategy", "NaiveStrategy", "StepReport",
    "make_strategy", "train_base", "train_full",
    "ConfigError", "ShapeError", "StateError",
]
