"""Dialect identification with adapter-augmented transformer encoders."""

__version__ = "0.1.0"

from .corpus import CorpusError, LabelSet, Vocab, build_vocab, encode_dataset, load_tsv
from .encoder import ConfigError, Model, ModelConfig, init_model
from .ensemble_eval import EvalError, ensemble, evaluate_predictions, fit_erlang, length_analysis
from .estimator import DialectClassifier, MultiplicativeEnsembleClassifier
from .training import TrainConfig, TrainingError, train

__all__ = [
    "ConfigError", "CorpusError", "DialectClassifier", "EvalError", "LabelSet", "Model", "ModelConfig",
    "MultiplicativeEnsembleClassifier", "TrainConfig", "TrainingError", "Vocab", "build_vocab",
    "encode_dataset", "ensemble", "evaluate_predictions", "fit_erlang", "init_model", "length_analysis",
    "load_tsv", "train",
]
