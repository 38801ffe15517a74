"""Stroke-risk prediction networks with quadratic interactions, a
multi-gate mixture of experts, and Shapley explanations."""

__version__ = "0.1.0"

from .dataset import (Dataset, FeatureSchema, Preprocessor, SynthConfig,
                      default_schema, load_csv, prepare, split, synth,
                      write_csv)
from .estimators import (BaseDNNClassifier, MMOEClassifier, QIDNNClassifier,
                         TopFeatureSelector, screen_pairs)
from .exceptions import RiskgridError
from .metrics import auc, binary_report, report

__all__ = [
    "BaseDNNClassifier", "Dataset", "FeatureSchema", "MMOEClassifier",
    "Preprocessor", "QIDNNClassifier", "RiskgridError", "SynthConfig",
    "TopFeatureSelector", "auc", "binary_report", "default_schema",
    "load_csv", "prepare", "report", "screen_pairs", "split", "synth",
    "write_csv",
]
