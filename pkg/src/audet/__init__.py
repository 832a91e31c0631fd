"""Facial action unit detection on schematic face videos.

Pipeline pieces: a numpy reverse-mode tensor engine (:mod:`audet.tensor`),
synthetic corpus generation and binary storage (:mod:`audet.data`), the
three-branch detector (:mod:`audet.model`), deterministic training
(:mod:`audet.training`), scoring (:mod:`audet.evaluation`) and the
``audet`` command line (:mod:`audet.cli`).
"""

from .data import AU_ORDER, SynthConfig, generate_synthetic, load_corpus, store_corpus
from .evaluation import challenge_metric, evaluate
from .model import ModelConfig, ModelParams, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AU_ORDER",
    "SynthConfig",
    "generate_synthetic",
    "load_corpus",
    "store_corpus",
    "challenge_metric",
    "evaluate",
    "ModelConfig",
    "ModelParams",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "train",
    "__version__",
]
