"""Detect adversarial images with permutation-test p-values under an
autoregressive pixel density model, and defend classifiers by greedily
purifying inputs back toward the training distribution."""

from .classifier import Classifier, ClassifierConfig, train_adversarial, train_classifier
from .data import LabeledDataset, desk_corpus, generate_shapes
from .density import DensityConfig, DensityModel, bits_per_dimension, log_likelihood, train_density
from .detector import build_index, detect, p_value, roc_curve
from .errors import PixelDefendError
from .purifier import DefenseConfig, defend_and_classify, purify, purify_greedy

__version__ = "0.1.0"

__all__ = [
    "Classifier", "ClassifierConfig", "DefenseConfig", "DensityConfig", "DensityModel", "LabeledDataset",
    "PixelDefendError", "bits_per_dimension", "build_index", "defend_and_classify", "desk_corpus", "detect",
    "generate_shapes", "log_likelihood", "p_value", "purify", "purify_greedy", "roc_curve",
    "train_adversarial", "train_classifier", "train_density",
]
