"""Adversarial latent mixing on Color-MNIST-style data, from a numpy autodiff core up."""

from .autodiff import Tensor, backward
from .generators import FactorLatent, LearnedDecoder, ProceduralGlyphDecoder, ToyDecoder, decode, mix
from .attacks import LatentAttackConfig, latent_pgd, latent_pgd_batch
from .inversion import EncoderConfig, FeatureNet, encode, invert_procedural
from .models import Classifier
from .training import RegimeConfig, TrainingData, train

__all__ = [
    "Tensor", "backward", "FactorLatent", "LearnedDecoder", "ProceduralGlyphDecoder", "ToyDecoder",
    "decode", "mix", "LatentAttackConfig", "latent_pgd", "latent_pgd_batch", "EncoderConfig",
    "FeatureNet", "encode", "invert_procedural", "Classifier", "RegimeConfig", "TrainingData", "train",
]
__version__ = "0.1.0"
