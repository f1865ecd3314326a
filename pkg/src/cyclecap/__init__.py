"""Cycle-consistent image/caption GAN training on a small numpy autodiff core."""

from .autodiff import Tensor, backward, grad_check, no_grad, precision
from .data import CaptionDataset, Vocab, preprocess_caption, synth_generate
from .metrics import (MetricReport, binomial_test_two_sided, bleu4, cider, inception_score, meteor_lite,
                      rouge_l)
from .models import ModelBundle, ModelConfig, preset_config
from .training import Checkpoint, TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_check", "no_grad", "precision",
    "CaptionDataset", "Vocab", "preprocess_caption", "synth_generate",
    "MetricReport", "binomial_test_two_sided", "bleu4", "cider", "inception_score", "meteor_lite", "rouge_l",
    "ModelBundle", "ModelConfig", "preset_config",
    "Checkpoint", "TrainConfig", "Trainer", "load_checkpoint", "save_checkpoint",
]
