"""Cross-resolution person re-identification with a resolution-adversarial GAN."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledImage, MlrDataset, load_dataset, make_toy_dataset, save_dataset
from .metrics import EvalReport, evaluate
from .trainer import TrainConfig, Trainer, train

__all__ = [
    "EvalReport",
    "LabeledImage",
    "MlrDataset",
    "TrainConfig",
    "Trainer",
    "evaluate",
    "load_checkpoint",
    "load_dataset",
    "make_toy_dataset",
    "save_checkpoint",
    "save_dataset",
    "train",
]
