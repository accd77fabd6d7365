"""Traffic-sign recognition with a convolutional encoder trained against clean
per-class templates through a weight-shared siamese branch.

Everything runs on numpy: a small reverse-mode tensor engine, the encoder,
augmentation, datasets, training, evaluation and numerical self-checks.
"""
from .encoder import EncoderConfig, build_encoder, encode, param_count
from .siamese import SiameseConfig, contrastive_loss, distance
from .trainer import TrainConfig, build_model, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig", "build_encoder", "encode", "param_count", "SiameseConfig", "contrastive_loss", "distance",
    "TrainConfig", "build_model", "load_checkpoint", "save_checkpoint", "train",
]
