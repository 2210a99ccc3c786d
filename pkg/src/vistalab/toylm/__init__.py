from .model import LmConfig, ToyLm, generate, lm_forward
from .train import PretrainConfig, TrainingFailure, heldout_loss, lm_loss, pad_batch, pretrain_lm
from .vocab import BOS, EOS, IMG, PAD, TokenVocab

__all__ = [
    "LmConfig", "ToyLm", "generate", "lm_forward", "PretrainConfig", "TrainingFailure",
    "heldout_loss", "lm_loss", "pad_batch", "pretrain_lm", "BOS", "EOS", "IMG", "PAD",
    "TokenVocab",
]
