"""Compact fMRI tokenization with a 2D autoencoder and a long-sequence Transformer."""
from .autoencoder import LosslessAutoencoder, TinyConvAutoencoder, load_external_autoencoder, reference_lossless_ae
from .data import SynthSpec, TargetRecord, Volume4D, load_nifti, make_split, preprocess_volume, synthesize_scan
from .model import BrainTransformer, ModelConfig
from .pretrain import MaskedTokenModel, apply_mask, make_tube_mask, mtm_loss
from .tokenizer import TokenSequence, cache_read, cache_write, tokenize_frame, tokenize_sequence
from .training import MetricsReport, TrainConfig, compute_metrics, sliding_eval, train

__version__ = "0.1.0"
