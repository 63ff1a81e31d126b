"""Cross-spectral ViT body recognition with side-information embeddings, at desk scale.

Pure numpy: a small reverse-mode autodiff tape, a ViT with cls / local tokens
and an additive side-information table, batch-hard triplet + identity
losses, PK sampling, SGD training and CMC / mAP evaluation. Hot loops live
in :mod:`xspec.kernels` (numba, with a numpy fallback).
"""
from .autodiff import Tape, Tensor, backward, gradcheck, gradcheck_params
from .data import (BBox, Dataset, ImageRecord, SieScheme, SynthConfig, assign_identity_by_iou, assign_sie_index,
                   iou, load_manifest, sample_batch, synth_generate)
from .errors import XSpecError
from .evaluate import build_protocol, cmc, evaluate_protocol, extract_features, mean_ap
from .losses import LossConfig, batch_hard_triplet, cross_entropy_id, total_loss
from .model import ModelConfig, ModelParams, forward, forward_batch, init_params
from .trainer import TrainConfig, lr_at, train

__version__ = "0.1.0"
