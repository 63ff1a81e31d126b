"""Identity cross-entropy, batch-hard triplet loss and their weighted total."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ContractError, ParameterError


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.3
    lambda_t: float = 1.0

    def __post_init__(self):
        if self.margin < 0:
            raise ParameterError(f"loss.margin must be nonnegative, got {self.margin}")
        if self.lambda_t < 0:
            raise ParameterError(f"loss.lambda_t must be nonnegative, got {self.lambda_t}")


def pairwise_dist(features):
    return ad.pairwise_dist(features)


def check_pk_labels(labels):
    """Validate P x K batch structure; returns ``(P, K)``."""
    counts = Counter(np.asarray(labels).tolist())
    if len(counts) < 2:
        raise ContractError(f"batch needs at least 2 identities, got {len(counts)}")
    sizes = set(counts.values())
    if min(sizes) < 2:
        lonely = sorted(k for k, v in counts.items() if v < 2)
        raise ContractError(f"labels {lonely} have a single sample; hardest positive undefined")
    if len(sizes) != 1:
        raise ContractError(f"unequal samples per identity: {dict(counts)}")
    return len(counts), sizes.pop()


def batch_hard_triplet(features, labels, margin=0.3):
    """Sum over anchors of ``[m + max_pos D - min_neg D]_+``.

    The hardest pairs are mined on the forward values; gradients flow through
    the selected distance entries only.
    """
    labels = np.asarray(labels, dtype=np.int64)
    check_pk_labels(labels)
    features = ad.as_tensor(features)
    if features.shape[0] != labels.shape[0]:
        raise ContractError(f"{features.shape[0]} feature rows but {labels.shape[0]} labels")
    dist = ad.pairwise_dist(features)
    pos, neg = kernels.hardest_pairs(dist.data, labels)
    rows = np.arange(labels.shape[0])
    hinge = ad.relu(dist[rows, pos] - dist[rows, neg] + float(margin))
    return ad.fsum(hinge)


def cross_entropy_id(logits, labels):
    """Mean negative log-softmax probability of the true identity."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise ContractError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if ((labels < 0) | (labels >= n_classes)).any():
        raise IndexError(f"identity label out of range [0, {n_classes})")
    logp = ad.log_softmax(logits, axis=-1)
    return -ad.mean(logp[np.arange(labels.shape[0]), labels])


def total_loss(ce, tri, lambda_t=1.0):
    return ce + ad.scale(tri, lambda_t)
