import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xspec import autodiff as ad
from xspec.autodiff import Tape, Tensor
from xspec.errors import ContractError, ParameterError
from xspec.losses import LossConfig, batch_hard_triplet, cross_entropy_id, pairwise_dist, total_loss


def triplet_oracle(feats, labels, margin):
    """Triple loop over anchors, positives and negatives with math.dist."""
    n = len(labels)
    total = 0.0
    for a in range(n):
        hardest_pos = max(math.dist(feats[a], feats[p]) for p in range(n) if labels[p] == labels[a])
        hardest_neg = min(math.dist(feats[a], feats[q]) for q in range(n) if labels[q] != labels[a])
        total += max(0.0, margin + hardest_pos - hardest_neg)
    return total


def pk_batch(rng, P, K, d=8):
    labels = np.repeat(rng.choice(50, size=P, replace=False), K)
    return rng.normal(size=(P * K, d)), labels


# ---------------------------------------------------------------------------
# pairwise distances
# ---------------------------------------------------------------------------

def test_pairwise_dist_small_cases():
    d = pairwise_dist(np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]])).data
    assert d[0, 1] == 5.0 and d[0, 2] == 0.0
    assert np.array_equal(np.diag(d), np.zeros(3)) and np.array_equal(d, d.T)


def test_pairwise_dist_matches_double_loop():
    x = np.random.default_rng(0).normal(size=(8, 4))
    d = pairwise_dist(x).data
    ref = np.array([[math.dist(a, b) for b in x] for a in x])
    assert np.abs(d - ref).max() < 1e-10


def test_pairwise_dist_gradcheck_and_zero_subgradient():
    x = np.random.default_rng(1).normal(size=(5, 3))
    c = np.random.default_rng(2).normal(size=(5, 5))
    assert ad.gradcheck(lambda t: ad.sum_(ad.mul(pairwise_dist(t), c)), Tensor(x)).max_rel_err < 1e-6
    dup = Tensor(np.vstack([x[:1], x[:1]]), requires_grad=True)
    with Tape():
        y = pairwise_dist(dup).sum()
    ad.backward(y)
    assert np.array_equal(dup.grad, np.zeros_like(dup.data))


# ---------------------------------------------------------------------------
# batch-hard triplet
# ---------------------------------------------------------------------------

def test_identical_features_give_pk_margin():
    labels = np.repeat([0, 1], 2)
    assert abs(batch_hard_triplet(np.ones((4, 3)), labels, 0.3).item() - 1.2) < 1e-15


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.floats(0.0, 5.0))
def test_identical_features_exactly_pk_margin(P, K, margin):
    labels = np.repeat(np.arange(P), K)
    assert batch_hard_triplet(np.zeros((P * K, 2)), labels, margin).item() == P * K * margin


def test_separated_clusters_give_zero():
    labels = np.repeat([0, 1, 2], 3)
    feats = np.repeat(np.eye(3) * 10.0, 3, axis=0)
    assert batch_hard_triplet(feats, labels, 0.3).item() == 0.0


def test_random_batch_matches_oracle():
    feats, labels = pk_batch(np.random.default_rng(3), 4, 4)
    assert abs(batch_hard_triplet(feats, labels, 0.3).item() - triplet_oracle(feats, labels, 0.3)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(2, 5), st.integers(1, 8), st.floats(0.0, 2.0), st.integers(0, 2**31))
def test_triplet_oracle_property(P, K, d, margin, seed):
    feats, labels = pk_batch(np.random.default_rng(seed), P, K, d)
    assert abs(batch_hard_triplet(feats, labels, margin).item() - triplet_oracle(feats, labels, margin)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(2, 5), st.integers(0, 2**31))
def test_triplet_permutation_invariant(P, K, seed):
    rng = np.random.default_rng(seed)
    feats, labels = pk_batch(rng, P, K)
    perm = rng.permutation(len(labels))
    a = batch_hard_triplet(feats, labels, 0.3).item()
    b = batch_hard_triplet(feats[perm], labels[perm], 0.3).item()
    assert abs(a - b) < 1e-12


def test_triplet_scales_linearly_without_margin():
    feats, labels = pk_batch(np.random.default_rng(4), 3, 3)
    base = batch_hard_triplet(feats, labels, 0.0).item()
    for c in (0.5, 2.0, 7.0):
        assert abs(batch_hard_triplet(c * feats, labels, 0.0).item() - c * base) < 1e-12 * max(1.0, c * base)


def test_triplet_gradcheck():
    feats, labels = pk_batch(np.random.default_rng(5), 3, 4, 5)
    rep = ad.gradcheck(lambda t: batch_hard_triplet(t, labels, 0.3), Tensor(feats))
    assert rep.max_rel_err < 1e-6


@pytest.mark.parametrize("labels", [[0, 0, 1], [0, 0, 0, 0], [0, 0, 1, 1, 1, 1]])
def test_triplet_rejects_bad_batches(labels):
    with pytest.raises(ContractError):
        batch_hard_triplet(np.zeros((len(labels), 2)), labels, 0.3)


# ---------------------------------------------------------------------------
# cross-entropy and total
# ---------------------------------------------------------------------------

def test_uniform_logits_give_log_c():
    assert abs(cross_entropy_id(np.zeros((3, 10)), [0, 4, 9]).item() - 2.302585092994045684) < 1e-15


def test_saturated_logit_gives_near_zero():
    logits = np.zeros((2, 5))
    logits[[0, 1], [1, 3]] = 1000.0
    assert 0.0 <= cross_entropy_id(logits, [1, 3]).item() < 1e-6


def test_ce_matches_definition():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(8, 5)) * 3
    labels = rng.integers(0, 5, size=8)
    ref = np.mean([-(logits[i, labels[i]] - math.log(sum(math.exp(v) for v in logits[i]))) for i in range(8)])
    assert abs(cross_entropy_id(logits, labels).item() - ref) < 1e-12
    assert ad.gradcheck(lambda t: cross_entropy_id(t, labels), Tensor(logits)).max_rel_err < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 2**31))
def test_ce_nonnegative(n, c, seed):
    rng = np.random.default_rng(seed)
    assert cross_entropy_id(rng.normal(size=(n, c)) * 20, rng.integers(0, c, size=n)).item() >= 0.0


def test_ce_label_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy_id(np.zeros((2, 3)), [0, 3])


def test_total_loss_weighting():
    ce, tri = Tensor(2.0), Tensor(0.5)
    assert total_loss(ce, tri, 0.0).item() == 2.0
    assert total_loss(ce, tri, 1.0).item() == 2.5
    assert total_loss(ce, tri, 2.0).item() == 3.0
    assert LossConfig().lambda_t == 1.0 and LossConfig().margin == 0.3


def test_loss_config_validation():
    with pytest.raises(ParameterError):
        LossConfig(margin=-0.1)
    with pytest.raises(ParameterError):
        LossConfig(lambda_t=-1.0)
