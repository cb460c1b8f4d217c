import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from smplgait.errors import ConfigError
from smplgait.losses import (
    LossConfig, PartClassifier, ce_from_logits, total_loss, triplet_loss, triplet_losses,
)


def _emb(values):
    """1-D points -> (B, 1, 1) embeddings with a single part."""
    return torch.tensor(values, dtype=torch.float64).reshape(-1, 1, 1)


def oracle_triplet(emb, labels, margin):
    emb = np.asarray(emb, dtype=np.float64)
    per_part = []
    for s in range(emb.shape[1]):
        vals = []
        for a, p, n in itertools.permutations(range(len(labels)), 3):
            if labels[a] == labels[p] and labels[a] != labels[n]:
                d_ap = np.linalg.norm(emb[a, s] - emb[p, s])
                d_an = np.linalg.norm(emb[a, s] - emb[n, s])
                vals.append(max(0.0, margin + d_ap - d_an))
        active = [v for v in vals if v > 0]
        per_part.append(sum(active) / len(active) if active else 0.0)
    return float(np.mean(per_part))


def test_identical_embeddings_give_margin():
    emb = torch.zeros(4, 3, 5, dtype=torch.float64)
    assert triplet_loss(emb, [0, 0, 1, 1], 0.2).item() == pytest.approx(0.2, abs=1e-9)


def test_well_separated_gives_zero():
    assert triplet_loss(_emb([0, 0, 10]), [0, 0, 1], 0.2).item() == pytest.approx(0.0, abs=1e-9)


def test_single_active_triplet():
    # only anchor 1 violates the margin: 0.2 + 1 - 0.5
    assert triplet_loss(_emb([0, 1, 1.5]), [0, 0, 1], 0.2).item() == pytest.approx(0.7, abs=1e-9)


def test_no_valid_triplet_is_zero_with_grad():
    emb = torch.randn(3, 2, 4, dtype=torch.float64, requires_grad=True)
    loss = triplet_loss(emb, [0, 1, 2], 0.2)
    assert loss.item() == 0.0
    loss.backward()


@st.composite
def batches(draw):
    n = draw(st.integers(2, 12))
    labels = draw(st.lists(st.integers(0, 3), min_size=n, max_size=n))
    parts = draw(st.integers(1, 3))
    dim = draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**31))
    emb = np.random.default_rng(seed).normal(size=(n, parts, dim))
    return emb, labels


@given(batches(), st.floats(0.05, 1.0))
@settings(max_examples=80, deadline=None)
def test_triplet_matches_enumeration(batch, margin):
    emb, labels = batch
    got = triplet_loss(torch.from_numpy(emb), labels, margin).item()
    assert abs(got - oracle_triplet(emb, labels, margin)) <= 1e-9


@given(batches(), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_triplet_permutation_invariant_and_nonnegative(batch, seed):
    emb, labels = batch
    perm = np.random.default_rng(seed).permutation(len(labels))
    a = triplet_loss(torch.from_numpy(emb), labels, 0.2).item()
    b = triplet_loss(torch.from_numpy(emb[perm]), [labels[i] for i in perm], 0.2).item()
    assert a >= 0
    assert a == pytest.approx(b, abs=1e-12)


@given(batches(), st.floats(0.01, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=50, deadline=None)
def test_summed_hinge_monotone_in_margin(batch, m1, extra):
    emb, labels = batch
    x = torch.from_numpy(emb)
    low = triplet_losses(x, labels, m1).sum().item()
    high = triplet_losses(x, labels, m1 + extra).sum().item()
    assert high >= low - 1e-12


def test_nonzero_average_not_monotone_in_margin():
    # a larger margin activates a barely-violating triplet and lowers the average
    emb = _emb([0, 1, 0.5, -1.19])
    labels = [0, 0, 1, 2]
    low = triplet_loss(emb, labels, 0.1).item()
    high = triplet_loss(emb, labels, 0.2).item()
    assert low == pytest.approx(0.6, abs=1e-9)
    assert high == pytest.approx(1.41 / 3, abs=1e-9)
    assert high < low


def test_ce_uniform_logits_is_log_k():
    logits = torch.zeros(5, 3, 7, dtype=torch.float64)
    assert ce_from_logits(logits, [0, 1, 2, 3, 6]).item() == pytest.approx(math.log(7), abs=1e-12)


def test_ce_confident_limit_and_two_class_value():
    logits = torch.zeros(1, 1, 4, dtype=torch.float64)
    logits[0, 0, 2] = 200.0
    assert ce_from_logits(logits, [2]).item() < 1e-12
    two = torch.tensor([[[2.0, 0.0]]], dtype=torch.float64)
    assert ce_from_logits(two, [0]).item() == pytest.approx(math.log1p(math.exp(-2)), abs=1e-12)
    assert ce_from_logits(two, [0]).item() == pytest.approx(0.1269, abs=1e-4)
    with pytest.raises(ValueError):
        ce_from_logits(two, [2])


def _zero_classifier(parts, dim, k):
    clf = PartClassifier(parts, dim, k).double()
    with torch.no_grad():
        clf.weight.zero_()
    return clf


@pytest.mark.parametrize("alpha, beta, expected", [
    (1.0, 0.1, 0.2 + 0.1 * math.log(2)),
    (1.0, 0.0, 0.2),
    (0.0, 1.0, math.log(2)),
    (2.0, 0.5, 0.4 + 0.5 * math.log(2)),
])
def test_total_loss_weighting(alpha, beta, expected):
    emb = torch.zeros(4, 2, 3, dtype=torch.float64)
    clf = _zero_classifier(2, 3, 2)
    loss, parts = total_loss(emb, [0, 0, 1, 1], clf, LossConfig(alpha, beta, 0.2))
    assert loss.item() == pytest.approx(expected, abs=1e-9)
    assert parts["triplet"] == pytest.approx(0.2, abs=1e-9)
    assert parts["ce"] == pytest.approx(math.log(2), abs=1e-9)
    assert parts["total"] == loss.item()


def test_default_total_value():
    emb = torch.zeros(4, 2, 3, dtype=torch.float64)
    loss, _ = total_loss(emb, [0, 0, 1, 1], _zero_classifier(2, 3, 2), LossConfig())
    assert loss.item() == pytest.approx(0.26931, abs=1e-5)


def test_loss_config_checks():
    with pytest.raises(ConfigError):
        LossConfig(margin=0)
    with pytest.raises(ConfigError):
        LossConfig(alpha=-1)
    with pytest.raises(ConfigError):
        PartClassifier(2, 3, 0)


def test_gradients_flow_through_both_terms():
    emb = torch.randn(8, 3, 4, dtype=torch.float64, requires_grad=True)
    clf = PartClassifier(3, 4, 4).double()
    loss, _ = total_loss(emb, [0, 0, 1, 1, 2, 2, 3, 3], clf, LossConfig())
    loss.backward()
    assert emb.grad.abs().sum() > 0 and clf.weight.grad.abs().sum() > 0
