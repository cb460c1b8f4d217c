"""Training objective: weighted batch-all triplet loss plus part-wise cross-entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.1
    margin: float = 0.2
    num_classes: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.margin <= 0:
            raise ConfigError("triplet margin must be positive")


def pairwise_distances(x):
    """Euclidean distances per part. x: (S, B, D) -> (S, B, B)."""
    sq = (x * x).sum(-1)
    d2 = sq.unsqueeze(2) + sq.unsqueeze(1) - 2 * torch.matmul(x, x.transpose(1, 2))
    # clamp keeps sqrt differentiable at zero distance
    return d2.clamp_min(1e-12).sqrt()


def triplet_indices(labels):
    """All (anchor, positive, negative) index triples valid for ``labels``."""
    labels = torch.as_tensor(labels)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    valid = (same & ~eye).unsqueeze(2) & (~same).unsqueeze(1)
    return valid.nonzero(as_tuple=True)


def triplet_losses(embeddings, labels, margin):
    """Hinge values for every valid triplet: (S, T)."""
    if embeddings.shape[0] != len(labels):
        raise ShapeError(f"{embeddings.shape[0]} embeddings but {len(labels)} labels")
    a, p, n = triplet_indices(labels)
    dist = pairwise_distances(embeddings.transpose(0, 1))
    return F.relu(margin + dist[:, a, p] - dist[:, a, n])


def triplet_loss(embeddings, labels, margin=0.2):
    """Batch-all triplet loss on (B, S, D) part embeddings.

    Per part, the hinge is averaged over the triplets with a non-zero loss;
    parts are then averaged. Returns 0 when no valid or active triplet exists.
    """
    hinge = triplet_losses(embeddings, labels, margin)
    active = (hinge > 0).sum(-1)
    per_part = hinge.sum(-1) / active.clamp_min(1)
    return per_part.mean() if per_part.numel() else embeddings.sum() * 0


class PartClassifier(nn.Module):
    """Per-part batch norm followed by a per-part bias-free linear classifier."""

    def __init__(self, num_parts, dim, num_classes):
        super().__init__()
        if num_classes < 1:
            raise ConfigError("classifier needs at least one class")
        self.num_classes = num_classes
        self.bn = nn.BatchNorm1d(num_parts * dim)
        self.weight = nn.Parameter(torch.empty(num_parts, dim, num_classes))
        nn.init.normal_(self.weight, std=1.0 / math.sqrt(dim))

    def forward(self, embeddings):
        b, s, d = embeddings.shape
        z = self.bn(embeddings.reshape(b, s * d)).reshape(b, s, d)
        return torch.einsum("bsd,sdk->bsk", z, self.weight)


def ce_from_logits(logits, labels):
    """Softmax cross-entropy averaged over parts and batch. logits: (B, S, K)."""
    labels = torch.as_tensor(labels, device=logits.device)
    b, s, k = logits.shape
    if len(labels) != b:
        raise ShapeError(f"{b} logit rows but {len(labels)} labels")
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label outside [0, {k})")
    return F.cross_entropy(logits.reshape(b * s, k), labels.repeat_interleave(s))


def ce_loss(embeddings, labels, classifier: PartClassifier):
    return ce_from_logits(classifier(embeddings), labels)


def total_loss(embeddings, labels, classifier, cfg: LossConfig):
    """alpha * triplet + beta * ce. Returns (loss tensor, breakdown dict of floats)."""
    labels = torch.as_tensor(labels, device=embeddings.device)
    tri = triplet_loss(embeddings, labels, cfg.margin)
    ce = ce_loss(embeddings, labels, classifier)
    total = cfg.alpha * tri + cfg.beta * ce
    return total, {"triplet": tri.item(), "ce": ce.item(), "total": total.item()}
