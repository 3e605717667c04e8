"""Training objectives: report cross-entropy, expert binary cross-entropy,
and their weighted combination.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ContractError,
    Tensor,
    hadamard,
    logsumexp,
    mul,
    softplus,
    take_last,
    tmean,
    tsum,
)


def generation_loss(logits: Tensor, targets, pad_mask=None) -> Tensor:
    """Mean next-token cross-entropy over the unpadded positions.

    logits [.., T, V], targets [.., T] integer ids, pad_mask [.., T]
    truthy where the position counts. CE decomposes as
    logsumexp(row) - row[target], which stays finite for any logit scale.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"logits {logits.shape} do not align with targets {targets.shape}")
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ContractError(f"target id outside vocabulary of {v}")
    if pad_mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    else:
        mask = np.asarray(pad_mask).astype(bool)
        if mask.shape != targets.shape:
            raise ContractError(f"pad_mask {mask.shape} does not align with targets {targets.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("every position is padding; the loss is undefined")
    nll = logsumexp(logits, axis=-1) + mul(take_last(logits, targets), -1.0)
    masked = hadamard(nll, Tensor(mask.astype(logits.dtype)))
    return mul(tsum(masked), 1.0 / count)


def classification_loss(s: Tensor, labels) -> Tensor:
    """Binary cross-entropy on expert logits, summed over categories and
    averaged over the batch: softplus(s) - c * s per category.
    """
    labels = np.asarray(labels)
    if labels.shape != s.shape:
        raise ContractError(f"labels {labels.shape} do not align with logits {s.shape}")
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    c = Tensor(labels.astype(s.dtype))
    per = softplus(s) + mul(hadamard(c, s), -1.0)
    summed = tsum(per, axis=-1)
    return tmean(summed) if summed.ndim else summed


@dataclass
class LossReport:
    total: Tensor
    generation: float
    classification: float
    lam: float


def total_loss(l_gen: Tensor, l_cls: Tensor | None, lam: float) -> LossReport:
    """total = l_gen + lam * l_cls; lam=0 or a missing l_cls drops the term."""
    if lam < 0:
        raise ContractError(f"loss weight must be >= 0, got {lam}")
    if l_cls is None or lam == 0.0:
        cls_val = 0.0 if l_cls is None else float(l_cls.data)
        return LossReport(l_gen, float(l_gen.data), cls_val, lam)
    total = l_gen + mul(l_cls, lam)
    return LossReport(total, float(l_gen.data), float(l_cls.data), lam)
