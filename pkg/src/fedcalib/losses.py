"""Training objectives: cross-entropy plus optional calibration regularizers.

The two regularizers penalize the gap between mean confidence and mean
accuracy, per batch (DCA) or per class (MDCA). Both treat the correctness
indicators as constants: gradients flow only through the predicted
probabilities, and the sign of the gap is held fixed at the evaluation
point (sign(0) is defined as 0 so a perfectly matched batch produces no
spurious gradient).

All gradients here are taken with respect to the predicted probabilities;
the softmax chain is applied downstream by the model's backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import PROB_CLAMP, ProbBatch
from .errors import InvalidInputError

AUX_KINDS = ("none", "dca", "mdca")


@dataclass(frozen=True)
class LossSpec:
    """Which auxiliary calibration loss to add, and with what weight."""

    aux_kind: str = "none"
    aux_weight: float = 1.0

    def __post_init__(self):
        if self.aux_kind not in AUX_KINDS:
            raise InvalidInputError(f"aux_kind must be one of {AUX_KINDS}, got {self.aux_kind!r}")
        if self.aux_weight < 0:
            raise InvalidInputError(f"aux_weight must be non-negative, got {self.aux_weight}")


@dataclass(frozen=True)
class LossValue:
    """Total objective with its parts and the gradient w.r.t. probabilities."""

    total: float
    ce_part: float
    aux_part: float
    grad_wrt_probs: np.ndarray  # batch x C


def ce_loss(batch: ProbBatch) -> LossValue:
    """Mean cross-entropy, probabilities clamped at 1e-12 before the log.

    Gradient w.r.t. probabilities is -1/(m * p_true) on true-class entries
    (using the clamped value, so saturated rows stay finite) and 0 elsewhere.
    """
    m = batch.n
    p_true = np.maximum(batch.probs[np.arange(m), batch.labels], PROB_CLAMP)
    value = float(-np.mean(np.log(p_true)))
    grad = np.zeros_like(batch.probs)
    grad[np.arange(m), batch.labels] = -1.0 / (m * p_true)
    return LossValue(total=value, ce_part=value, aux_part=0.0, grad_wrt_probs=grad)


def _sign(x: float) -> float:
    if x > 0:
        return 1.0
    if x < 0:
        return -1.0
    return 0.0


def dca_loss(batch: ProbBatch) -> LossValue:
    """|mean correctness - mean true-class confidence| over the minibatch."""
    m = batch.n
    correct = (batch.predictions() == batch.labels).astype(np.float64)
    s = batch.probs[np.arange(m), batch.labels]
    gap = float(correct.mean() - s.mean())
    value = abs(gap)
    sign = _sign(gap)
    grad = np.zeros_like(batch.probs)
    # correctness indicators are constants; only s carries gradient
    grad[np.arange(m), batch.labels] = -sign / m
    return LossValue(total=value, ce_part=0.0, aux_part=value, grad_wrt_probs=grad)


def mdca_loss(batch: ProbBatch) -> LossValue:
    """Class-wise confidence/accuracy gap, averaged over all classes."""
    m, num_classes = batch.probs.shape
    if num_classes < 2:
        raise InvalidInputError("mdca requires at least 2 classes")
    onehot = np.zeros_like(batch.probs)
    onehot[np.arange(m), batch.labels] = 1.0
    gaps = onehot.mean(axis=0) - batch.probs.mean(axis=0)  # per class j
    value = float(np.mean(np.abs(gaps)))
    signs = np.sign(gaps)
    grad = np.tile(-signs / (num_classes * m), (m, 1))
    return LossValue(total=value, ce_part=0.0, aux_part=value, grad_wrt_probs=grad)


def total_loss(batch: ProbBatch, spec: LossSpec) -> LossValue:
    """Cross-entropy plus the weighted auxiliary term from ``spec``."""
    ce = ce_loss(batch)
    if spec.aux_kind == "none":
        return ce
    aux = dca_loss(batch) if spec.aux_kind == "dca" else mdca_loss(batch)
    beta = spec.aux_weight
    return LossValue(
        total=ce.ce_part + beta * aux.aux_part,
        ce_part=ce.ce_part,
        aux_part=aux.aux_part,
        grad_wrt_probs=ce.grad_wrt_probs + beta * aux.grad_wrt_probs,
    )
