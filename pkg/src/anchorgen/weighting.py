"""Per-token weight normalization and the weighted temperature-softmax loss.

Raw anchor degrees are mapped into [1, 2] by ``normalize_weights`` and then
act as per-token temperature factors on the output logits: weight w scales
a token's logits before the softmax, which sharpens the distribution for
w > 1 without ever moving the argmax. Weights are constants during
backpropagation; no gradient reaches the detector that produced them.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractViolation
from .models import EOS


def normalize_weights(raw) -> np.ndarray:
    """Map raw nonnegative anchor degrees to final weights 1 + w/sum(w).

    Every output lies in [1, 2] and the sentence total is T + 1 when the
    raw weights are not all zero. An all-zero input falls back to all-ones,
    which reduces the weighted loss to plain cross-entropy.
    """
    raw = np.asarray(getattr(raw, "weights", raw), dtype=np.float64)
    if raw.ndim != 1:
        raise ContractViolation("raw weights must be a 1-D vector")
    if np.any(raw < 0):
        raise ContractViolation("raw weights must be nonnegative")
    total = raw.sum()
    if total == 0.0:
        return np.ones_like(raw)
    return 1.0 + raw / total


def anchor_softmax(logits, weight: float) -> np.ndarray:
    """Probability vector softmax(weight * logits) for a single position."""
    if not weight > 0:
        raise ContractViolation(f"temperature weight must be positive, got {weight}")
    logits = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    scaled = weight * logits
    shifted = scaled - scaled.max()
    e = np.exp(shifted)
    return e / e.sum()


def anchor_loss(logits: Tensor, targets, final_weights) -> Tensor:
    """Weighted negative log-likelihood over one answer.

    ``logits`` holds one row per answer position, ``targets`` the gold token
    ids, and ``final_weights`` the per-position temperature factors. The
    gradient with respect to row t is w_t * (softmax(w_t * logits_t) -
    onehot(y_t)). With all-ones weights this is exactly standard
    cross-entropy, bit for bit.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(final_weights, dtype=np.float64)
    n, vocab = logits.shape
    if targets.shape != (n,) or weights.shape != (n,):
        raise ContractViolation(
            f"anchor_loss length mismatch: {n} logit rows, "
            f"{targets.shape[0]} targets, {weights.shape[0]} weights"
        )
    if np.any(targets < 0) or np.any(targets >= vocab):
        raise ContractViolation("target id out of vocabulary range")
    if np.any(weights <= 0):
        raise ContractViolation("final weights must be positive")
    scaled = ag.multiply(logits, Tensor(weights[:, None]))
    log_probs = ag.log(ag.softmax(scaled))
    onehot = np.zeros((n, vocab))
    onehot[np.arange(n), targets] = 1.0
    picked = ag.multiply(log_probs, Tensor(onehot))
    return ag.scale(ag.sum_all(picked), -1.0)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Standard negative log-likelihood; anchor_loss at unit temperature."""
    n = logits.shape[0]
    return anchor_loss(logits, targets, np.ones(n))


def make_loss_fn(weight_lookup=None):
    """Build a per-example loss over answer tokens plus the trailing [EOS].

    ``weight_lookup`` maps example id to final (normalized) weights for the
    T answer positions; None trains with plain cross-entropy. The [EOS]
    prediction row always carries weight 1.
    """

    def loss_fn(logits: Tensor, example) -> Tensor:
        targets = list(example.answer_tokens) + [EOS]
        if weight_lookup is None:
            weights = np.ones(len(targets))
        else:
            per_token = np.asarray(weight_lookup[example.id], dtype=np.float64)
            if per_token.shape[0] != len(example.answer_tokens):
                raise ContractViolation(
                    f"example {example.id}: weight length {per_token.shape[0]} "
                    f"!= answer length {len(example.answer_tokens)}"
                )
            weights = np.concatenate([per_token, [1.0]])
        return anchor_loss(logits, targets, weights)

    return loss_fn
