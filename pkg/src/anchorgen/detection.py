"""Stage 1: per-token anchor degrees from trained models.

Two detectors are provided. The perplexity detector scores each gold
answer token by its negative log-probability under a fully-informed model.
The counterfactual detector scores it by the absolute log-probability gap
between a knowledge-deprived model (P1) and the fully-informed model (P2);
restricting which streams P1 keeps turns the gap into a modality-specific
anchor degree. Both run with dropout disabled and are deterministic
functions of the checkpoints they read.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation, ParseError, UndefinedAUCError
from .models import FULL_MASK, QUESTION_ONLY, InputMask, token_logprobs

WEIGHTS_SCHEMA = 1

METHOD_PERPLEXITY = "P"
METHOD_COUNTERFACTUAL = "CF"
METHOD_BASELINE = "baseline"  # all-zero raw weights; normalizes to all-ones
METHODS = (METHOD_PERPLEXITY, METHOD_COUNTERFACTUAL, METHOD_BASELINE)


@dataclass
class AnchorWeights:
    example_id: int
    weights: np.ndarray
    method: str
    p1_mask: InputMask | None = None
    smoothing: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.method not in METHODS:
            raise ContractViolation(f"unknown detection method {self.method!r}")
        if self.weights.ndim != 1:
            raise ContractViolation("weights must be a 1-D vector")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ContractViolation("weights must be finite and nonnegative")


@dataclass(frozen=True)
class CausalQuery:
    """Outcomes under the three treatment/mediator settings."""

    y_factual: float  # Y_{x, M_x}
    y_mediator_null: float  # Y_{x, M_{x*}}
    y_null: float  # Y_{x*, M_{x*}}

    def __post_init__(self):
        for name in ("y_factual", "y_mediator_null", "y_null"):
            if not np.isfinite(getattr(self, name)):
                raise ContractViolation(f"{name} must be finite")


def causal_effects(query: CausalQuery):
    """(TE, TIE, NDE) with the identity TE == TIE + NDE exact by construction.

    TE = Y_{x,M_x} - Y_{x*,M_{x*}} and TIE = Y_{x,M_x} - Y_{x,M_{x*}} follow
    their definitions directly; NDE is computed as TE - TIE, which equals
    Y_{x,M_{x*}} - Y_{x*,M_{x*}} up to one rounding unit and keeps the
    decomposition bit-exact.
    """
    te = query.y_factual - query.y_null
    tie = query.y_factual - query.y_mediator_null
    nde = te - tie
    return te, tie, nde


def perplexity_weights(model, example) -> AnchorWeights:
    """Anchor degree -log P(y_t | K, Q, Y_<t) under a fully-informed model."""
    params, config = model
    lp = token_logprobs(params, config, example, FULL_MASK)
    return AnchorWeights(example.id, -lp, METHOD_PERPLEXITY)


def cf_weights_from_logprobs(lp_deprived, lp_full) -> np.ndarray:
    lp_deprived = np.asarray(lp_deprived, dtype=np.float64)
    lp_full = np.asarray(lp_full, dtype=np.float64)
    if lp_deprived.shape != lp_full.shape:
        raise ContractViolation(
            f"logprob length mismatch: {lp_deprived.shape} vs {lp_full.shape}"
        )
    return np.abs(lp_deprived - lp_full)


def counterfactual_weights(
    model_deprived, model_full, example, p1_mask: InputMask = QUESTION_ONLY
) -> AnchorWeights:
    """Anchor degree |log P1(y_t) - log P2(y_t)| per answer token.

    ``model_deprived`` must have been trained under ``p1_mask``; leaving
    only the question measures the full knowledge effect, while keeping a
    subset of streams in P1 measures the anchor degree of the ablated ones.
    """
    params1, config1 = model_deprived
    params2, config2 = model_full
    if config1.vocab_size != config2.vocab_size:
        raise ContractViolation(
            f"vocab mismatch between models: {config1.vocab_size} vs {config2.vocab_size}"
        )
    lp1 = token_logprobs(params1, config1, example, p1_mask)
    lp2 = token_logprobs(params2, config2, example, FULL_MASK)
    weights = cf_weights_from_logprobs(lp1, lp2)
    return AnchorWeights(example.id, weights, METHOD_COUNTERFACTUAL, p1_mask=p1_mask)


def smooth_weights(weights: AnchorWeights, s: float) -> AnchorWeights:
    """Convex smoothing toward the sentence mean: w <- (1-s) w + s mean(w).

    Preserves nonnegativity and the sentence mean; s=0 is the identity and
    s=1 collapses every entry to the mean.
    """
    if not 0.0 <= s <= 1.0:
        raise ConfigurationError(f"smooth rate must be in [0, 1], got {s}")
    w = weights.weights
    smoothed = (1.0 - s) * w + s * (w.mean() if w.size else 0.0)
    return AnchorWeights(
        weights.example_id, smoothed, weights.method, weights.p1_mask, smoothing=s
    )


# ---------------------------------------------------------------------------
# detection quality against planted ground truth
# ---------------------------------------------------------------------------


def _rankdata(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based); ties share the mean of their rank span."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outranks a random negative; ties count 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(
            f"rank AUC undefined: {n_pos} positives, {n_neg} negatives"
        )
    ranks = _rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def detection_quality(weight_list, anchor_masks, k: int | None = None):
    """(pooled rank AUC, mean per-example precision at k) for a dataset.

    ``anchor_masks`` maps example id to its boolean mask and must cover
    every weight record. k defaults to each example's true anchor count;
    examples without a positive are skipped in the precision average.
    """
    pooled_scores, pooled_labels = [], []
    precisions = []
    for aw in weight_list:
        if aw.example_id not in anchor_masks:
            raise ContractViolation(f"no anchor mask for example {aw.example_id}")
        mask = np.asarray(anchor_masks[aw.example_id], dtype=bool)
        if mask.shape != aw.weights.shape:
            raise ContractViolation(
                f"example {aw.example_id}: mask length {mask.shape} "
                f"!= weights length {aw.weights.shape}"
            )
        pooled_scores.append(aw.weights)
        pooled_labels.append(mask)
        n_pos = int(mask.sum())
        kk = n_pos if k is None else min(k, len(mask))
        if kk > 0 and n_pos > 0:
            top = np.argsort(-aw.weights, kind="stable")[:kk]
            precisions.append(float(mask[top].mean()))
    auc = rank_auc(np.concatenate(pooled_scores), np.concatenate(pooled_labels))
    precision = float(np.mean(precisions)) if precisions else 0.0
    return auc, precision


# ---------------------------------------------------------------------------
# weight file format: header line, then one record per example
# ---------------------------------------------------------------------------


def save_weights(path, weight_list) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            json.dumps({"schema_version": WEIGHTS_SCHEMA, "kind": "anchor_weights"})
            + "\n"
        )
        for aw in weight_list:
            record = {
                "example_id": aw.example_id,
                "method": aw.method,
                "p1_mask": aw.p1_mask.as_dict() if aw.p1_mask else None,
                "s": aw.smoothing,
                "weights": [float(w) for w in aw.weights],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_weights(path) -> list[AnchorWeights]:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty weight file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: bad header: {e}", line=1) from None
    if header.get("kind") != "anchor_weights" or header.get("schema_version") != WEIGHTS_SCHEMA:
        raise ParseError(f"{path}: not a compatible weight file", line=1)
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            mask = rec.get("p1_mask")
            out.append(
                AnchorWeights(
                    example_id=int(rec["example_id"]),
                    weights=np.asarray(rec["weights"], dtype=np.float64),
                    method=rec["method"],
                    p1_mask=InputMask.from_dict(mask) if mask else None,
                    smoothing=float(rec.get("s", 0.0)),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ContractViolation) as e:
            raise ParseError(f"{path}: bad weight record: {e}", line=lineno) from None
    return out
