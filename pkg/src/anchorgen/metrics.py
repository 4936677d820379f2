"""Corpus metrics: BLEU-1..4, ROUGE-L, exact match, anchor-token accuracy,
token perplexity, and the rank statistics shared with detection."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .detection import _rankdata
from .errors import ContractViolation
from .models import FULL_MASK, token_logprobs


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, n: int) -> float:
    """Corpus BLEU-n: clipped modified precision with brevity penalty.

    Higher-order precisions (k > 1) use add-one smoothing so that short
    desk-scale sentences do not zero out the whole score; unigram counts
    are unsmoothed.
    """
    if not 1 <= n <= 4:
        raise ContractViolation(f"BLEU order must be in 1..4, got {n}")
    if not candidates or len(candidates) != len(references):
        raise ContractViolation("BLEU requires aligned non-empty corpora")
    log_precisions = []
    for k in range(1, n + 1):
        clipped, total = 0, 0
        for cand, ref in zip(candidates, references):
            cand_counts = _ngrams(cand, k)
            ref_counts = _ngrams(ref, k)
            clipped += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            total += sum(cand_counts.values())
        if k > 1:
            clipped += 1
            total += 1
        if clipped == 0 or total == 0:
            return 0.0
        log_precisions.append(math.log(clipped / total))
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    if cand_len == 0:
        return 0.0
    brevity = min(1.0, math.exp(1.0 - ref_len / cand_len))
    return brevity * math.exp(sum(log_precisions) / n)


def _lcs_len(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidates, references) -> float:
    """Mean per-example longest-common-subsequence F1."""
    if not candidates or len(candidates) != len(references):
        raise ContractViolation("ROUGE-L requires aligned non-empty corpora")
    scores = []
    for cand, ref in zip(candidates, references):
        if not cand or not ref:
            scores.append(0.0)
            continue
        lcs = _lcs_len(cand, ref)
        if lcs == 0:
            scores.append(0.0)
            continue
        precision = lcs / len(cand)
        recall = lcs / len(ref)
        scores.append(2 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def exact_match(candidates, references) -> float:
    if not candidates or len(candidates) != len(references):
        raise ContractViolation("exact match requires aligned non-empty corpora")
    return float(np.mean([list(c) == list(r) for c, r in zip(candidates, references)]))


def anchor_token_accuracy(generated, references, anchor_masks) -> float:
    """Fraction of anchor positions where the generated token matches.

    Positions beyond the generated length count as wrong. Returns 0.0 when
    no anchor positions exist.
    """
    hits, total = 0, 0
    for gen, ref, mask in zip(generated, references, anchor_masks):
        for pos, is_anchor in enumerate(mask):
            if not is_anchor:
                continue
            total += 1
            if pos < len(gen) and gen[pos] == ref[pos]:
                hits += 1
    return hits / total if total else 0.0


@dataclass
class PerTokenRow:
    example_id: int
    position: int
    token_id: int
    logprob: float

    @property
    def perplexity(self) -> float:
        return math.exp(-self.logprob)


def corpus_perplexity(model, dataset, mask=FULL_MASK):
    """(mean perplexity, per-token rows) over all answer tokens.

    Mean perplexity is exp of the mean negative log-likelihood per token,
    so it is always >= 1.
    """
    params, config = model
    examples = list(dataset)
    if not examples:
        raise ContractViolation("corpus_perplexity requires a non-empty dataset")
    rows: list[PerTokenRow] = []
    total_nll = 0.0
    for ex in examples:
        lp = token_logprobs(params, config, ex, mask)
        for pos, (tok, val) in enumerate(zip(ex.answer_tokens, lp)):
            rows.append(PerTokenRow(ex.id, pos, int(tok), float(val)))
        total_nll -= float(lp.sum())
    mean_ppl = math.exp(total_nll / len(rows))
    return mean_ppl, rows


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks on ties."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ContractViolation("spearman requires two equal-length vectors, n >= 2")
    ra, rb = _rankdata(a), _rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float((ra * ra).sum()) * float((rb * rb).sum()))
    if denom == 0.0:
        return 0.0
    return float((ra * rb).sum() / denom)


@dataclass
class EvalReport:
    """Metrics plus per-example generations and the per-token table."""

    metrics: dict[str, float]
    generated: dict[int, list[int]] = field(default_factory=dict)
    per_token: list[PerTokenRow] = field(default_factory=list)

    def validate(self) -> None:
        bounded = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "exact_match",
                   "anchor_token_accuracy")
        for name in bounded:
            if name in self.metrics and not 0.0 <= self.metrics[name] <= 1.0:
                raise ContractViolation(f"{name}={self.metrics[name]} outside [0, 1]")
        if "mean_perplexity" in self.metrics and self.metrics["mean_perplexity"] < 1.0:
            raise ContractViolation("mean_perplexity below 1")


def evaluate_generations(generated, dataset) -> dict[str, float]:
    """Standard metric block for decoded answers against gold answers."""
    examples = list(dataset)
    refs = [ex.answer_tokens for ex in examples]
    cands = [generated[ex.id] for ex in examples]
    masks = [ex.anchor_mask for ex in examples]
    out = {f"bleu{k}": bleu(cands, refs, k) for k in (1, 2, 3, 4)}
    out["rouge_l"] = rouge_l(cands, refs)
    out["exact_match"] = exact_match(cands, refs)
    out["anchor_token_accuracy"] = anchor_token_accuracy(cands, refs, masks)
    return out
