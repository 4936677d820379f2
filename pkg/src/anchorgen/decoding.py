"""Beam search over any next-token scorer, with length-penalty ranking.

A scorer is a callable mapping a token prefix (the answer generated so
far) to a log-probability vector over the vocabulary. Candidates compete
by cumulative log-probability; a hypothesis that emits the end token
retires its beam slot. Finished and length-capped hypotheses are ranked by
logP / ((5 + len) / 6) ** alpha where len counts generated content tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import LOG_CLAMP
from .errors import ConfigurationError
from .models import EOS, FULL_MASK, InputMask, decoder_logits, serialize_input


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 6
    length_penalty_alpha: float = 0.6
    max_decode_len: int = 24

    def validate(self) -> None:
        problems = []
        if self.beam_size < 1:
            problems.append("beam_size must be >= 1")
        if self.length_penalty_alpha < 0:
            problems.append("length_penalty_alpha must be >= 0")
        if self.max_decode_len < 1:
            problems.append("max_decode_len must be >= 1")
        if problems:
            raise ConfigurationError("; ".join(problems))


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # content tokens, end token excluded
    logprob: float  # includes the end-token step when finished
    score: float  # length-normalized
    finished: bool


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def _ranked(pool, alpha):
    ranked = [
        Hypothesis(tokens, logp, logp / length_penalty(len(tokens), alpha), fin)
        for tokens, logp, fin in pool
    ]
    ranked.sort(key=lambda h: (-h.score, h.tokens))
    return ranked


def _beam_run(score_fn, width: int, max_len: int, eos_id: int):
    """One standard beam run; a finished hypothesis retires its slot."""
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    pool: list[tuple[tuple[int, ...], float, bool]] = []
    slots = width
    for _ in range(max_len):
        if not live or slots <= 0:
            break
        candidates: list[tuple[tuple[int, ...], float, bool]] = []
        for tokens, logp in live:
            logprobs = np.asarray(score_fn(list(tokens)), dtype=np.float64)
            for tok in range(len(logprobs)):
                candidates.append(
                    (
                        tokens if tok == eos_id else tokens + (tok,),
                        logp + float(logprobs[tok]),
                        tok == eos_id,
                    )
                )
        candidates.sort(key=lambda c: (-c[1], c[0]))
        live = []
        for tokens, logp, finished in candidates[:slots]:
            if finished:
                pool.append((tokens, logp, True))
                slots -= 1
            else:
                live.append((tokens, logp))
    pool.extend((tokens, logp, False) for tokens, logp in live)
    return pool


def beam_search(score_fn, cfg: BeamConfig, eos_id: int = EOS) -> list[Hypothesis]:
    """Ranked hypotheses (best first); always returns at least one.

    Uses widening restarts: the returned pool is the union of standard beam
    runs at every width up to beam_size. A single pruned run can return a
    worse top hypothesis at a wider width; the union makes the top score
    non-decreasing in beam_size by construction. Width 1 follows exactly
    the greedy argmax path, and ranking ties break toward lexicographically
    smaller token sequences, matching argmax's preference for the smallest
    token id.
    """
    cfg.validate()
    pool: dict[tuple, tuple] = {}
    for width in range(1, cfg.beam_size + 1):
        for tokens, logp, finished in _beam_run(score_fn, width, cfg.max_decode_len, eos_id):
            pool[(tokens, finished)] = (tokens, logp, finished)
    return _ranked(pool.values(), cfg.length_penalty_alpha)


def greedy_decode(score_fn, max_len: int, eos_id: int = EOS) -> list[int]:
    """Argmax decoding; ties break toward the smallest token id."""
    tokens: list[int] = []
    for _ in range(max_len):
        logprobs = np.asarray(score_fn(tokens), dtype=np.float64)
        tok = int(np.argmax(logprobs))
        if tok == eos_id:
            break
        tokens.append(tok)
    return tokens


def exhaustive_best(score_fn, cfg: BeamConfig, vocab_size: int, eos_id: int = EOS) -> Hypothesis:
    """Brute-force oracle: enumerate every sequence the search could emit.

    Covers end-token-terminated content sequences up to length
    max_decode_len - 1 plus all length-capped sequences, ranked exactly as
    beam_search ranks. Exponential in the cap; tiny instances only.
    """
    pool: list[tuple[tuple[int, ...], float, bool]] = []

    def walk(tokens: tuple[int, ...], logp: float):
        if len(tokens) == cfg.max_decode_len:
            pool.append((tokens, logp, False))
            return
        logprobs = np.asarray(score_fn(list(tokens)), dtype=np.float64)
        pool.append((tokens, logp + float(logprobs[eos_id]), True))
        for tok in range(vocab_size):
            if tok != eos_id:
                walk(tokens + (tok,), logp + float(logprobs[tok]))

    walk((), 0.0)
    return _ranked(pool, cfg.length_penalty_alpha)[0]


def model_score_fn(params, config, example, mask: InputMask = FULL_MASK):
    """Next-token log-probability scorer for a trained backbone.

    The prefix passed by the search is the answer generated so far; the
    full decoder input is rebuilt and re-scored each step.
    """
    enc, prefix = serialize_input(example, mask, config.max_len)

    def score(generated: list[int]) -> np.ndarray:
        dec_in = prefix + list(generated)
        if len(dec_in) > config.max_len:
            dec_in = dec_in[: config.max_len]
        logits = decoder_logits(params, config, enc, dec_in)
        probs = ag.softmax(ag.gather_rows(logits, [len(dec_in) - 1])).data[0]
        return np.log(np.maximum(probs, LOG_CLAMP))

    return score


def decode_answer(params, config, example, cfg: BeamConfig, mask: InputMask = FULL_MASK):
    """Top beam-search hypothesis tokens for one example."""
    score = model_score_fn(params, config, example, mask)
    if cfg.beam_size == 1:
        return greedy_decode(score, cfg.max_decode_len)
    return list(beam_search(score, cfg)[0].tokens)
