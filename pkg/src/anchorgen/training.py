"""Training loop: AdamW with decoupled weight decay and global-norm clipping.

Batches are plain gradient accumulation over single examples in a seeded
shuffle order, so runs are bit-reproducible for a fixed optimizer seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import kernels
from .autograd import Tape, Tensor
from .errors import ConfigurationError, DivergenceError
from .models import FULL_MASK, InputMask, answer_logits, clone_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 8.75e-5
    batch_size: int = 32
    epochs: int = 10
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.learning_rate < 0:
            problems.append("learning_rate must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.clip_norm <= 0:
            problems.append("clip_norm must be > 0")
        if problems:
            raise ConfigurationError("; ".join(problems))


class AdamW:
    def __init__(self, params: dict[str, Tensor], opt: OptimizerConfig):
        self.opt = opt
        self.params = params
        self.m = {k: np.zeros(t.data.size) for k, t in params.items()}
        self.v = {k: np.zeros(t.data.size) for k, t in params.items()}
        self.step_count = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        o = self.opt
        for name, tensor in self.params.items():
            kernels.adamw_update(
                tensor.data.reshape(-1),
                grads[name].reshape(-1),
                self.m[name],
                self.v[name],
                self.step_count,
                o.learning_rate,
                o.beta1,
                o.beta2,
                o.eps,
                o.weight_decay,
            )

    def state(self):
        shapes = {k: t.data.shape for k, t in self.params.items()}
        return {
            "m": {k: self.m[k].reshape(shapes[k]) for k in self.m},
            "v": {k: self.v[k].reshape(shapes[k]) for k in self.v},
            "step": self.step_count,
        }


def clip_global_norm(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm > clip_norm and norm > 0:
        factor = clip_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def train(
    params: dict[str, Tensor],
    config,
    dataset,
    loss_fn,
    opt: OptimizerConfig,
    mask: InputMask = FULL_MASK,
):
    """Train a copy of ``params`` on ``dataset`` and return it with the loss curve.

    ``loss_fn(logits, example)`` maps the per-example (T+1, vocab) logits
    tensor to a scalar loss tensor. The curve holds per-epoch mean loss per
    predicted token. A non-finite loss raises DivergenceError with the
    epoch and batch index.
    """
    opt.validate()
    examples = list(dataset)
    if not examples:
        raise ConfigurationError("train requires a non-empty dataset")
    params = clone_params(params)
    optimizer = AdamW(params, opt)
    rng = np.random.default_rng(opt.seed)
    dropout_rng = (
        np.random.default_rng(opt.seed + 1) if config.dropout_rate > 0 else None
    )
    names = list(params)
    curve: list[float] = []
    for epoch in range(opt.epochs):
        order = rng.permutation(len(examples))
        epoch_loss = 0.0
        epoch_tokens = 0
        for batch_index, start in enumerate(range(0, len(order), opt.batch_size)):
            batch = order[start : start + opt.batch_size]
            acc = {name: np.zeros(params[name].shape) for name in names}
            for idx in batch:
                example = examples[idx]
                with Tape() as tape:
                    logits = answer_logits(params, config, example, mask, rng=dropout_rng)
                    loss = loss_fn(logits, example)
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise DivergenceError(epoch, batch_index, f"loss={loss_value!r}")
                grads = tape.gradients(loss, wrt=params.values())
                for name in names:
                    acc[name] += grads[params[name].node_id]
                epoch_loss += loss_value
                epoch_tokens += len(example.answer_tokens) + 1
            inv = 1.0 / len(batch)
            for name in names:
                acc[name] *= inv
            clip_global_norm(acc, opt.clip_norm)
            optimizer.step(acc)
        curve.append(epoch_loss / max(epoch_tokens, 1))
        log.debug("epoch %d mean loss/token %.4f", epoch, curve[-1])
    return params, curve, optimizer.state()
