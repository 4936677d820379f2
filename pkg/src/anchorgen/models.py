"""Encoder-decoder backbones over the autograd engine.

Two small backbones share one interface: a 2-layer pre-norm transformer and
a 1-layer gated-recurrent model with dot-product attention over encoder
states. Knowledge streams go to the encoder separated by special tokens;
the question is consumed by the decoder as a prefix, and per-token scores
are produced only for answer positions (plus one trailing end-of-answer
prediction used during training and decoding).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, ContractViolation, TruncationError
from .tensorio import load_tensors, save_tensors

# Special token ids. Content vocabularies start at N_SPECIAL.
BOS = 0
EOS = 1
NULL = 2
SEP_VIDEO = 3
SEP_AUDIO = 4
SEP_HISTORY = 5
SEP_QUESTION = 6
SEP_ANSWER = 7
N_SPECIAL = 8

NEG_INF = -1e9

BACKBONE_KINDS = ("transformer", "recurrent")


@dataclass(frozen=True)
class ModelConfig:
    backbone_kind: str
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 64
    dropout_rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.backbone_kind not in BACKBONE_KINDS:
            problems.append(f"backbone_kind must be one of {BACKBONE_KINDS}")
        if self.vocab_size <= N_SPECIAL:
            problems.append(f"vocab_size must exceed {N_SPECIAL} special tokens")
        if self.d_model < 1:
            problems.append("d_model must be positive")
        if self.n_layers < 1:
            problems.append("n_layers must be positive")
        if self.backbone_kind == "transformer":
            if self.n_heads < 1:
                problems.append("n_heads must be positive")
            elif self.d_model % self.n_heads != 0:
                problems.append(
                    f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
                )
        if self.max_len < 4:
            problems.append("max_len too small to hold any serialized input")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append("dropout_rate must be in [0, 1)")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class InputMask:
    """Which knowledge streams the encoder sees; the question always stays."""

    include_video: bool = True
    include_audio: bool = True
    include_history: bool = True
    include_question: bool = True

    def __post_init__(self):
        if not self.include_question:
            raise ConfigurationError("the question cannot be masked out")

    def as_dict(self):
        return {
            "include_video": self.include_video,
            "include_audio": self.include_audio,
            "include_history": self.include_history,
            "include_question": self.include_question,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


FULL_MASK = InputMask()
QUESTION_ONLY = InputMask(include_video=False, include_audio=False, include_history=False)


# ---------------------------------------------------------------------------
# input serialization
# ---------------------------------------------------------------------------


def serialize_input(example, mask: InputMask, max_len: int | None = None):
    """Build (encoder_tokens, decoder_prefix_tokens) for one example.

    The encoder stream is [BOS] <V> V <A> A <H> H [EOS]; a masked stream is
    replaced by its separator followed by a single [NULL] token, keeping the
    separator structure stable under ablation. The decoder prefix is
    <Q> Q <ANS>.
    """
    spans = [
        ("video", SEP_VIDEO, list(example.video_tokens), mask.include_video),
        ("audio", SEP_AUDIO, list(example.audio_tokens), mask.include_audio),
        ("history", SEP_HISTORY, list(example.history_tokens), mask.include_history),
    ]
    encoder = [BOS]
    for _, sep, tokens, included in spans:
        encoder.append(sep)
        encoder.extend(tokens if included else [NULL])
    encoder.append(EOS)
    decoder_prefix = [SEP_QUESTION] + list(example.question_tokens) + [SEP_ANSWER]
    if max_len is not None:
        if len(encoder) > max_len:
            longest = max(spans, key=lambda s: len(s[2]))[0]
            raise TruncationError(
                f"encoder stream length {len(encoder)} exceeds max_len {max_len} "
                f"(longest stream: {longest})"
            )
        total_dec = len(decoder_prefix) + len(example.answer_tokens)
        if total_dec > max_len:
            raise TruncationError(
                f"decoder stream length {total_dec} exceeds max_len {max_len} "
                "(longest stream: answer)"
            )
    return encoder, decoder_prefix


def deserialize_input(encoder_tokens):
    """Recover the modality spans from a serialized encoder stream.

    Returns a dict with keys video/audio/history; a span that was masked
    (separator followed by [NULL]) maps to None.
    """
    toks = list(encoder_tokens)
    if not toks or toks[0] != BOS or toks[-1] != EOS:
        raise ContractViolation("encoder stream must be framed by [BOS] ... [EOS]")
    seps = {SEP_VIDEO: "video", SEP_AUDIO: "audio", SEP_HISTORY: "history"}
    spans: dict[str, list | None] = {}
    i = 1
    current = None
    for tok in toks[1:-1]:
        if tok in seps:
            current = seps[tok]
            spans[current] = []
        else:
            if current is None:
                raise ContractViolation("content token before any separator")
            spans[current].append(tok)
    for name in ("video", "audio", "history"):
        if name not in spans:
            raise ContractViolation(f"missing separator for {name} stream")
        if spans[name] == [NULL]:
            spans[name] = None
    return spans


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def param_spec(config: ModelConfig):
    """Ordered (name, shape, init) triples; a pure function of the config.

    init is one of "xavier" (scaled uniform +-sqrt(6/(fan_in+fan_out))),
    "zeros", or "ones".
    """
    config.validate()
    v, d, L = config.vocab_size, config.d_model, config.max_len
    # one table shared by encoder, decoder, and (transposed) output logits
    spec: list[tuple[str, tuple, str]] = [("emb.shared", (v, d), "xavier")]
    if config.backbone_kind == "transformer":
        dh = config.head_dim
        ff = 2 * d
        spec += [("pos.enc", (L, d), "xavier"), ("pos.dec", (L, d), "xavier")]
        for side, has_cross in (("enc", False), ("dec", True)):
            for i in range(config.n_layers):
                p = f"{side}.l{i}"
                blocks = ["self"] + (["cross"] if has_cross else [])
                for blk in blocks:
                    for h in range(config.n_heads):
                        spec += [
                            (f"{p}.{blk}.h{h}.wq", (d, dh), "xavier"),
                            (f"{p}.{blk}.h{h}.wk", (d, dh), "xavier"),
                            (f"{p}.{blk}.h{h}.wv", (d, dh), "xavier"),
                        ]
                    spec += [
                        (f"{p}.{blk}.wo", (d, d), "xavier"),
                        (f"{p}.{blk}.ln.g", (d,), "ones"),
                        (f"{p}.{blk}.ln.b", (d,), "zeros"),
                    ]
                spec += [
                    (f"{p}.ffn.w1", (d, ff), "xavier"),
                    (f"{p}.ffn.b1", (ff,), "zeros"),
                    (f"{p}.ffn.w2", (ff, d), "xavier"),
                    (f"{p}.ffn.b2", (d,), "zeros"),
                    (f"{p}.ffn.ln.g", (d,), "ones"),
                    (f"{p}.ffn.ln.b", (d,), "zeros"),
                ]
            spec += [(f"{side}.final_ln.g", (d,), "ones"), (f"{side}.final_ln.b", (d,), "zeros")]
    else:
        # one GRU layer per side, one weight pair + bias per gate
        for side in ("enc", "dec"):
            for gate in ("z", "r", "n"):
                spec += [
                    (f"{side}.gru.wx{gate}", (d, d), "xavier"),
                    (f"{side}.gru.wh{gate}", (d, d), "xavier"),
                    (f"{side}.gru.b{gate}", (d,), "zeros"),
                ]
        spec += [
            ("dec.attn.wa", (d, d), "xavier"),
            ("dec.merge.w", (2 * d, d), "xavier"),
            ("dec.merge.b", (d,), "zeros"),
        ]
    spec += [("out.b", (v,), "zeros")]
    return spec


def init_params(config: ModelConfig) -> dict[str, Tensor]:
    """Seeded parameter initialization; bit-identical for equal configs."""
    spec = param_spec(config)
    root = np.random.SeedSequence(config.seed)
    children = root.spawn(len(spec))
    params: dict[str, Tensor] = {}
    for (name, shape, init), child in zip(spec, children):
        if init == "xavier":
            fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            rng = np.random.default_rng(child)
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ag.multiply(x, Tensor(keep))


def _attention(params, prefix, q_in, kv_in, n_heads, head_dim, mask=None):
    scale = 1.0 / math.sqrt(head_dim)
    heads = []
    for h in range(n_heads):
        q = ag.matmul(q_in, params[f"{prefix}.h{h}.wq"])
        k = ag.matmul(kv_in, params[f"{prefix}.h{h}.wk"])
        v = ag.matmul(kv_in, params[f"{prefix}.h{h}.wv"])
        scores = ag.scale(ag.matmul(q, ag.transpose(k)), scale)
        if mask is not None:
            scores = ag.add_mask(scores, mask)
        heads.append(ag.matmul(ag.softmax(scores), v))
    merged = heads[0] if len(heads) == 1 else ag.concat(heads, axis=1)
    return ag.matmul(merged, params[f"{prefix}.wo"])


def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF), k=1)


def _output_logits(params, hidden):
    return ag.add(ag.matmul(hidden, ag.transpose(params["emb.shared"])), params["out.b"])


def _transformer_logits(params, config, enc_tokens, dec_tokens, rng=None):
    d, rate = config.d_model, config.dropout_rate
    x = ag.add(
        ag.gather_rows(params["emb.shared"], enc_tokens),
        ag.gather_rows(params["pos.enc"], np.arange(len(enc_tokens))),
    )
    for i in range(config.n_layers):
        p = f"enc.l{i}"
        normed = ag.layer_norm(x, params[f"{p}.self.ln.g"], params[f"{p}.self.ln.b"])
        attn = _attention(params, f"{p}.self", normed, normed, config.n_heads, config.head_dim)
        x = ag.add(x, _dropout(attn, rate, rng))
        normed = ag.layer_norm(x, params[f"{p}.ffn.ln.g"], params[f"{p}.ffn.ln.b"])
        hidden = ag.relu(ag.add(ag.matmul(normed, params[f"{p}.ffn.w1"]), params[f"{p}.ffn.b1"]))
        x = ag.add(x, _dropout(ag.add(ag.matmul(hidden, params[f"{p}.ffn.w2"]), params[f"{p}.ffn.b2"]), rate, rng))
    enc_out = ag.layer_norm(x, params["enc.final_ln.g"], params["enc.final_ln.b"])

    n_dec = len(dec_tokens)
    y = ag.add(
        ag.gather_rows(params["emb.shared"], dec_tokens),
        ag.gather_rows(params["pos.dec"], np.arange(n_dec)),
    )
    causal = _causal_mask(n_dec)
    for i in range(config.n_layers):
        p = f"dec.l{i}"
        normed = ag.layer_norm(y, params[f"{p}.self.ln.g"], params[f"{p}.self.ln.b"])
        attn = _attention(
            params, f"{p}.self", normed, normed, config.n_heads, config.head_dim, mask=causal
        )
        y = ag.add(y, _dropout(attn, rate, rng))
        normed = ag.layer_norm(y, params[f"{p}.cross.ln.g"], params[f"{p}.cross.ln.b"])
        attn = _attention(params, f"{p}.cross", normed, enc_out, config.n_heads, config.head_dim)
        y = ag.add(y, _dropout(attn, rate, rng))
        normed = ag.layer_norm(y, params[f"{p}.ffn.ln.g"], params[f"{p}.ffn.ln.b"])
        hidden = ag.relu(ag.add(ag.matmul(normed, params[f"{p}.ffn.w1"]), params[f"{p}.ffn.b1"]))
        y = ag.add(y, _dropout(ag.add(ag.matmul(hidden, params[f"{p}.ffn.w2"]), params[f"{p}.ffn.b2"]), rate, rng))
    y = ag.layer_norm(y, params["dec.final_ln.g"], params["dec.final_ln.b"])
    return _output_logits(params, y)


def _gru_gate(params, side, gate, x_row, h_row):
    return ag.add(
        ag.add(
            ag.matmul(x_row, params[f"{side}.gru.wx{gate}"]),
            ag.matmul(h_row, params[f"{side}.gru.wh{gate}"]),
        ),
        params[f"{side}.gru.b{gate}"],
    )


def _gru_step(params, side, x_row, h_row):
    z = ag.sigmoid(_gru_gate(params, side, "z", x_row, h_row))
    r = ag.sigmoid(_gru_gate(params, side, "r", x_row, h_row))
    n = ag.tanh(_gru_gate(params, side, "n", x_row, ag.multiply(r, h_row)))
    one_minus_z = ag.subtract(Tensor(np.ones_like(z.data)), z)
    return ag.add(ag.multiply(z, h_row), ag.multiply(one_minus_z, n))


def _recurrent_logits(params, config, enc_tokens, dec_tokens, rng=None):
    d = config.d_model
    emb_e = ag.gather_rows(params["emb.shared"], enc_tokens)
    h = Tensor(np.zeros((1, d)))
    enc_states = []
    for i in range(len(enc_tokens)):
        x_row = ag.gather_rows(emb_e, [i])
        h = _gru_step(params, "enc", x_row, h)
        enc_states.append(h)
    enc_out = ag.concat(enc_states, axis=0)

    emb_d = ag.gather_rows(params["emb.shared"], dec_tokens)
    h = enc_states[-1]
    rows = []
    scale = 1.0 / math.sqrt(d)
    for i in range(len(dec_tokens)):
        x_row = ag.gather_rows(emb_d, [i])
        h = _gru_step(params, "dec", x_row, h)
        query = ag.matmul(h, params["dec.attn.wa"])
        weights = ag.softmax(ag.scale(ag.matmul(query, ag.transpose(enc_out)), scale))
        context = ag.matmul(weights, enc_out)
        merged = ag.tanh(
            ag.add(ag.matmul(ag.concat([h, context], axis=1), params["dec.merge.w"]), params["dec.merge.b"])
        )
        merged = _dropout(merged, config.dropout_rate, rng)
        rows.append(_output_logits(params, merged))
    return ag.concat(rows, axis=0)


def decoder_logits(params, config, enc_tokens, dec_tokens, rng=None) -> Tensor:
    """Logits (len(dec_tokens), vocab); row i scores the token after dec_tokens[i]."""
    if config.backbone_kind == "transformer":
        return _transformer_logits(params, config, enc_tokens, dec_tokens, rng=rng)
    return _recurrent_logits(params, config, enc_tokens, dec_tokens, rng=rng)


def _check_vocab(example, config: ModelConfig):
    top = max(
        max(example.video_tokens, default=0),
        max(example.audio_tokens, default=0),
        max(example.history_tokens, default=0),
        max(example.question_tokens, default=0),
        max(example.answer_tokens, default=0),
    )
    if top >= config.vocab_size:
        raise ContractViolation(
            f"example token id {top} out of range for vocab_size {config.vocab_size}"
        )


def answer_logits(params, config, example, mask: InputMask = FULL_MASK, rng=None):
    """Teacher-forced logits for answer positions.

    Returns a (T+1, vocab) tensor: rows 0..T-1 score answer tokens y_1..y_T
    and row T scores the end-of-answer [EOS]. Gradients flow when called
    under an open tape.
    """
    _check_vocab(example, config)
    enc, prefix = serialize_input(example, mask, config.max_len)
    answer = list(example.answer_tokens)
    dec_in = prefix + answer
    logits = decoder_logits(params, config, enc, dec_in, rng=rng)
    first = len(prefix) - 1
    return ag.gather_rows(logits, np.arange(first, first + len(answer) + 1))


def answer_distributions(params, config, example, mask: InputMask = FULL_MASK) -> np.ndarray:
    """Per-step probability rows, (T+1, vocab), computed without recording."""
    logits = answer_logits(params, config, example, mask)
    return ag.softmax(logits).data


def token_logprobs(params, config, example, mask: InputMask = FULL_MASK) -> np.ndarray:
    """log P(y_t | inputs, Y_<t) for the T answer tokens, teacher forced.

    Entries are <= 0. Entry t depends only on the inputs and on answer
    tokens strictly before t. Dropout is never applied here.
    """
    probs = answer_distributions(params, config, example, mask)
    targets = np.asarray(example.answer_tokens, dtype=np.int64)
    picked = probs[np.arange(len(targets)), targets]
    return np.log(np.maximum(picked, ag.LOG_CLAMP))


def sequence_logprob(params, config, example, mask: InputMask = FULL_MASK) -> float:
    """log of the teacher-forced probability of the full answer."""
    return float(np.sum(token_logprobs(params, config, example, mask)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_SCHEMA = 1


def save_checkpoint(path, params, config: ModelConfig, *, epoch=0, seed=None, optimizer_state=None):
    tensors = {name: t.data for name, t in params.items()}
    has_opt = optimizer_state is not None
    if has_opt:
        for name, arr in optimizer_state["m"].items():
            tensors[f"opt.m.{name}"] = arr
        for name, arr in optimizer_state["v"].items():
            tensors[f"opt.v.{name}"] = arr
    meta = {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": "checkpoint",
        "model_config": {
            "backbone_kind": config.backbone_kind,
            "vocab_size": config.vocab_size,
            "d_model": config.d_model,
            "n_layers": config.n_layers,
            "n_heads": config.n_heads,
            "max_len": config.max_len,
            "dropout_rate": config.dropout_rate,
            "seed": config.seed,
        },
        "epoch": int(epoch),
        "seed": config.seed if seed is None else int(seed),
        "has_optimizer_state": has_opt,
        "optimizer_step": int(optimizer_state["step"]) if has_opt else 0,
    }
    save_tensors(path, tensors, meta)


def load_checkpoint(path):
    tensors, meta = load_tensors(path)
    config = ModelConfig(**meta["model_config"])
    params = {}
    opt_m, opt_v = {}, {}
    for name, arr in tensors.items():
        if name.startswith("opt.m."):
            opt_m[name[len("opt.m.") :]] = arr
        elif name.startswith("opt.v."):
            opt_v[name[len("opt.v.") :]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
    optimizer_state = None
    if meta.get("has_optimizer_state"):
        optimizer_state = {"m": opt_m, "v": opt_v, "step": meta.get("optimizer_step", 0)}
    return params, config, meta, optimizer_state
