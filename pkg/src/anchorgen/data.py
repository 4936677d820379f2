"""Synthetic grounded-dialogue tasks with planted, labeled anchor tokens.

Each question kind maps to a fixed answer template. Template positions are
either fillers (fixed tokens, predictable from the question alone) or
anchor slots that copy a value out of one knowledge stream (video, audio,
or history). Because every stream draws from its own disjoint
sub-vocabulary, the ground-truth anchor mask and the anchor's source
modality are known exactly.

Anchor transforms are copy-style only (copy-at-position, last-element,
indirect copy through a pointer element): each one changes its output for
almost every resample of the source stream, which is what makes the
planted anchors identifiable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation, ParseError
from .models import N_SPECIAL

DATASET_SCHEMA = 1

STREAMS = ("video", "audio", "history")
TRANSFORMS = ("copy", "last", "indirect")


@dataclass(frozen=True)
class VocabLayout:
    """Contiguous id ranges, one per content partition, after the specials."""

    question: tuple[int, int]
    filler: tuple[int, int]
    video: tuple[int, int]
    audio: tuple[int, int]
    history: tuple[int, int]

    def validate(self) -> None:
        ranges = sorted(self.as_dict().items(), key=lambda kv: kv[1][0])
        prev_name, prev_end = None, N_SPECIAL
        for name, (start, end) in ranges:
            if end <= start:
                raise ConfigurationError(f"vocab partition '{name}' is empty")
            if start < prev_end:
                raise ConfigurationError(
                    f"vocab partition overlap: '{name}' starts at {start} "
                    f"before {prev_name or 'specials'} ends at {prev_end}"
                )
            prev_name, prev_end = name, end

    def as_dict(self):
        return {
            "question": self.question,
            "filler": self.filler,
            "video": self.video,
            "audio": self.audio,
            "history": self.history,
        }

    @property
    def total_vocab(self) -> int:
        return max(end for _, end in self.as_dict().values())

    def stream_range(self, stream: str) -> tuple[int, int]:
        return self.as_dict()[stream]


@dataclass(frozen=True)
class GenConfig:
    n_examples: int = 2000
    vocab_question: int = 16
    vocab_filler: int = 24
    vocab_video: int = 18
    vocab_audio: int = 18
    vocab_history: int = 18
    stream_len_video: int = 6
    stream_len_audio: int = 6
    stream_len_history: int = 6
    n_templates: int = 12
    answer_len_min: int = 5
    answer_len_max: int = 8
    anchor_rate: float = 0.3
    noise_rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.n_examples < 0:
            problems.append("n_examples must be >= 0")
        for name in ("vocab_question", "vocab_filler", "vocab_video", "vocab_audio", "vocab_history"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("stream_len_video", "stream_len_audio", "stream_len_history"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not 1 <= self.answer_len_min <= self.answer_len_max:
            problems.append("answer length range invalid")
        if not 0.0 <= self.anchor_rate < 1.0:
            problems.append("anchor_rate must be in [0, 1)")
        if not 0.0 <= self.noise_rate <= 1.0:
            problems.append("noise_rate must be in [0, 1]")
        if self.n_templates < 1:
            problems.append("n_templates must be >= 1")
        if self.n_templates > self.vocab_question**2:
            problems.append("n_templates exceeds what two question tokens can encode")
        if problems:
            raise ConfigurationError("; ".join(problems))
        self.layout().validate()

    def layout(self) -> VocabLayout:
        start = N_SPECIAL
        ranges = {}
        for name, size in (
            ("question", self.vocab_question),
            ("filler", self.vocab_filler),
            ("video", self.vocab_video),
            ("audio", self.vocab_audio),
            ("history", self.vocab_history),
        ):
            ranges[name] = (start, start + size)
            start += size
        return VocabLayout(**ranges)

    def stream_len(self, stream: str) -> int:
        return getattr(self, f"stream_len_{stream}")

    def as_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass(frozen=True)
class AnchorSlot:
    source: str  # video | audio | history
    transform: str  # copy | last | indirect
    param: int  # position for copy, pointer position for indirect

    def render(self, stream: list[int], offset: int) -> int:
        n = len(stream)
        if self.transform == "copy":
            return stream[self.param % n]
        if self.transform == "last":
            return stream[-1]
        pointer = stream[self.param % n] - offset
        return stream[pointer % n]


@dataclass(frozen=True)
class AnswerTemplate:
    kind: int
    question_tokens: tuple[int, ...]
    slots: tuple  # per position: int filler token or AnchorSlot

    @property
    def length(self) -> int:
        return len(self.slots)

    def anchor_positions(self):
        return [i for i, s in enumerate(self.slots) if isinstance(s, AnchorSlot)]


@dataclass
class VDGExample:
    id: int
    video_tokens: list[int]
    audio_tokens: list[int]
    history_tokens: list[int]
    question_tokens: list[int]
    answer_tokens: list[int]
    anchor_mask: list[bool]
    anchor_source: list  # per position: "video"|"audio"|"history"|None
    kind: int = 0

    def __post_init__(self):
        t = len(self.answer_tokens)
        if not (t == len(self.anchor_mask) == len(self.anchor_source)):
            raise ContractViolation(
                f"example {self.id}: answer/mask/source lengths differ"
            )


@dataclass
class VDGDataset:
    examples: list[VDGExample]
    templates: list[AnswerTemplate]
    gen_config: GenConfig

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def subset(self, examples) -> "VDGDataset":
        return VDGDataset(list(examples), self.templates, self.gen_config)


def _build_templates(config: GenConfig, rng) -> list[AnswerTemplate]:
    layout = config.layout()
    q_start, q_end = layout.question
    q_size = q_end - q_start
    f_start, f_end = layout.filler
    templates = []
    for kind in range(config.n_templates):
        length = int(rng.integers(config.answer_len_min, config.answer_len_max + 1))
        n_anchors = int(round(config.anchor_rate * length))
        if config.anchor_rate > 0 and n_anchors == 0:
            n_anchors = 1
        anchor_at = set(rng.choice(length, size=n_anchors, replace=False).tolist())
        slots = []
        for pos in range(length):
            if pos in anchor_at:
                source = STREAMS[int(rng.integers(len(STREAMS)))]
                transform = TRANSFORMS[int(rng.integers(len(TRANSFORMS)))]
                param = int(rng.integers(config.stream_len(source)))
                slots.append(AnchorSlot(source, transform, param))
            else:
                slots.append(int(rng.integers(f_start, f_end)))
        question = (q_start + kind // q_size, q_start + kind % q_size)
        templates.append(AnswerTemplate(kind, question, tuple(slots)))
    return templates


def render_answer(template: AnswerTemplate, streams: dict, layout: VocabLayout):
    """Answer tokens plus aligned anchor mask/source for given streams."""
    answer, mask, source = [], [], []
    for slot in template.slots:
        if isinstance(slot, AnchorSlot):
            offset = layout.stream_range(slot.source)[0]
            answer.append(int(slot.render(streams[slot.source], offset)))
            mask.append(True)
            source.append(slot.source)
        else:
            answer.append(int(slot))
            mask.append(False)
            source.append(None)
    return answer, mask, source


def generate(config: GenConfig) -> VDGDataset:
    """Seed-deterministic dataset with exact anchor ground truth.

    Fillers are a fixed function of the question template; with
    ``noise_rate`` > 0 that fraction of examples gets its filler positions
    resampled uniformly from the filler partition. Anchor positions are
    always the exact transform of their source stream.
    """
    config.validate()
    layout = config.layout()
    master = np.random.default_rng(config.seed)
    templates = _build_templates(config, master)
    example_seeds = master.integers(0, 2**63 - 1, size=config.n_examples)
    examples = []
    f_start, f_end = layout.filler
    for i in range(config.n_examples):
        rng = np.random.default_rng(int(example_seeds[i]))
        template = templates[int(rng.integers(config.n_templates))]
        streams = {}
        for stream in STREAMS:
            start, end = layout.stream_range(stream)
            streams[stream] = rng.integers(start, end, size=config.stream_len(stream)).tolist()
        answer, mask, source = render_answer(template, streams, layout)
        if config.noise_rate > 0 and rng.random() < config.noise_rate:
            for pos, is_anchor in enumerate(mask):
                if not is_anchor:
                    answer[pos] = int(rng.integers(f_start, f_end))
        examples.append(
            VDGExample(
                id=i,
                video_tokens=streams["video"],
                audio_tokens=streams["audio"],
                history_tokens=streams["history"],
                question_tokens=list(template.question_tokens),
                answer_tokens=answer,
                anchor_mask=mask,
                anchor_source=source,
                kind=template.kind,
            )
        )
    return VDGDataset(examples, templates, config)


def split(dataset: VDGDataset, fractions, seed: int):
    """Disjoint, covering, seed-deterministic partition of the examples."""
    fractions = list(fractions)
    if not fractions or any(f <= 0 for f in fractions):
        raise ConfigurationError("split fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions sum to {sum(fractions)}, expected 1")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    sizes = [int(round(f * n)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if any(s <= 0 for s in sizes):
        raise ConfigurationError(f"split produces an empty part: sizes {sizes}")
    parts, cursor = [], 0
    for size in sizes:
        idx = order[cursor : cursor + size]
        parts.append(dataset.subset([dataset.examples[i] for i in idx]))
        cursor += size
    return tuple(parts)


# ---------------------------------------------------------------------------
# on-disk format: one JSON header line, then one JSON record per example
# ---------------------------------------------------------------------------


def _template_to_json(t: AnswerTemplate):
    slots = []
    for slot in t.slots:
        if isinstance(slot, AnchorSlot):
            slots.append({"source": slot.source, "transform": slot.transform, "param": slot.param})
        else:
            slots.append(slot)
    return {"kind": t.kind, "question_tokens": list(t.question_tokens), "slots": slots}


def _template_from_json(d):
    slots = []
    for slot in d["slots"]:
        if isinstance(slot, dict):
            slots.append(AnchorSlot(slot["source"], slot["transform"], slot["param"]))
        else:
            slots.append(int(slot))
    return AnswerTemplate(d["kind"], tuple(d["question_tokens"]), tuple(slots))


def save(dataset: VDGDataset, path) -> None:
    path = Path(path)
    header = {
        "schema_version": DATASET_SCHEMA,
        "kind": "vdg_dataset",
        "gen_config": dataset.gen_config.as_dict(),
        "templates": [_template_to_json(t) for t in dataset.templates],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in dataset.examples:
            record = {
                "id": ex.id,
                "v": ex.video_tokens,
                "a": ex.audio_tokens,
                "h": ex.history_tokens,
                "q": ex.question_tokens,
                "y": ex.answer_tokens,
                "anchor_mask": [int(b) for b in ex.anchor_mask],
                "anchor_source": ex.anchor_source,
                "kind": ex.kind,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load(path) -> VDGDataset:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file, expected a header line", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: bad header: {e}", line=1) from None
    if header.get("kind") != "vdg_dataset":
        raise ParseError(f"{path}: not a dataset file", line=1)
    if header.get("schema_version") != DATASET_SCHEMA:
        raise ParseError(
            f"{path}: unsupported schema_version {header.get('schema_version')}", line=1
        )
    templates = [_template_from_json(t) for t in header.get("templates", [])]
    gen_config = GenConfig(**header["gen_config"])
    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            examples.append(
                VDGExample(
                    id=int(rec["id"]),
                    video_tokens=list(rec["v"]),
                    audio_tokens=list(rec["a"]),
                    history_tokens=list(rec["h"]),
                    question_tokens=list(rec["q"]),
                    answer_tokens=list(rec["y"]),
                    anchor_mask=[bool(b) for b in rec["anchor_mask"]],
                    anchor_source=list(rec["anchor_source"]),
                    kind=int(rec.get("kind", 0)),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ContractViolation) as e:
            raise ParseError(f"{path}: bad example record: {e}", line=lineno) from None
    return VDGDataset(examples, templates, gen_config)
