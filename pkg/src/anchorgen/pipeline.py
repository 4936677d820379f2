"""Declarative experiment pipeline with content-hashed, resumable stages.

A run directory is produced in stage order: dataset files, detector
checkpoints, weight files, retrained checkpoints (one baseline arm with
all-ones weights plus one arm per detection method, all from the same
initialization), evaluation reports, and a report bundle. Every artifact's
sha256 goes into ``manifest.json``; a stage is skipped on re-run when its
stage key and output hashes still match and nothing upstream re-executed.
Artifacts contain no timestamps or absolute paths, so a config plus seed
reproduces the manifest bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import data as dat
from . import detection as det
from . import metrics as mx
from .decoding import BeamConfig, decode_answer
from .errors import (
    AnchorgenError,
    ConfigurationError,
    MissingArtifactError,
    StageError,
)
from .models import (
    FULL_MASK,
    QUESTION_ONLY,
    InputMask,
    ModelConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .training import OptimizerConfig, train
from .weighting import make_loss_fn, normalize_weights

log = logging.getLogger(__name__)

CONFIG_SCHEMA = 1
MANIFEST_SCHEMA = 1
OUT_ROOT_ENV = "ANCHORGEN_OUT_ROOT"

STAGE_ORDER = ("gen_data", "train_detectors", "detect", "retrain", "evaluate", "report")

BASELINE_ARM = "baseline"


def arm_name(method: str) -> str:
    return BASELINE_ARM if method == det.METHOD_BASELINE else f"anchor_{method}"


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little") % (2**31)


@dataclass(frozen=True)
class DetectionConfig:
    methods: tuple[str, ...] = (det.METHOD_PERPLEXITY, det.METHOD_COUNTERFACTUAL)
    p1_keep_video: bool = False
    p1_keep_audio: bool = False
    p1_keep_history: bool = False
    smoothing: float = 0.1

    def validate(self):
        bad = [m for m in self.methods if m not in (det.METHOD_PERPLEXITY, det.METHOD_COUNTERFACTUAL)]
        if bad:
            raise ConfigurationError(f"unknown detection methods {bad}")
        if not self.methods:
            raise ConfigurationError("at least one detection method required")
        if not 0.0 <= self.smoothing <= 1.0:
            raise ConfigurationError("smoothing must be in [0, 1]")

    @property
    def p1_mask(self) -> InputMask:
        return InputMask(
            include_video=self.p1_keep_video,
            include_audio=self.p1_keep_audio,
            include_history=self.p1_keep_history,
        )


@dataclass(frozen=True)
class ModelSpec:
    backbone_kind: str = "transformer"
    d_model: int = 32
    n_layers: int = 1
    n_heads: int = 2
    dropout_rate: float = 0.0

    def build(self, vocab_size: int, max_len: int, seed: int) -> ModelConfig:
        return ModelConfig(
            backbone_kind=self.backbone_kind,
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            max_len=max_len,
            dropout_rate=self.dropout_rate,
            seed=seed,
        )


@dataclass(frozen=True)
class PipelineConfig:
    gen: dat.GenConfig
    split_fractions: tuple[float, ...]
    detector_full: ModelSpec
    detector_deprived: ModelSpec
    final: ModelSpec
    stage1_opt: OptimizerConfig
    stage2_opt: OptimizerConfig
    detection: DetectionConfig
    decode: BeamConfig
    chart_examples: int = 2
    seed: int = 0

    def validate(self):
        self.gen.validate()
        self.detection.validate()
        self.decode.validate()
        self.stage1_opt.validate()
        self.stage2_opt.validate()
        if len(self.split_fractions) != 3:
            raise ConfigurationError("split must have train/validation/test fractions")
        if self.chart_examples < 0:
            raise ConfigurationError("chart_examples must be >= 0")
        self.model_config("final")  # validates derived model configs

    @property
    def vocab_size(self) -> int:
        return self.gen.layout().total_vocab

    @property
    def max_len(self) -> int:
        g = self.gen
        enc = 2 + 3 + g.stream_len_video + g.stream_len_audio + g.stream_len_history
        prefix = 1 + 2 + 1  # question separator, two question tokens, answer separator
        dec = prefix + max(g.answer_len_max + 1, self.decode.max_decode_len)
        return max(enc, dec)

    def model_config(self, role: str) -> ModelConfig:
        spec = {
            "detector_full": self.detector_full,
            "detector_deprived": self.detector_deprived,
            "final": self.final,
        }[role]
        return spec.build(self.vocab_size, self.max_len, derive_seed(self.seed, f"model:{role}"))

    def optimizer(self, stage: str, role: str) -> OptimizerConfig:
        base = self.stage1_opt if stage == "stage1" else self.stage2_opt
        return replace(base, seed=derive_seed(self.seed, f"opt:{stage}:{role}"))


def _require(mapping, key, where):
    if key not in mapping:
        raise ConfigurationError(f"missing '{key}' in {where}")
    return mapping[key]


def config_from_dict(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping")
    if raw.get("schema_version") != CONFIG_SCHEMA:
        raise ConfigurationError(
            f"config schema_version must be {CONFIG_SCHEMA}, got {raw.get('schema_version')!r}"
        )
    seed = int(raw.get("seed", 0))
    d = _require(raw, "data", "config")
    vocab = d.get("vocab", {})
    stream_len = d.get("stream_len", {})
    answer_len = d.get("answer_len", [5, 8])
    gen = dat.GenConfig(
        n_examples=int(_require(d, "n_examples", "data")),
        vocab_question=int(vocab.get("question", 16)),
        vocab_filler=int(vocab.get("filler", 24)),
        vocab_video=int(vocab.get("video", 18)),
        vocab_audio=int(vocab.get("audio", 18)),
        vocab_history=int(vocab.get("history", 18)),
        stream_len_video=int(stream_len.get("video", 6)),
        stream_len_audio=int(stream_len.get("audio", 6)),
        stream_len_history=int(stream_len.get("history", 6)),
        n_templates=int(d.get("n_templates", 12)),
        answer_len_min=int(answer_len[0]),
        answer_len_max=int(answer_len[1]),
        anchor_rate=float(d.get("anchor_rate", 0.3)),
        noise_rate=float(d.get("noise_rate", 0.25)),
        seed=derive_seed(seed, "data"),
    )
    split = tuple(float(f) for f in d.get("split", (0.8, 0.1, 0.1)))

    def model_spec(name):
        m = raw.get("models", {}).get(name)
        if m is None:
            m = raw.get("models", {}).get("detector_full", {}) if name != "detector_full" else {}
        return ModelSpec(
            backbone_kind=m.get("backbone", "transformer"),
            d_model=int(m.get("d_model", 32)),
            n_layers=int(m.get("n_layers", 1)),
            n_heads=int(m.get("n_heads", 2)),
            dropout_rate=float(m.get("dropout", 0.0)),
        )

    def opt_config(name):
        o = raw.get("optimizer", {}).get(name, {})
        return OptimizerConfig(
            learning_rate=float(o.get("learning_rate", 2e-3)),
            batch_size=int(o.get("batch_size", 16)),
            epochs=int(o.get("epochs", 10)),
            clip_norm=float(o.get("clip_norm", 1.0)),
            weight_decay=float(o.get("weight_decay", 0.01)),
        )

    detection_raw = raw.get("detection", {})
    keep = detection_raw.get("p1_keep", {})
    detection = DetectionConfig(
        methods=tuple(detection_raw.get("methods", ["P", "CF"])),
        p1_keep_video=bool(keep.get("video", False)),
        p1_keep_audio=bool(keep.get("audio", False)),
        p1_keep_history=bool(keep.get("history", False)),
        smoothing=float(detection_raw.get("smoothing", 0.1)),
    )
    decode_raw = raw.get("decode", {})
    decode = BeamConfig(
        beam_size=int(decode_raw.get("beam_size", 6)),
        length_penalty_alpha=float(decode_raw.get("length_penalty_alpha", 0.6)),
        max_decode_len=int(decode_raw.get("max_decode_len", gen.answer_len_max + 4)),
    )
    config = PipelineConfig(
        gen=gen,
        split_fractions=split,
        detector_full=model_spec("detector_full"),
        detector_deprived=model_spec("detector_deprived"),
        final=model_spec("final"),
        stage1_opt=opt_config("stage1"),
        stage2_opt=opt_config("stage2"),
        detection=detection,
        decode=decode,
        chart_examples=int(raw.get("report", {}).get("chart_examples", 2)),
        seed=seed,
    )
    config.validate()
    return config


def load_config(path, seed_override: int | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigurationError(f"config is not valid YAML: {e}") from None
    if seed_override is not None:
        if not isinstance(raw, dict):
            raise ConfigurationError("config root must be a mapping")
        raw = dict(raw)
        raw["seed"] = int(seed_override)
    return config_from_dict(raw)


def canonical_config_dict(config: PipelineConfig) -> dict:
    """JSON-safe view of the config used for hashing and the manifest."""

    def plain(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {k: plain(getattr(obj, k)) for k in obj.__dataclass_fields__}
        if isinstance(obj, (list, tuple)):
            return [plain(x) for x in obj]
        return obj

    return {
        "schema_version": CONFIG_SCHEMA,
        "seed": config.seed,
        "gen": plain(config.gen),
        "split_fractions": plain(config.split_fractions),
        "models": {
            "detector_full": plain(config.detector_full),
            "detector_deprived": plain(config.detector_deprived),
            "final": plain(config.final),
        },
        "optimizer": {"stage1": plain(config.stage1_opt), "stage2": plain(config.stage2_opt)},
        "detection": plain(config.detection),
        "decode": plain(config.decode),
        "chart_examples": config.chart_examples,
    }


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# stage definitions
# ---------------------------------------------------------------------------


@dataclass
class RunContext:
    config: PipelineConfig
    out_dir: Path

    def path(self, rel: str) -> Path:
        p = self.out_dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def load_splits(self):
        train = dat.load(self.out_dir / "data" / "train.jsonl")
        val = dat.load(self.out_dir / "data" / "validation.jsonl")
        test = dat.load(self.out_dir / "data" / "test.jsonl")
        return train, val, test

    def arms(self):
        return [BASELINE_ARM] + [arm_name(m) for m in self.config.detection.methods]

    def chart_models(self):
        names = ["detector_full"]
        if det.METHOD_COUNTERFACTUAL in self.config.detection.methods:
            names.append("detector_deprived")
        names.extend(f"final_{arm}" for arm in self.arms())
        return names


def _stage_gen_data(ctx: RunContext):
    config = ctx.config
    dataset = dat.generate(config.gen)
    train, val, test = dat.split(
        dataset, config.split_fractions, derive_seed(config.seed, "split")
    )
    dat.save(dataset, ctx.path("data/dataset.jsonl"))
    dat.save(train, ctx.path("data/train.jsonl"))
    dat.save(val, ctx.path("data/validation.jsonl"))
    dat.save(test, ctx.path("data/test.jsonl"))
    return [
        "data/dataset.jsonl",
        "data/train.jsonl",
        "data/validation.jsonl",
        "data/test.jsonl",
    ]


def _stage_train_detectors(ctx: RunContext):
    config = ctx.config
    train_split, _, _ = ctx.load_splits()
    outputs = []
    cfg_full = config.model_config("detector_full")
    params, curve, opt_state = train(
        init_params(cfg_full),
        cfg_full,
        train_split,
        make_loss_fn(),
        config.optimizer("stage1", "detector_full"),
    )
    save_checkpoint(
        ctx.path("ckpt/detector_full.agt"), params, cfg_full, epoch=len(curve)
    )
    outputs.append("ckpt/detector_full.agt")
    if det.METHOD_COUNTERFACTUAL in config.detection.methods:
        cfg_dep = config.model_config("detector_deprived")
        params, curve, _ = train(
            init_params(cfg_dep),
            cfg_dep,
            train_split,
            make_loss_fn(),
            config.optimizer("stage1", "detector_deprived"),
            mask=config.detection.p1_mask,
        )
        save_checkpoint(
            ctx.path("ckpt/detector_deprived.agt"), params, cfg_dep, epoch=len(curve)
        )
        outputs.append("ckpt/detector_deprived.agt")
    return outputs


def _stage_detect(ctx: RunContext):
    config = ctx.config
    train_split, _, _ = ctx.load_splits()
    s = config.detection.smoothing
    params_full, cfg_full, _, _ = load_checkpoint(ctx.out_dir / "ckpt/detector_full.agt")
    outputs = []
    quality = {}
    masks = {ex.id: ex.anchor_mask for ex in train_split}

    def finish(weight_list, method):
        rel = f"weights/weights_{method}.jsonl"
        det.save_weights(ctx.path(rel), weight_list)
        outputs.append(rel)
        auc, prec = det.detection_quality(weight_list, masks)
        quality[method] = {"auc": auc, "precision_at_k": prec}

    if det.METHOD_PERPLEXITY in config.detection.methods:
        weights = [
            det.smooth_weights(det.perplexity_weights((params_full, cfg_full), ex), s)
            for ex in train_split
        ]
        finish(weights, det.METHOD_PERPLEXITY)
    if det.METHOD_COUNTERFACTUAL in config.detection.methods:
        params_dep, cfg_dep, _, _ = load_checkpoint(
            ctx.out_dir / "ckpt/detector_deprived.agt"
        )
        p1 = config.detection.p1_mask
        weights = [
            det.smooth_weights(
                det.counterfactual_weights(
                    (params_dep, cfg_dep), (params_full, cfg_full), ex, p1
                ),
                s,
            )
            for ex in train_split
        ]
        finish(weights, det.METHOD_COUNTERFACTUAL)

    zero = [
        det.AnchorWeights(ex.id, np.zeros(len(ex.answer_tokens)), det.METHOD_BASELINE)
        for ex in train_split
    ]
    det.save_weights(ctx.path("weights/weights_baseline.jsonl"), zero)
    outputs.append("weights/weights_baseline.jsonl")

    with open(ctx.path("weights/detection_quality.json"), "w") as fh:
        json.dump({"schema_version": 1, "quality": quality}, fh, sort_keys=True, indent=2)
    outputs.append("weights/detection_quality.json")
    return outputs


def _weight_lookup(path) -> dict:
    return {aw.example_id: normalize_weights(aw) for aw in det.load_weights(path)}


def _stage_retrain(ctx: RunContext):
    config = ctx.config
    train_split, _, _ = ctx.load_splits()
    cfg_final = config.model_config("final")
    base_params = init_params(cfg_final)
    outputs = []
    sources = {BASELINE_ARM: "weights/weights_baseline.jsonl"}
    for method in config.detection.methods:
        sources[arm_name(method)] = f"weights/weights_{method}.jsonl"
    for arm, weights_rel in sources.items():
        lookup = _weight_lookup(ctx.out_dir / weights_rel)
        params, curve, _ = train(
            base_params,
            cfg_final,
            train_split,
            make_loss_fn(lookup),
            config.optimizer("stage2", "final"),
        )
        rel = f"ckpt/final_{arm}.agt"
        save_checkpoint(ctx.path(rel), params, cfg_final, epoch=len(curve))
        outputs.append(rel)
    return outputs


def _write_per_token_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example_id", "position", "token_id", "nll", "perplexity"])
        for r in rows:
            writer.writerow(
                [r.example_id, r.position, r.token_id,
                 format(-r.logprob, ".12g"), format(r.perplexity, ".12g")]
            )


def _stage_evaluate(ctx: RunContext):
    config = ctx.config
    _, _, test_split = ctx.load_splits()
    outputs = []
    for arm in ctx.arms():
        params, cfg, _, _ = load_checkpoint(ctx.out_dir / f"ckpt/final_{arm}.agt")
        generated = {
            ex.id: decode_answer(params, cfg, ex, config.decode) for ex in test_split
        }
        metrics = mx.evaluate_generations(generated, test_split)
        mean_ppl, rows = mx.corpus_perplexity((params, cfg), test_split)
        metrics["mean_perplexity"] = mean_ppl
        report = mx.EvalReport(metrics, generated, rows)
        report.validate()
        rel = f"eval/eval_{arm}.json"
        with open(ctx.path(rel), "w") as fh:
            json.dump(
                {
                    "schema_version": 1,
                    "arm": arm,
                    "metrics": metrics,
                    "generated": {str(k): v for k, v in generated.items()},
                },
                fh,
                sort_keys=True,
                indent=2,
            )
        outputs.append(rel)
        csv_rel = f"eval/per_token_final_{arm}.csv"
        _write_per_token_csv(ctx.path(csv_rel), rows)
        outputs.append(csv_rel)
    for name in ("detector_full", "detector_deprived"):
        ckpt = ctx.out_dir / f"ckpt/{name}.agt"
        if ckpt.exists():
            params, cfg, _, _ = load_checkpoint(ckpt)
            mask = FULL_MASK if name == "detector_full" else config.detection.p1_mask
            _, rows = mx.corpus_perplexity((params, cfg), test_split, mask)
            csv_rel = f"eval/per_token_{name}.csv"
            _write_per_token_csv(ctx.path(csv_rel), rows)
            outputs.append(csv_rel)
    return outputs


def _stage_report(ctx: RunContext):
    from .report import emit_report

    bundle = emit_report(ctx.out_dir, ctx.config)
    return bundle


STAGES = {
    "gen_data": _stage_gen_data,
    "train_detectors": _stage_train_detectors,
    "detect": _stage_detect,
    "retrain": _stage_retrain,
    "evaluate": _stage_evaluate,
    "report": _stage_report,
}

# Upstream artifacts each stage reads; used to build the stage key.
STAGE_INPUTS = {
    "gen_data": (),
    "train_detectors": ("data/train.jsonl",),
    "detect": ("data/train.jsonl", "ckpt/detector_full.agt", "ckpt/detector_deprived.agt"),
    "retrain": ("data/train.jsonl", "weights/*"),
    "evaluate": ("data/test.jsonl", "ckpt/final_*"),
    "report": ("eval/*", "weights/detection_quality.json"),
}

# Config fields that affect each stage, for change detection.
def _stage_config_slice(config: PipelineConfig, stage: str) -> dict:
    full = canonical_config_dict(config)
    slices = {
        "gen_data": ("gen", "split_fractions", "seed"),
        "train_detectors": ("models", "optimizer", "detection", "seed"),
        "detect": ("detection", "seed"),
        "retrain": ("models", "optimizer", "detection", "seed"),
        "evaluate": ("decode", "detection", "seed"),
        "report": ("chart_examples", "detection"),
    }
    return {k: full[k] for k in slices[stage]}


@dataclass
class StageStatus:
    name: str
    executed: bool
    outputs: dict[str, str] = field(default_factory=dict)  # relpath -> sha256


@dataclass
class RunResult:
    out_dir: Path
    stages: list[StageStatus]
    manifest: dict

    def executed(self):
        return [s.name for s in self.stages if s.executed]

    def skipped(self):
        return [s.name for s in self.stages if not s.executed]


class Manifest:
    def __init__(self, path: Path):
        self.path = path
        if path.exists():
            self.data = json.loads(path.read_text())
        else:
            self.data = {"schema_version": MANIFEST_SCHEMA, "stages": {}, "artifacts": {}}

    def save(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, sort_keys=True, indent=2)
            fh.write("\n")

    def record_stage(self, name, key, outputs):
        self.data["stages"][name] = {"key": key, "outputs": outputs}
        self.data["artifacts"].update(outputs)

    def stage_matches(self, name, key, out_dir: Path) -> bool:
        entry = self.data["stages"].get(name)
        if entry is None or entry["key"] != key:
            return False
        for rel, digest in entry["outputs"].items():
            p = out_dir / rel
            if not p.exists() or _sha256_file(p) != digest:
                return False
        return True


def _resolve_inputs(out_dir: Path, patterns) -> dict[str, str]:
    found: dict[str, str] = {}
    for pattern in patterns:
        if pattern.endswith("*"):
            base = out_dir / Path(pattern).parent
            prefix = Path(pattern).name[:-1]
            if base.exists():
                for p in sorted(base.iterdir()):
                    if p.is_file() and p.name.startswith(prefix):
                        found[str(p.relative_to(out_dir))] = _sha256_file(p)
        else:
            p = out_dir / pattern
            if p.exists():
                found[pattern] = _sha256_file(p)
    return found


def resolve_out_dir(out_dir) -> Path:
    out = Path(out_dir)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def run(
    config: PipelineConfig,
    out_dir,
    stages=None,
    force: set[str] | None = None,
    skip: set[str] | None = None,
) -> RunResult:
    """Execute pipeline stages in order, skipping up-to-date ones.

    ``stages`` restricts execution to a subset (still in canonical order);
    ``force`` re-executes named stages even when current, ``skip`` omits
    them entirely. Once any stage executes, every later stage in this run
    executes too. A stage failure raises StageError after the manifest for
    completed stages has been written.
    """
    config.validate()
    out = resolve_out_dir(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    force = force or set()
    skip = skip or set()
    wanted = list(STAGE_ORDER) if stages is None else [s for s in STAGE_ORDER if s in set(stages)]
    unknown = (set(stages or []) | force | skip) - set(STAGE_ORDER)
    if unknown:
        raise ConfigurationError(f"unknown stages {sorted(unknown)}")

    manifest = Manifest(out / "manifest.json")
    manifest.data["config"] = canonical_config_dict(config)
    manifest.data["config_hash"] = _hash_obj(manifest.data["config"])
    manifest.data["seed"] = config.seed

    ctx = RunContext(config, out)
    statuses: list[StageStatus] = []
    upstream_changed = False
    for name in wanted:
        if name in skip:
            statuses.append(StageStatus(name, executed=False))
            continue
        inputs = _resolve_inputs(out, STAGE_INPUTS[name])
        key = _hash_obj({"config": _stage_config_slice(config, name), "inputs": inputs})
        if (
            name not in force
            and not upstream_changed
            and manifest.stage_matches(name, key, out)
        ):
            entry = manifest.data["stages"][name]
            statuses.append(StageStatus(name, executed=False, outputs=dict(entry["outputs"])))
            log.info("stage %s: up to date, skipped", name)
            continue
        log.info("stage %s: running", name)
        try:
            rel_outputs = STAGES[name](ctx)
        except AnchorgenError as e:
            manifest.save()
            raise StageError(name, e) from e
        except Exception as e:  # noqa: BLE001 - surface the failing stage
            manifest.save()
            raise StageError(name, e) from e
        # key is recomputed because inputs may have been produced this run
        inputs = _resolve_inputs(out, STAGE_INPUTS[name])
        key = _hash_obj({"config": _stage_config_slice(config, name), "inputs": inputs})
        outputs = {rel: _sha256_file(out / rel) for rel in rel_outputs}
        manifest.record_stage(name, key, outputs)
        manifest.save()
        statuses.append(StageStatus(name, executed=True, outputs=outputs))
        upstream_changed = True
    manifest.save()
    return RunResult(out, statuses, manifest.data)
