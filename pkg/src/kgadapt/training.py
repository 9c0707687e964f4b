"""Training loops for the five run configurations, with strict freezing.

Modes: full fine-tune, single task adapter, language-adapter pretraining
(mlm/flm/tlm), task adapter stacked on a frozen language adapter, and task
adapter on a fusion of several frozen language adapters. Frozen components are
verified bitwise-unchanged via snapshot hashes; the best checkpoint (minimum
validation loss) is what every run returns and writes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as m
from .errors import (EmptyCorpusError, FusionArityError, LabelSpaceError,
                     ObjectiveDataMismatchError, TrainError)
from .eval import SA_LABELS, Splits, f1_binary, f1_seqeval
from .kg_ingest import AnnotatedSentence
from .text_pipeline import (IGNORE, PAD, MaskingConfig, Vocab, mask_flm, mask_mlm,
                            mask_tlm, tokenize)

MODES = ("full_ft", "task_adapter_only", "lang_adapter", "task_on_lang", "task_on_fusion")
OBJECTIVES = ("mlm", "flm", "tlm")
_MASKERS = {"mlm": mask_mlm, "flm": mask_flm, "tlm": mask_tlm}

# Paper-default recipes. Downstream tasks train with batch 64 and best-model
# saving (SA: 50 epochs, dropout 0.5, lr 1e-4 full / 1e-5 adapters; NER: 100
# epochs, dropout 0.2, lr 2e-4 full / 1e-4 adapters). Language adapters train
# with lr 5e-5 and batch 16; the desk-scale step budgets keep the 1:2
# ConceptNet:Wikipedia ratio of the full-scale recipe.
PRESETS = {
    "sa": {"batch_size": 64, "epochs": 50, "dropout_p": 0.5, "lr_full": 1e-4, "lr_adapter": 1e-5},
    "ner": {"batch_size": 64, "epochs": 100, "dropout_p": 0.2, "lr_full": 2e-4, "lr_adapter": 1e-4},
    "lang-cn": {"lr": 5e-5, "batch_size": 16, "max_steps": 500, "objective": "mlm"},
    "lang-wiki": {"lr": 5e-5, "batch_size": 16, "max_steps": 1000, "objective": "mlm"},
}


@dataclass
class TrainConfig:
    mode: str
    objective: str | None = None
    lr: float = 1e-3
    batch_size: int = 16
    max_steps: int | None = 300
    epochs: int | None = None
    dropout_p: float = 0.1
    seed: int = 0
    eval_every: int = 50
    reduction_factor: int = 16
    masking: MaskingConfig = field(default_factory=MaskingConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.objective is not None:
            if self.mode != "lang_adapter":
                raise ValueError("objective is only valid in lang_adapter mode")
            if self.objective not in OBJECTIVES:
                raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.eval_every < 1 or self.reduction_factor < 1:
            raise ValueError("lr, batch_size, eval_every, reduction_factor must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if (self.max_steps is None or self.max_steps < 1) and (self.epochs is None or self.epochs < 1):
            raise ValueError("need a positive max_steps or epochs budget")


def config_from_preset(preset, mode, **overrides) -> TrainConfig:
    """Resolve a named preset into a TrainConfig, flags winning over presets."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}, choose from {sorted(PRESETS)}")
    fields = dict(PRESETS[preset])
    lr_full = fields.pop("lr_full", None)
    lr_adapter = fields.pop("lr_adapter", None)
    if "lr" not in fields:
        fields["lr"] = lr_full if mode == "full_ft" else lr_adapter
    if mode != "lang_adapter":
        fields.pop("objective", None)
    fields["mode"] = mode
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**fields)


@dataclass
class EvalPoint:
    step: int
    train_loss: float
    val_loss: float
    val_metric: float

    def to_json(self):
        return {"step": self.step, "train_loss": self.train_loss,
                "val_loss": self.val_loss, "val_metric": self.val_metric}


@dataclass
class RunRecord:
    mode: str
    objective: str | None
    seed: int
    points: list = field(default_factory=list)
    best_step: int = -1
    best_val_loss: float = math.inf
    best_checkpoint: str | None = None

    @property
    def best_val_metric(self):
        for point in self.points:
            if point.step == self.best_step:
                return point.val_metric
        return None

    def summary(self) -> dict:
        return {"mode": self.mode, "objective": self.objective, "seed": self.seed,
                "n_points": len(self.points), "best_step": self.best_step,
                "best_val_loss": self.best_val_loss, "best_val_metric": self.best_val_metric,
                "best_checkpoint": self.best_checkpoint,
                "final_train_loss": self.points[-1].train_loss if self.points else None}

    def write(self, out_dir):
        out_dir = Path(out_dir)
        with open(out_dir / "record.jsonl", "w", encoding="utf-8") as fh:
            for point in self.points:
                fh.write(json.dumps(point.to_json(), sort_keys=True) + "\n")
        (out_dir / "summary.json").write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class FreezeMask:
    trainable: dict  # component name -> bool

    def __post_init__(self):
        if not any(self.trainable.values()):
            raise ValueError("at least one component must be trainable")


@dataclass
class FreezeReport:
    components: dict  # name -> {"trainable", "changed", "ok"}
    passed: bool


def snapshot_components(components) -> dict:
    """sha256 digest per component over its named tensor bytes."""
    digests = {}
    for name, weights in components.items():
        h = hashlib.sha256()
        for tensor_name, tensor in weights.named_tensors():
            h.update(tensor_name.encode("utf-8"))
            h.update(np.ascontiguousarray(tensor.data).tobytes())
        digests[name] = h.hexdigest()
    return digests


def verify_frozen(snapshot_before, components_after, mask: FreezeMask, steps=1) -> FreezeReport:
    """Frozen components must be bitwise-identical; trainable ones must have
    moved (skipped when no step was taken)."""
    after = snapshot_components(components_after)
    report = {}
    passed = True
    for name, digest in snapshot_before.items():
        trainable = bool(mask.trainable.get(name, False))
        changed = after.get(name) != digest
        ok = (changed or steps == 0) if trainable else not changed
        report[name] = {"trainable": trainable, "changed": changed, "ok": ok}
        passed = passed and ok
    return FreezeReport(report, passed)


@dataclass
class TrainResult:
    record: RunRecord
    components: dict          # name -> weights, best checkpoint restored
    freeze_mask: FreezeMask
    snapshot_before: dict
    classes: list | None = None
    out_dir: str | None = None

    @property
    def adapter(self):
        return self.components.get("language_adapter")

    @property
    def task_adapter(self):
        return self.components.get("task_adapter")

    @property
    def head(self):
        return self.components.get("head")

    @property
    def fusion(self):
        return self.components.get("fusion")

    @property
    def base(self):
        return self.components.get("base")


def _mix(*parts) -> int:
    return int(np.random.SeedSequence([abs(int(p)) for p in parts]).generate_state(1)[0])


def _dtype_of(base):
    return base.params["token_emb"].data.dtype


def _pad_batch(examples):
    """examples: (ids list, labels) where labels is a per-position list or an int."""
    longest = max(len(ids) for ids, _ in examples)
    n = len(examples)
    ids = np.full((n, longest), PAD, dtype=np.int64)
    mask = np.zeros((n, longest), dtype=bool)
    per_position = not isinstance(examples[0][1], (int, np.integer))
    labels = np.full((n, longest), IGNORE, dtype=np.int64) if per_position \
        else np.zeros(n, dtype=np.int64)
    for row, (seq, lab) in enumerate(examples):
        ids[row, :len(seq)] = seq
        mask[row, :len(seq)] = True
        if per_position:
            labels[row, :len(lab)] = lab
        else:
            labels[row] = lab
    return ids, labels, mask


def _epoch_order(seed, epoch, n):
    return np.random.default_rng(_mix(seed, 101, epoch)).permutation(n)


def _chunks(order, size):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def _total_steps(cfg, steps_per_epoch):
    by_steps = cfg.max_steps if cfg.max_steps and cfg.max_steps > 0 else None
    by_epochs = cfg.epochs * steps_per_epoch if cfg.epochs and cfg.epochs > 0 else None
    if by_steps is not None and by_epochs is not None:
        return min(by_steps, by_epochs)
    return by_steps if by_steps is not None else by_epochs


def _set_freeze(components, mask: FreezeMask):
    trainable = []
    for name, weights in components.items():
        flag = mask.trainable[name]
        weights.set_trainable(flag)
        if flag:
            trainable.extend(tensor for _, tensor in weights.named_tensors())
    return trainable


def _fit(cfg, trainable, make_batches, steps_per_epoch, batch_loss, val_eval, record):
    opt = ad.adam_init(trainable, cfg.lr)
    total = _total_steps(cfg, steps_per_epoch)
    best_data = None
    window = []
    step = 0
    epoch = 0
    while step < total:
        for batch in make_batches(epoch):
            step += 1
            loss = batch_loss(batch, step, True)
            ad.zero_grad(trainable)
            ad.backward(loss)
            ad.adam_step(trainable, None, opt)
            window.append(float(loss.data))
            if step % cfg.eval_every == 0 or step == total:
                val_loss, val_metric = val_eval()
                record.points.append(EvalPoint(step, sum(window) / len(window),
                                               val_loss, val_metric))
                window = []
                if val_loss < record.best_val_loss:
                    record.best_val_loss = val_loss
                    record.best_step = step
                    best_data = [t.data.copy() for t in trainable]
            if step >= total:
                break
        epoch += 1
    if best_data is not None:
        for tensor, data in zip(trainable, best_data):
            tensor.data = data
    return record


# --- language-adapter pretraining ------------------------------------------------


def train_language_adapter(corpus, objective, cfg: TrainConfig, base: m.EncoderWeights,
                           vocab: Vocab, out_dir=None) -> TrainResult:
    """Train one bottleneck adapter on masked-prediction over `corpus` while the
    base encoder (and its tied MLM projection) stays bitwise-frozen.

    Masks are drawn fresh each epoch with per-example seeds derived from
    (cfg.seed, epoch, index); validation masks are fixed per index.
    """
    objective = objective.lower()
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if cfg.mode != "lang_adapter":
        raise TrainError(f"cfg.mode must be lang_adapter, got {cfg.mode!r}")
    if cfg.objective is not None and cfg.objective != objective:
        raise TrainError(f"cfg.objective {cfg.objective!r} conflicts with {objective!r}")

    records = list(corpus)
    if len(records) < 2:
        raise EmptyCorpusError("language-adapter training needs at least 2 sentences")
    if objective == "tlm" and not all(isinstance(r, AnnotatedSentence) for r in records):
        raise ObjectiveDataMismatchError(
            "tlm needs span-annotated sentences; the corpus contains plain text")

    tokenized = [tokenize(r, vocab) for r in records]
    n_val = max(1, len(records) // 10)
    train_idx = list(range(len(records) - n_val))
    val_idx = list(range(len(records) - n_val, len(records)))

    masker = _MASKERS[objective]
    adapter = m.AdapterWeights.init(base.config, cfg.reduction_factor,
                                    seed=_mix(cfg.seed, 808), dtype=_dtype_of(base))
    head = m.HeadWeights.tied_mlm(base.params["token_emb"])
    stack = m.AdapterStack(language=adapter)

    components = {"base": base, "language_adapter": adapter}
    mask = FreezeMask({"base": False, "language_adapter": True})
    trainable = _set_freeze(components, mask)
    before = snapshot_components(components)

    def examples_for(indices, epoch=None):
        out = []
        for i in indices:
            seed = _mix(cfg.seed, 303, i) if epoch is None else _mix(cfg.seed, 202, epoch, i)
            masked = masker(tokenized[i], cfg.masking, rng_seed=seed)
            out.append((masked.input_ids, masked.labels))
        return out

    def make_batches(epoch):
        order = _epoch_order(cfg.seed, epoch, len(train_idx))
        return [_pad_batch(examples_for([train_idx[i] for i in chunk], epoch))
                for chunk in _chunks(order, cfg.batch_size)]

    def forward(ids, attn, training, step):
        h = m.encoder_forward(ids, base, stack, mode="train" if training else "eval",
                              attn_mask=attn, dropout_p=cfg.dropout_p,
                              dropout_seed=_mix(cfg.seed, 404, step))
        return m.head_forward(h, head)

    def batch_loss(batch, step, training):
        ids, labels, attn = batch
        return ad.cross_entropy(forward(ids, attn, training, step), labels, IGNORE)

    val_batches = [_pad_batch(examples_for(list(chunk)))
                   for chunk in _chunks(val_idx, cfg.batch_size)]

    def val_eval():
        nll = 0.0
        correct = 0
        total = 0
        for ids, labels, attn in val_batches:
            logits = forward(ids, attn, False, 0)
            labeled = labels != IGNORE
            n = int(labeled.sum())
            nll += float(ad.cross_entropy(logits, labels, IGNORE).data) * n
            predictions = np.argmax(logits.data, axis=-1)
            correct += int((predictions[labeled] == labels[labeled]).sum())
            total += n
        return nll / total, correct / total

    record = RunRecord(mode=cfg.mode, objective=objective, seed=cfg.seed)
    _fit(cfg, trainable, make_batches, math.ceil(len(train_idx) / cfg.batch_size),
         batch_loss, val_eval, record)

    result = TrainResult(record, components, mask, before)
    if out_dir is not None:
        _write_run_dir(result, out_dir, base, vocab, cfg, task="lm",
                       files={"base": base, "adapter": adapter},
                       component_map={"base": "base.ckpt", "vocab": "vocab.json",
                                      "language": ["adapter.ckpt"]},
                       best="adapter.ckpt")
    return result


# --- downstream-task training ------------------------------------------------------


def _sa_examples(examples, vocab, classes):
    index = {c: i for i, c in enumerate(classes)}
    prepared = []
    for example in examples:
        if example.label not in index:
            raise LabelSpaceError(f"label {example.label!r} outside head classes {classes}")
        prepared.append((tokenize(example.text, vocab).token_ids, index[example.label]))
    return prepared


def _ner_examples(examples, vocab, classes):
    index = {c: i for i, c in enumerate(classes)}
    prepared = []
    for example in examples:
        for tag in example.tags:
            if tag not in index:
                raise LabelSpaceError(f"tag {tag!r} outside head classes {classes}")
        sent = tokenize(" ".join(example.tokens), vocab)
        if len(sent.word_boundaries) != len(example.tokens):
            raise LabelSpaceError(
                f"token list does not survive whitespace round trip: {example.tokens!r}")
        labels = [IGNORE] * len(sent.token_ids)
        for (start, _), tag in zip(sent.word_boundaries, example.tags):
            labels[start] = index[tag]  # first piece of each word carries the tag
        prepared.append((sent.token_ids, labels, [s for s, _ in sent.word_boundaries],
                         list(example.tags)))
    return prepared


def _expected_mode(language_slot):
    if language_slot is None:
        return "task_adapter_only"
    if isinstance(language_slot, m.AdapterWeights):
        return "task_on_lang"
    if isinstance(language_slot, (list, tuple)):
        return "task_on_fusion"
    raise TrainError(f"bad language_slot {type(language_slot).__name__}")


def train_task_adapter(splits: Splits, task, cfg: TrainConfig, base: m.EncoderWeights,
                       vocab: Vocab, language_slot=None, out_dir=None) -> TrainResult:
    """Train a task adapter + head (and fusion weights, when stacking on a
    fusion of language adapters) with the base and language adapters frozen."""
    if task not in ("sa", "ner"):
        raise ValueError(f"task must be sa or ner, got {task!r}")
    expected = _expected_mode(language_slot)
    if cfg.mode != expected:
        raise TrainError(f"cfg.mode {cfg.mode!r} does not match language_slot ({expected})")

    dtype = _dtype_of(base)
    components = {"base": base}
    mask_flags = {"base": False}
    language = None
    fusion = None
    if isinstance(language_slot, m.AdapterWeights):
        m.check_adapter_fits(language_slot, base.config)
        language = language_slot
        components["language_adapter"] = language_slot
        mask_flags["language_adapter"] = False
    elif isinstance(language_slot, (list, tuple)):
        adapters = list(language_slot)
        if len(adapters) < 2:
            raise FusionArityError(f"fusion needs at least 2 adapters, got {len(adapters)}")
        for i, adapter in enumerate(adapters):
            m.check_adapter_fits(adapter, base.config)
            components[f"language_adapter_{i}"] = adapter
            mask_flags[f"language_adapter_{i}"] = False
        fusion = m.FusionWeights.init(base.config, seed=_mix(cfg.seed, 606), dtype=dtype)
        language = m.FusionSlot(adapters, fusion)
        components["fusion"] = fusion
        mask_flags["fusion"] = True

    task_adapter = m.AdapterWeights.init(base.config, cfg.reduction_factor,
                                         seed=_mix(cfg.seed, 505), dtype=dtype)
    classes = list(SA_LABELS) if task == "sa" else \
        sorted({tag for example in splits.train for tag in example.tags})
    head = m.HeadWeights.init("seq_cls" if task == "sa" else "tok_cls",
                              base.config.d_model, len(classes),
                              seed=_mix(cfg.seed, 707), dtype=dtype)
    components["task_adapter"] = task_adapter
    components["head"] = head
    mask_flags["task_adapter"] = True
    mask_flags["head"] = True
    stack = m.AdapterStack(language=language, task=task_adapter)

    return _run_task(splits, task, cfg, base, vocab, stack, components,
                     FreezeMask(mask_flags), classes, head, out_dir)


def train_full_finetune(splits: Splits, task, cfg: TrainConfig, base: m.EncoderWeights,
                        vocab: Vocab, out_dir=None) -> TrainResult:
    """Baseline: every base parameter plus the head trains; no adapters."""
    if task not in ("sa", "ner"):
        raise ValueError(f"task must be sa or ner, got {task!r}")
    if cfg.mode != "full_ft":
        raise TrainError(f"cfg.mode must be full_ft, got {cfg.mode!r}")
    classes = list(SA_LABELS) if task == "sa" else \
        sorted({tag for example in splits.train for tag in example.tags})
    head = m.HeadWeights.init("seq_cls" if task == "sa" else "tok_cls",
                              base.config.d_model, len(classes),
                              seed=_mix(cfg.seed, 707), dtype=_dtype_of(base))
    components = {"base": base, "head": head}
    mask = FreezeMask({"base": True, "head": True})
    return _run_task(splits, task, cfg, base, vocab, m.AdapterStack.empty(),
                     components, mask, classes, head, out_dir)


def _run_task(splits, task, cfg, base, vocab, stack, components, mask, classes, head, out_dir):
    prepare = _sa_examples if task == "sa" else _ner_examples
    train_examples = prepare(splits.train, vocab, classes)
    val_examples = prepare(splits.val, vocab, classes)
    if not train_examples or not val_examples:
        raise EmptyCorpusError("task training needs nonempty train and val splits")

    trainable = _set_freeze(components, mask)
    before = snapshot_components(components)

    def as_batch(examples):
        return _pad_batch([(e[0], e[1]) for e in examples])

    def make_batches(epoch):
        order = _epoch_order(cfg.seed, epoch, len(train_examples))
        return [as_batch([train_examples[i] for i in chunk])
                for chunk in _chunks(order, cfg.batch_size)]

    def forward(ids, attn, training, step):
        h = m.encoder_forward(ids, base, stack, mode="train" if training else "eval",
                              attn_mask=attn, dropout_p=cfg.dropout_p,
                              dropout_seed=_mix(cfg.seed, 404, step))
        return m.head_forward(h, head)

    def batch_loss(batch, step, training):
        ids, labels, attn = batch
        return ad.cross_entropy(forward(ids, attn, training, step), labels, IGNORE)

    val_chunks = list(_chunks(list(range(len(val_examples))), cfg.batch_size))

    def val_eval():
        nll = 0.0
        weight = 0
        predictions = []
        for chunk in val_chunks:
            batch_examples = [val_examples[i] for i in chunk]
            ids, labels, attn = as_batch(batch_examples)
            logits = forward(ids, attn, False, 0)
            if task == "sa":
                n = len(chunk)
            else:
                n = int((labels != IGNORE).sum())
            nll += float(ad.cross_entropy(logits, labels, IGNORE).data) * n
            weight += n
            raw = np.argmax(logits.data, axis=-1)
            if task == "sa":
                predictions.extend(classes[int(r)] for r in raw)
            else:
                for row, example in zip(raw, batch_examples):
                    predictions.append([classes[int(row[s])] for s in example[2]])
        if task == "sa":
            metric = f1_binary(predictions, [classes[e[1]] for e in val_examples]).f1
        else:
            metric = f1_seqeval(predictions, [e[3] for e in val_examples]).f1
        return nll / weight, metric

    record = RunRecord(mode=cfg.mode, objective=None, seed=cfg.seed)
    _fit(cfg, trainable, make_batches, math.ceil(len(train_examples) / cfg.batch_size),
         batch_loss, val_eval, record)

    result = TrainResult(record, components, mask, before, classes=classes)
    if out_dir is not None:
        files = {"base": base, "head": head}
        component_map = {"base": "base.ckpt", "vocab": "vocab.json", "head": "head.ckpt"}
        if "task_adapter" in components:
            files["task_adapter"] = components["task_adapter"]
            component_map["task_adapter"] = "task_adapter.ckpt"
        language_files = []
        for name in sorted(components):
            if name.startswith("language_adapter"):
                filename = f"{name}.ckpt"
                files[filename.removesuffix('.ckpt')] = components[name]
                language_files.append(filename)
        if language_files:
            component_map["language"] = language_files
        if "fusion" in components:
            files["fusion"] = components["fusion"]
            component_map["fusion"] = "fusion.ckpt"
        best = "base.ckpt" if cfg.mode == "full_ft" else "task_adapter.ckpt"
        _write_run_dir(result, out_dir, base, vocab, cfg, task=task, files=files,
                       component_map=component_map, best=best)
    return result


def _write_run_dir(result, out_dir, base, vocab, cfg, task, files, component_map, best):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, weights in files.items():
        m.save_checkpoint(weights, out_dir / f"{name}.ckpt")
    vocab.save(out_dir / "vocab.json")
    config = {
        "task": task,
        "mode": cfg.mode,
        "objective": result.record.objective,
        "classes": result.classes,
        "encoder": asdict(base.config),
        "train": asdict(cfg),
        "components": component_map,
    }
    (out_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    result.record.best_checkpoint = best
    result.record.write(out_dir)
    result.out_dir = str(out_dir)
