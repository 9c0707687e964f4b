"""Metrics and dataset loaders for the two downstream tasks.

Sentiment analysis uses binary F1 on the positive class (macro-F1 is reported
alongside since the averaging convention is ambiguous in the wild); NER uses
entity-level micro F1 over exact (type, start, end) span matches with lenient
BIO reading (a dangling I-X opens a new span).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AlignmentError, DatasetFormatError, LabelSpaceError, TagAlphabetError
from . import model as m
from .text_pipeline import PAD, Vocab, tokenize

SA_LABELS = ("negative", "positive")
DEFAULT_ENTITY_TYPES = ("LOC", "ORG", "PER")

REPORT_VERSION = 1


@dataclass(frozen=True)
class SaExample:
    text: str
    label: str  # positive | negative


@dataclass(frozen=True)
class NerExample:
    tokens: tuple
    tags: tuple

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise AlignmentError(f"{len(self.tokens)} tokens vs {len(self.tags)} tags")


@dataclass
class Splits:
    train: list
    val: list
    test: list

    def sizes(self):
        return (len(self.train), len(self.val), len(self.test))


@dataclass
class EvalReport:
    task: str
    precision: float
    recall: float
    f1: float
    per_class: dict
    n_examples: int
    seed: int = 0
    macro_f1: float | None = None

    def to_json(self) -> dict:
        out = {"report_version": REPORT_VERSION, "task": self.task,
               "precision": self.precision, "recall": self.recall, "f1": self.f1,
               "per_class": self.per_class, "n_examples": self.n_examples,
               "seed": self.seed}
        if self.macro_f1 is not None:
            out["macro_f1"] = self.macro_f1
        return out

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


def _prf(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def f1_binary(preds, golds, positive_class="positive", seed=0) -> EvalReport:
    """Binary F1 on the positive class, with a per-class table and macro-F1."""
    preds, golds = list(preds), list(golds)
    if len(preds) != len(golds):
        raise AlignmentError(f"{len(preds)} predictions vs {len(golds)} golds")
    if not golds:
        raise AlignmentError("empty label sequences")

    classes = sorted(set(golds) | set(preds))
    per_class = {}
    for cls in classes:
        tp = sum(1 for p, g in zip(preds, golds) if p == cls and g == cls)
        fp = sum(1 for p, g in zip(preds, golds) if p == cls and g != cls)
        fn = sum(1 for p, g in zip(preds, golds) if p != cls and g == cls)
        precision, recall, f1 = _prf(tp, fp, fn)
        per_class[cls] = {"precision": precision, "recall": recall, "f1": f1,
                          "support": sum(1 for g in golds if g == cls)}
    pos = per_class.get(positive_class, {"precision": 0.0, "recall": 0.0, "f1": 0.0})
    macro = sum(c["f1"] for c in per_class.values()) / len(per_class)
    return EvalReport("sa", pos["precision"], pos["recall"], pos["f1"], per_class,
                      n_examples=len(golds), seed=seed, macro_f1=macro)


def extract_entities(tags):
    """Maximal B-X (I-X)* runs as (type, start, end) spans; a dangling I-X
    starts a new span (lenient reading)."""
    spans = set()
    current_type = None
    start = None

    def close(end):
        nonlocal current_type, start
        if current_type is not None:
            spans.add((current_type, start, end))
            current_type, start = None, None

    for i, tag in enumerate(tags):
        if tag == "O":
            close(i)
        elif tag.startswith("B-") and len(tag) > 2:
            close(i)
            current_type, start = tag[2:], i
        elif tag.startswith("I-") and len(tag) > 2:
            if tag[2:] != current_type:
                close(i)
                current_type, start = tag[2:], i
        else:
            raise TagAlphabetError(f"unknown tag {tag!r}")
    close(len(tags))
    return spans


def f1_seqeval(pred_tags, gold_tags, seed=0) -> EvalReport:
    """Micro precision/recall/F1 over exact entity-span matches.

    Both arguments are corpora: one tag sequence per sentence.
    """
    if len(pred_tags) != len(gold_tags):
        raise AlignmentError(f"{len(pred_tags)} predicted vs {len(gold_tags)} gold sentences")
    tp = fp = fn = 0
    by_type = {}
    for idx, (pred, gold) in enumerate(zip(pred_tags, gold_tags)):
        if len(pred) != len(gold):
            raise AlignmentError(f"sentence {idx}: {len(pred)} predicted vs {len(gold)} gold tags")
        pred_spans = extract_entities(pred)
        gold_spans = extract_entities(gold)
        tp += len(pred_spans & gold_spans)
        fp += len(pred_spans - gold_spans)
        fn += len(gold_spans - pred_spans)
        for etype in {t for t, _, _ in pred_spans | gold_spans}:
            p_t = {s for s in pred_spans if s[0] == etype}
            g_t = {s for s in gold_spans if s[0] == etype}
            slot = by_type.setdefault(etype, {"tp": 0, "fp": 0, "fn": 0, "support": 0})
            slot["tp"] += len(p_t & g_t)
            slot["fp"] += len(p_t - g_t)
            slot["fn"] += len(g_t - p_t)
            slot["support"] += len(g_t)
    precision, recall, f1 = _prf(tp, fp, fn)
    per_class = {}
    for etype, c in sorted(by_type.items()):
        p, r, f = _prf(c["tp"], c["fp"], c["fn"])
        per_class[etype] = {"precision": p, "recall": r, "f1": f, "support": c["support"]}
    return EvalReport("ner", precision, recall, f1, per_class,
                      n_examples=len(gold_tags), seed=seed)


# --- dataset loaders ----------------------------------------------------------


def _tail_split(records):
    n = len(records)
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test
    return Splits(records[:n_train], records[n_train:n_train + n_val],
                  records[n_train + n_val:])


def load_sa_dataset(path) -> Splits:
    """JSONL of {"text", "label"}; a directory holds train/val/test.jsonl,
    a single file is split 80/10/10 in order."""
    path = Path(path)
    if path.is_dir():
        return Splits(*(_read_sa_file(path / f"{split}.jsonl")
                        for split in ("train", "val", "test")))
    return _tail_split(_read_sa_file(path))


def _read_sa_file(path):
    examples = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            raise DatasetFormatError(f"{path}: malformed JSON", line=lineno) from None
        text = record.get("text") if isinstance(record, dict) else None
        label = record.get("label") if isinstance(record, dict) else None
        if not isinstance(text, str) or not text.strip():
            raise DatasetFormatError(f"{path}: missing text", line=lineno)
        if label not in SA_LABELS:
            raise DatasetFormatError(f"{path}: label must be one of {SA_LABELS}, got {label!r}",
                                     line=lineno)
        examples.append(SaExample(text, label))
    return examples


def load_ner_dataset(path, entity_types=DEFAULT_ENTITY_TYPES) -> Splits:
    """CoNLL-style token<TAB>tag lines with blank-line sentence separators.

    Tags are validated against `entity_types` (WikiANN's PER/LOC/ORG by
    default); a directory holds train/val/test files, a single file splits
    80/10/10 in order.
    """
    path = Path(path)
    if path.is_dir():
        parts = []
        for split in ("train", "val", "test"):
            for suffix in (".conll", ".txt"):
                candidate = path / f"{split}{suffix}"
                if candidate.exists():
                    parts.append(_read_ner_file(candidate, entity_types))
                    break
            else:
                raise DatasetFormatError(f"{path}: no {split}.conll or {split}.txt")
        return Splits(*parts)
    return _tail_split(_read_ner_file(path, entity_types))


def _read_ner_file(path, entity_types):
    allowed = {"O"} | {f"{prefix}-{t}" for prefix in ("B", "I") for t in entity_types}
    examples = []
    tokens, tags = [], []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            if tokens:
                examples.append(NerExample(tuple(tokens), tuple(tags)))
                tokens, tags = [], []
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip():
            raise DatasetFormatError(f"{path}: expected token<TAB>tag", line=lineno)
        token, tag = parts[0].strip(), parts[1].strip()
        if tag not in allowed:
            raise DatasetFormatError(f"{path}: unknown tag {tag!r}", line=lineno)
        tokens.append(token)
        tags.append(tag)
    if tokens:
        examples.append(NerExample(tuple(tokens), tuple(tags)))
    return examples


# --- model evaluation -----------------------------------------------------------


@dataclass
class CheckpointSet:
    """Everything needed to run a trained configuration."""

    base: m.EncoderWeights
    vocab: Vocab
    stack: m.AdapterStack
    head: m.HeadWeights
    classes: list
    task: str


def load_checkpoint_set(run_dir) -> CheckpointSet:
    """Load the components written by a training run directory."""
    run_dir = Path(run_dir)
    try:
        config = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    except OSError as exc:
        raise DatasetFormatError(f"cannot read run config in {run_dir}: {exc}") from exc
    comp = config["components"]
    base = m.load_checkpoint(run_dir / comp["base"])
    vocab = Vocab.load(run_dir / comp["vocab"])

    language = None
    lang_files = comp.get("language") or []
    adapters = [m.load_checkpoint(run_dir / f) for f in lang_files]
    for adapter in adapters:
        m.check_adapter_fits(adapter, base.config)
    if comp.get("fusion"):
        fusion = m.load_checkpoint(run_dir / comp["fusion"])
        m.check_fusion_fits(fusion, base.config)
        language = m.FusionSlot(adapters, fusion)
    elif adapters:
        language = adapters[0]

    task_adapter = None
    if comp.get("task_adapter"):
        task_adapter = m.load_checkpoint(run_dir / comp["task_adapter"])
        m.check_adapter_fits(task_adapter, base.config)
    if comp.get("head"):
        head = m.load_checkpoint(run_dir / comp["head"])
    else:
        head = m.HeadWeights.tied_mlm(base.params["token_emb"])
    stack = m.AdapterStack(language=language, task=task_adapter)
    return CheckpointSet(base, vocab, stack, head, config.get("classes") or [],
                         config["task"])


def predict_sa(ckpt: CheckpointSet, examples, batch_size=32):
    preds = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        sentences = [tokenize(e.text, ckpt.vocab) for e in chunk]
        ids, mask = _pad_ids([s.token_ids for s in sentences])
        h = m.encoder_forward(ids, ckpt.base, ckpt.stack, mode="eval", attn_mask=mask)
        logits = m.head_forward(h, ckpt.head)
        for row in np.argmax(logits.data, axis=-1):
            preds.append(ckpt.classes[int(row)])
    return preds


def predict_ner(ckpt: CheckpointSet, examples, batch_size=32):
    preds = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        sentences = [tokenize(" ".join(e.tokens), ckpt.vocab) for e in chunk]
        ids, mask = _pad_ids([s.token_ids for s in sentences])
        h = m.encoder_forward(ids, ckpt.base, ckpt.stack, mode="eval", attn_mask=mask)
        logits = m.head_forward(h, ckpt.head)
        for row, sent, example in zip(logits.data, sentences, chunk):
            raw = np.argmax(row, axis=-1)
            tag_ids = [int(raw[s]) for s, _ in sent.word_boundaries]
            if len(tag_ids) != len(example.tokens):
                raise AlignmentError(
                    f"tokenizer produced {len(tag_ids)} words for {len(example.tokens)} tokens")
            preds.append([ckpt.classes[t] for t in tag_ids])
    return preds


def _pad_ids(id_lists):
    longest = max(len(ids) for ids in id_lists)
    ids = np.full((len(id_lists), longest), PAD, dtype=np.int64)
    mask = np.zeros((len(id_lists), longest), dtype=bool)
    for row, seq in enumerate(id_lists):
        ids[row, :len(seq)] = seq
        mask[row, :len(seq)] = True
    return ids, mask


def evaluate_model(run_dir_or_set, splits: Splits, task: str, seed=0) -> EvalReport:
    """Eval-mode forward over the test split; pure given fixed checkpoints."""
    ckpt = run_dir_or_set if isinstance(run_dir_or_set, CheckpointSet) \
        else load_checkpoint_set(run_dir_or_set)
    if ckpt.task != task:
        raise LabelSpaceError(f"checkpoint was trained for {ckpt.task!r}, not {task!r}")
    if task == "sa":
        preds = predict_sa(ckpt, splits.test)
        report = f1_binary(preds, [e.label for e in splits.test], seed=seed)
    elif task == "ner":
        preds = predict_ner(ckpt, splits.test)
        report = f1_seqeval(preds, [list(e.tags) for e in splits.test], seed=seed)
    else:
        raise ValueError(f"unknown task {task!r}")
    return report


def aggregate_reports(reports) -> dict:
    """Arithmetic mean over per-seed reports (the multi-run convention)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    return {
        "report_version": REPORT_VERSION,
        "task": reports[0].task,
        "n_runs": len(reports),
        "precision": sum(r.precision for r in reports) / len(reports),
        "recall": sum(r.recall for r in reports) / len(reports),
        "f1": sum(r.f1 for r in reports) / len(reports),
        "per_run_f1": [r.f1 for r in reports],
        "seeds": [r.seed for r in reports],
    }
