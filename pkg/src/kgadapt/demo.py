"""One-command reproducible toy experiment over the bundled fixtures.

fetch -> corpus -> language adapters (ConceptNet + wiki) -> task adapters in
three configurations (no language adapter, ConceptNet adapter, fusion of both)
-> sentiment evaluation. Every random choice derives from one seed, so a rerun
with the same seed is byte-identical.

The training recipe here is deliberately not the paper-preset one: the
desk-scale base encoder starts from random weights rather than a pretrained
multilingual model, so the toy needs a larger learning rate and a few hundred
steps. The paper presets stay available through --preset on the train
subcommands.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from . import model as m
from .eval import Splits, evaluate_model, f1_binary, load_sa_dataset, predict_sa, CheckpointSet
from .kg_ingest import Skip, build_corpus, fetch_edges, load_corpus, load_text_corpus, parse_edge
from .text_pipeline import train_vocab
from .training import TrainConfig, train_language_adapter, train_task_adapter

DEMO_ENCODER = dict(n_layers=2, d_model=64, n_heads=4, d_ff=128, max_seq_len=64, dropout_p=0.1)
LA_STEPS_CN = 160
LA_STEPS_WIKI = 320  # keeps the 1:2 ConceptNet:wiki budget ratio
TA_STEPS = 260
DEMO_LR = 3e-3
DEMO_BATCH = 16
DEMO_EVAL_EVERY = 40


def fixtures_dir() -> Path:
    override = os.environ.get("KGADAPT_FIXTURES")
    if override:
        return Path(override)
    return Path(__file__).resolve().parent / "fixtures"


def _mix(*parts):
    import numpy as np

    return int(np.random.SeedSequence([abs(int(p)) for p in parts]).generate_state(1)[0])


def _la_config(seed, steps):
    return TrainConfig(mode="lang_adapter", lr=DEMO_LR, batch_size=DEMO_BATCH,
                       max_steps=steps, dropout_p=0.1, seed=seed,
                       eval_every=DEMO_EVAL_EVERY)


def _ta_config(mode, seed):
    return TrainConfig(mode=mode, lr=DEMO_LR, batch_size=DEMO_BATCH, max_steps=TA_STEPS,
                       dropout_p=0.1, seed=seed, eval_every=DEMO_EVAL_EVERY)


def load_demo_inputs(out_dir: Path):
    """Fetch + verbalize the ConceptNet fixture, load wiki text and SA toys."""
    fixtures = fixtures_dir()
    triples = []
    skips = 0
    for raw in fetch_edges("mt", fixture_dir=fixtures / "conceptnet_mt", page_limit=10):
        parsed = parse_edge(raw)
        if isinstance(parsed, Skip):
            skips += 1
        else:
            triples.append(parsed)
    corpus_path = out_dir / "cn_corpus.jsonl"
    stats = build_corpus(triples, out=corpus_path, lang="mt")
    cn_corpus = load_corpus(corpus_path)
    wiki_corpus = load_text_corpus(fixtures / "wiki_mt.txt")
    sa = load_sa_dataset(fixtures / "sa_toy.jsonl")
    return cn_corpus, wiki_corpus, sa, {"triples": stats.sentence_count, "skipped_edges": skips,
                                        "per_relation": stats.per_relation}


def build_demo_model(cn_corpus, wiki_corpus, sa: Splits, seed):
    texts = [getattr(s, "text", s) for s in cn_corpus] + list(wiki_corpus) \
        + [e.text for e in sa.train]
    vocab = train_vocab(texts, 512)
    config = m.EncoderConfig(vocab_size=len(vocab), **DEMO_ENCODER)
    base = m.EncoderWeights.init(config, seed=_mix(seed, 11))
    return vocab, base


def run_demo(out_dir, seed=7) -> dict:
    """Full pipeline; returns (and writes) the comparison summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cn_corpus, wiki_corpus, sa, corpus_stats = load_demo_inputs(out_dir)
    vocab, base = build_demo_model(cn_corpus, wiki_corpus, sa, seed)

    cn_la = train_language_adapter(cn_corpus, "mlm", _la_config(seed, LA_STEPS_CN),
                                   base, vocab, out_dir=out_dir / "la_cn").adapter
    wiki_la = train_language_adapter(wiki_corpus, "mlm", _la_config(seed, LA_STEPS_WIKI),
                                     base, vocab, out_dir=out_dir / "la_wiki").adapter

    arms = (("task_only", "task_adapter_only", None),
            ("cn_la", "task_on_lang", cn_la),
            ("fusion", "task_on_fusion", [cn_la, wiki_la]))
    configs = {}
    for name, mode, slot in arms:
        run_dir = out_dir / f"ta_{name}"
        train_task_adapter(sa, "sa", _ta_config(mode, seed), base, vocab,
                           language_slot=slot, out_dir=run_dir)
        report = evaluate_model(run_dir, sa, "sa", seed=seed)
        report.write(run_dir / "report.json")
        configs[name] = {"test_f1": report.f1, "test_precision": report.precision,
                         "test_recall": report.recall, "run_dir": f"ta_{name}"}

    summary = {"report_version": 1, "seed": seed, "task": "sa",
               "corpus": corpus_stats, "configs": configs}
    (out_dir / "demo_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def toy_transfer(seeds=(7, 8, 9), out_dir=None) -> dict:
    """Directional transfer check: task adapter alone vs task adapter stacked
    on a ConceptNet language adapter, mean validation F1 over the seeds."""
    import tempfile

    scores = {"task_adapter_only": [], "task_on_cn_la": []}
    with tempfile.TemporaryDirectory() as tmp:
        work = Path(out_dir) if out_dir is not None else Path(tmp)
        work.mkdir(parents=True, exist_ok=True)
        cn_corpus, wiki_corpus, sa, _ = load_demo_inputs(work)
        for seed in seeds:
            vocab, base = build_demo_model(cn_corpus, wiki_corpus, sa, seed)
            cn_la = train_language_adapter(cn_corpus, "mlm", _la_config(seed, LA_STEPS_CN),
                                           base, vocab).adapter
            for key, mode, slot in (("task_adapter_only", "task_adapter_only", None),
                                    ("task_on_cn_la", "task_on_lang", cn_la)):
                result = train_task_adapter(sa, "sa", _ta_config(mode, seed), base, vocab,
                                            language_slot=slot)
                ckpt = CheckpointSet(base, vocab, m.AdapterStack(
                    language=slot if mode == "task_on_lang" else None,
                    task=result.task_adapter), result.head, result.classes, "sa")
                preds = predict_sa(ckpt, sa.val)
                scores[key].append(f1_binary(preds, [e.label for e in sa.val]).f1)
    return {
        "seeds": list(seeds),
        "val_f1": scores,
        "mean_val_f1": {key: sum(vals) / len(vals) for key, vals in scores.items()},
    }
