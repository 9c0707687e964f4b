"""Tokenization, vocabulary construction, and the three masking objectives.

Sentences are split into whitespace words; a word is one vocab token when
frequent enough and falls back to character pieces otherwise, so multilingual
concept strings never explode the UNK rate. The maskers (per-token, per-word,
and targeted per-word) are pure functions of (sentence, config, seed).
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyCorpusError, IngestIOError, NoTargetsError, PipelineError
from .kg_ingest import AnnotatedSentence

IGNORE = -100

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
N_SPECIAL = len(SPECIAL_TOKENS)

_WORD_RE = re.compile(r"\S+")


@dataclass
class Vocab:
    tokens: list  # id -> token string; the five specials occupy ids 0..4
    lowercase: bool = False
    token_to_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:N_SPECIAL] != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the special tokens")
        if len(self.tokens) < N_SPECIAL + 1:
            raise ValueError("vocab needs at least one regular token")
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("vocab contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def save(self, path):
        payload = {"tokens": self.tokens, "lowercase": self.lowercase}
        try:
            Path(path).write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
        except OSError as exc:
            raise IngestIOError(f"cannot write vocab to {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "Vocab":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data["tokens"], lowercase=bool(data.get("lowercase", False)))


def train_vocab(corpus, target_size, lowercase=False) -> Vocab:
    """Frequency-ranked vocabulary: all characters first (the fallback
    alphabet), then whole words by descending frequency until `target_size`."""
    if target_size < N_SPECIAL + 1:
        raise ValueError(f"target_size must be >= {N_SPECIAL + 1}")
    word_freq = Counter()
    char_freq = Counter()
    for sentence in corpus:
        text = sentence.text if isinstance(sentence, AnnotatedSentence) else sentence
        if lowercase:
            text = text.lower()
        for word in text.split():
            word_freq[word] += 1
            char_freq.update(word)
    if not word_freq:
        raise EmptyCorpusError("cannot train a vocabulary on an empty corpus")

    budget = target_size - N_SPECIAL
    by_count = lambda items: sorted(items, key=lambda kv: (-kv[1], kv[0]))
    chosen = [ch for ch, _ in by_count(char_freq.items())][:budget]
    have = set(chosen)
    for word, _ in by_count(word_freq.items()):
        if len(chosen) >= budget:
            break
        if word not in have:
            chosen.append(word)
            have.add(word)
    return Vocab(SPECIAL_TOKENS + chosen, lowercase=lowercase)


@dataclass
class TokenizedSentence:
    token_ids: list        # [CLS] pieces... [SEP]
    word_boundaries: list  # per word, [start, end) over token positions
    word_roles: list       # per word: subject | predicate | object | plain
    vocab_size: int

    def n_words(self):
        return len(self.word_boundaries)


def tokenize(sentence, vocab: Vocab) -> TokenizedSentence:
    """CLS + word pieces + SEP, with word boundaries and span-derived roles.

    A word whose character range lies inside the sentence's subject span gets
    role "subject" (likewise predicate/object); plain strings give all-plain
    roles. Lowercasing, when the vocab asks for it, happens at lookup time so
    the span arithmetic always runs on the original text.
    """
    if isinstance(sentence, AnnotatedSentence):
        text = sentence.text
        spans = (("subject", sentence.subject_span),
                 ("predicate", sentence.predicate_span),
                 ("object", sentence.object_span))
    else:
        text = sentence
        spans = None

    ids = [CLS]
    boundaries = []
    roles = []
    for match in _WORD_RE.finditer(text):
        word = match.group(0)
        if vocab.lowercase:
            word = word.lower()
        pieces = _word_pieces(word, vocab)
        boundaries.append((len(ids), len(ids) + len(pieces)))
        ids.extend(pieces)
        roles.append(_role_of(match.start(), match.end(), spans))
    ids.append(SEP)
    return TokenizedSentence(ids, boundaries, roles, len(vocab))


def _word_pieces(word, vocab):
    whole = vocab.token_to_id.get(word)
    if whole is not None:
        return [whole]
    return [vocab.token_to_id.get(ch, UNK) for ch in word]


def _role_of(start, end, spans):
    if spans is None:
        return "plain"
    for role, (s, e) in spans:
        if start >= s and end <= e:
            return role
    return "plain"


@dataclass(frozen=True)
class MaskingConfig:
    p_mlm: float = 0.15
    p_tlm: float = 0.5
    replace_mask: float = 0.8
    replace_random: float = 0.1
    keep_original: float = 0.1

    def __post_init__(self):
        for name in ("p_mlm", "p_tlm", "replace_mask", "replace_random", "keep_original"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {value}")
        total = self.replace_mask + self.replace_random + self.keep_original
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"replacement fractions must sum to 1, got {total}")


@dataclass
class MaskedExample:
    input_ids: list
    labels: list    # original id at predicted positions, IGNORE elsewhere
    objective: str  # mlm | flm | tlm
    seed: int

    def to_json(self) -> dict:
        return {"input_ids": self.input_ids, "labels": self.labels,
                "objective": self.objective, "seed": self.seed}


def mask_mlm(ts: TokenizedSentence, cfg: MaskingConfig | None = None, rng_seed: int = 0) -> MaskedExample:
    """Per-token masking: each non-special position is selected independently
    with p_mlm; at least one position is always selected."""
    cfg = cfg or MaskingConfig()
    positions = _nonspecial_positions(ts)
    rng = np.random.default_rng(rng_seed)
    draws = rng.random(len(positions))
    selected = [pos for pos, u in zip(positions, draws) if u < cfg.p_mlm]
    if not selected:
        selected = [positions[int(rng.integers(len(positions)))]]
    return _build_example(ts, [[pos] for pos in selected], cfg, rng, "mlm", rng_seed)


def mask_flm(ts: TokenizedSentence, cfg: MaskingConfig | None = None, rng_seed: int = 0) -> MaskedExample:
    """Whole-word masking: selection with p_mlm per word; every token of a
    selected word shares the same replacement action."""
    cfg = cfg or MaskingConfig()
    _nonspecial_positions(ts)
    rng = np.random.default_rng(rng_seed)
    draws = rng.random(len(ts.word_boundaries))
    selected = [i for i, u in enumerate(draws) if u < cfg.p_mlm]
    if not selected:
        selected = [int(rng.integers(len(ts.word_boundaries)))]
    runs = [list(range(*ts.word_boundaries[i])) for i in selected]
    return _build_example(ts, runs, cfg, rng, "flm", rng_seed)


def mask_tlm(ts: TokenizedSentence, cfg: MaskingConfig | None = None, rng_seed: int = 0) -> MaskedExample:
    """Targeted masking: candidates are subject/object-role words only, each
    selected with p_tlm; predicate and plain words are never labeled."""
    cfg = cfg or MaskingConfig()
    candidates = [i for i, role in enumerate(ts.word_roles) if role in ("subject", "object")]
    if not candidates:
        raise NoTargetsError("sentence has no subject/object-role words to target")
    rng = np.random.default_rng(rng_seed)
    draws = rng.random(len(candidates))
    selected = [candidates[i] for i, u in enumerate(draws) if u < cfg.p_tlm]
    if not selected:
        selected = [candidates[int(rng.integers(len(candidates)))]]
    runs = [list(range(*ts.word_boundaries[i])) for i in selected]
    return _build_example(ts, runs, cfg, rng, "tlm", rng_seed)


def _nonspecial_positions(ts):
    if len(ts.token_ids) < 3:
        raise PipelineError("sentence has no maskable tokens")
    return list(range(1, len(ts.token_ids) - 1))


def _build_example(ts, runs, cfg, rng, objective, rng_seed):
    input_ids = list(ts.token_ids)
    labels = [IGNORE] * len(input_ids)
    for run in runs:
        action = rng.random()
        for pos in run:
            labels[pos] = ts.token_ids[pos]
            if action < cfg.replace_mask:
                input_ids[pos] = MASK
            elif action < cfg.replace_mask + cfg.replace_random:
                input_ids[pos] = int(rng.integers(N_SPECIAL, ts.vocab_size))
            # else: keep the original token
    return MaskedExample(input_ids, labels, objective, rng_seed)


def dump_masked(examples, path):
    """Write masked examples as JSONL for inspection."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for ex in examples:
                fh.write(json.dumps(ex.to_json()) + "\n")
    except OSError as exc:
        raise IngestIOError(f"cannot write masked dataset to {path}: {exc}") from exc
