"""ConceptNet ingestion: edge fetching, triple filtering, and verbalization.

The fetch client talks to the public query API (or replays recorded page
fixtures), `parse_edge` keeps only the twelve supported relations, and
`verbalize` turns each triple into a span-annotated training sentence.
"""

from __future__ import annotations

import json
import re
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from urllib.parse import urljoin

from .errors import EncodingError, IngestIOError, ParseError, TransportError

DEFAULT_ENDPOINT = "https://api.conceptnet.io"


class Relation(Enum):
    ANTONYM = "Antonym"
    DERIVED_FROM = "DerivedFrom"
    ETYMOLOGICALLY_DERIVED_FROM = "EtymologicallyDerivedFrom"
    ETYMOLOGICALLY_RELATED_TO = "EtymologicallyRelatedTo"
    FORM_OF = "FormOf"
    HAS_CONTEXT = "HasContext"
    IS_A = "IsA"
    RELATED_TO = "RelatedTo"
    SIMILAR_TO = "SimilarTo"
    SYNONYM = "Synonym"
    SYMBOL_OF = "SymbolOf"
    DISTINCT_FROM = "DistinctFrom"


_DEFAULT_PREDICATES = {
    Relation.ANTONYM: "is the opposite of",
    Relation.DERIVED_FROM: "is derived from",
    Relation.ETYMOLOGICALLY_DERIVED_FROM: "is etymologically derived from",
    Relation.ETYMOLOGICALLY_RELATED_TO: "is etymologically related to",
    Relation.FORM_OF: "is a form of",
    Relation.HAS_CONTEXT: "has context of",
    Relation.IS_A: "is a type of",
    Relation.RELATED_TO: "is related to",
    Relation.SIMILAR_TO: "is similar to",
    Relation.SYNONYM: "is a synonym of",
    Relation.SYMBOL_OF: "is a symbol of",
    Relation.DISTINCT_FROM: "is distinct from",
}


@dataclass(frozen=True)
class RelationMapping:
    """Total map from relation to its English predicate phrase."""

    entries: dict

    def __post_init__(self):
        missing = [r.value for r in Relation if r not in self.entries]
        if missing:
            raise ValueError(f"mapping not total, missing: {missing}")
        predicates = [self.entries[r] for r in Relation]
        if any(not isinstance(p, str) or not p.strip() for p in predicates):
            raise ValueError("every predicate must be a nonempty phrase")
        if len(set(predicates)) != len(predicates):
            raise ValueError("predicates must be pairwise distinct")

    @classmethod
    def default(cls) -> "RelationMapping":
        return cls(dict(_DEFAULT_PREDICATES))

    def predicate(self, relation: Relation) -> str:
        return self.entries[relation]


@dataclass(frozen=True)
class Triple:
    """One ConceptNet edge reduced to its surface forms."""

    subject: str
    relation: Relation
    object: str
    subject_lang: str = ""
    object_lang: str = ""
    weight: float = 1.0

    def __post_init__(self):
        if not self.subject.strip() or not self.object.strip():
            raise ValueError("triple endpoints must be nonempty after trimming")
        if self.weight < 0:
            raise ValueError(f"negative edge weight: {self.weight}")


@dataclass
class AnnotatedSentence:
    """Verbalized triple with [start, end) character spans for each part."""

    text: str
    subject_span: tuple
    predicate_span: tuple
    object_span: tuple
    source: Triple | None = None

    def __post_init__(self):
        s, p, o = self.subject_span, self.predicate_span, self.object_span
        if not (0 == s[0] <= s[1] and s[1] + 1 == p[0] <= p[1] and p[1] + 1 == o[0] <= o[1] == len(self.text)):
            raise ValueError(f"spans {s} {p} {o} do not tile text of length {len(self.text)}")
        rebuilt = " ".join((self.text[s[0]:s[1]], self.text[p[0]:p[1]], self.text[o[0]:o[1]]))
        if rebuilt != self.text:
            raise ValueError("span concatenation does not reconstruct text")

    @property
    def subject(self) -> str:
        return self.text[self.subject_span[0]:self.subject_span[1]]

    @property
    def predicate(self) -> str:
        return self.text[self.predicate_span[0]:self.predicate_span[1]]

    @property
    def object(self) -> str:
        return self.text[self.object_span[0]:self.object_span[1]]


@dataclass(frozen=True)
class Skip:
    """Expected filtering outcome of parse_edge (not an error)."""

    reason: str  # unknown_relation | empty_label | missing_language
    detail: str = ""


@dataclass
class CorpusStats:
    sentence_count: int
    per_relation: dict  # relation name -> count


def fetch_edges(language, endpoint=DEFAULT_ENDPOINT, page_limit=10, relation_filter=None,
                fixture_dir=None, session=None, per_page=50, max_retries=3,
                backoff=0.5, sleep=time.sleep):
    """Yield raw edge records from paginated API responses (or page fixtures).

    Follows the response's `view.nextPage` link up to `page_limit` pages and
    retries transient failures (connection errors, 429/5xx) with bounded
    exponential backoff. Fixture mode reads numbered ``*.json`` page files
    from `fixture_dir` in numeric order, which makes runs fully deterministic.
    When `relation_filter` is given, records whose relation id falls outside
    the filter are dropped before yielding.
    """
    if page_limit < 1:
        raise ValueError(f"page_limit must be >= 1, got {page_limit}")
    wanted = None if relation_filter is None else {r.value for r in relation_filter}

    if fixture_dir is not None:
        for path in _numbered_pages(fixture_dir)[:page_limit]:
            yield from _page_edges(_load_fixture_page(path), str(path), wanted)
        return

    if session is None:
        import requests

        session = requests.Session()
    url = f"{endpoint.rstrip('/')}/query?node=/c/{language}&limit={per_page}"
    pages = 0
    while url is not None and pages < page_limit:
        data = _get_page(session, url, max_retries, backoff, sleep)
        yield from _page_edges(data, url, wanted)
        pages += 1
        next_rel = (data.get("view") or {}).get("nextPage")
        url = urljoin(endpoint, next_rel) if next_rel else None


def _numbered_pages(fixture_dir):
    found = []
    for path in Path(fixture_dir).glob("*.json"):
        m = re.search(r"(\d+)", path.stem)
        if m:
            found.append((int(m.group(1)), path))
    found.sort()
    return [path for _, path in found]


def _load_fixture_page(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestIOError(f"cannot read fixture page {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON page: {path}") from exc


def _page_edges(data, page_url, wanted):
    edges = data.get("edges") if isinstance(data, dict) else None
    if not isinstance(edges, list):
        raise ParseError(f"page has no edges array: {page_url}")
    for raw in edges:
        if wanted is not None and _relation_name(raw) not in wanted:
            continue
        yield raw


def _relation_name(raw):
    rel = raw.get("rel") if isinstance(raw, dict) else None
    rel_id = rel.get("@id") if isinstance(rel, dict) else None
    if isinstance(rel_id, str) and rel_id.startswith("/r/"):
        return rel_id[3:]
    return None


# Retry on rate limiting and transient server-side failures only.
_RETRYABLE_STATUS = (429, 500, 502, 503, 504)


def _get_page(session, url, max_retries, backoff, sleep):
    import requests

    last = None
    for attempt in range(max_retries + 1):
        try:
            resp = session.get(url, timeout=30)
        except requests.RequestException as exc:
            last = repr(exc)
        else:
            if resp.status_code == 200:
                try:
                    return resp.json()
                except ValueError as exc:
                    raise ParseError(f"malformed JSON page: {url}") from exc
            if resp.status_code not in _RETRYABLE_STATUS:
                raise TransportError(f"HTTP {resp.status_code} for {url}")
            last = f"HTTP {resp.status_code}"
        if attempt < max_retries:
            sleep(backoff * (2 ** attempt))
    raise TransportError(f"giving up on {url} after {max_retries + 1} attempts ({last})")


def parse_edge(raw, target_lang=None):
    """Turn one raw edge record into a Triple, or Skip it with a reason.

    Skips are expected filtering (unknown relation, empty endpoint label,
    language information absent or not matching `target_lang`); structurally
    broken records raise ParseError instead.
    """
    if not isinstance(raw, dict):
        raise ParseError(f"edge record is not an object: {type(raw).__name__}")
    rel, start, end = raw.get("rel"), raw.get("start"), raw.get("end")
    if not isinstance(rel, dict) or not isinstance(start, dict) or not isinstance(end, dict):
        raise ParseError("edge record missing rel/start/end objects")
    rel_id = rel.get("@id")
    if not isinstance(rel_id, str) or not rel_id.startswith("/r/"):
        raise ParseError(f"bad relation id: {rel_id!r}")

    try:
        relation = Relation(rel_id[3:])
    except ValueError:
        return Skip("unknown_relation", detail=rel_id)

    subject = _node_label(start)
    obj = _node_label(end)
    if not subject or not obj:
        return Skip("empty_label")

    subject_lang = start.get("language") or ""
    object_lang = end.get("language") or ""
    if not subject_lang and not object_lang:
        return Skip("missing_language")
    if target_lang is not None and target_lang not in (subject_lang, object_lang):
        return Skip("missing_language", detail=f"{target_lang} on neither endpoint")

    weight = raw.get("weight", 1.0)
    if not isinstance(weight, (int, float)) or isinstance(weight, bool) or weight < 0:
        raise ParseError(f"bad edge weight: {weight!r}")
    return Triple(subject, relation, obj, subject_lang, object_lang, float(weight))


def _node_label(node):
    label = node.get("label")
    if label is None:
        return ""
    if not isinstance(label, str):
        raise ParseError(f"node label is not a string: {label!r}")
    return label.strip()


def verbalize(triple: Triple, mapping: RelationMapping | None = None) -> AnnotatedSentence:
    """Subject + English predicate + object, with character spans for each part."""
    mapping = mapping or RelationMapping.default()
    predicate = mapping.predicate(triple.relation)
    s_end = len(triple.subject)
    p_end = s_end + 1 + len(predicate)
    text = f"{triple.subject} {predicate} {triple.object}"
    return AnnotatedSentence(
        text=text,
        subject_span=(0, s_end),
        predicate_span=(s_end + 1, p_end),
        object_span=(p_end + 1, len(text)),
        source=triple,
    )


def build_corpus(triples, mapping=None, out=None, lang=None, dedup=False) -> CorpusStats:
    """Write one JSONL record per triple and return count + relation histogram.

    Output order is input order; duplicates are kept unless `dedup` asks for
    exact-match deduplication.
    """
    mapping = mapping or RelationMapping.default()
    histogram = Counter()
    seen = set()
    count = 0
    try:
        with open(out, "w", encoding="utf-8") as fh:
            for triple in triples:
                if dedup:
                    key = (triple.subject, triple.relation, triple.object,
                           triple.subject_lang, triple.object_lang)
                    if key in seen:
                        continue
                    seen.add(key)
                sent = verbalize(triple, mapping)
                record = {
                    "text": sent.text,
                    "spans": {
                        "subject": list(sent.subject_span),
                        "predicate": list(sent.predicate_span),
                        "object": list(sent.object_span),
                    },
                    "lang": lang or triple.subject_lang,
                }
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
                histogram[triple.relation.value] += 1
                count += 1
    except OSError as exc:
        raise IngestIOError(f"cannot write corpus to {out}: {exc}") from exc
    return CorpusStats(count, dict(histogram))


def load_text_corpus(path):
    """Nonempty whitespace-trimmed lines of a UTF-8 text file, in order."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IngestIOError(f"cannot read {path}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise EncodingError(f"{path} is not valid UTF-8 at byte {exc.start}",
                            byte_offset=exc.start) from exc
    return [line.strip() for line in text.splitlines() if line.strip()]


def load_corpus(path):
    """Load a training corpus: JSONL records become AnnotatedSentence when they
    carry spans and plain strings otherwise; any other file is read as text."""
    path = Path(path)
    if path.suffix != ".jsonl":
        return load_text_corpus(path)
    sentences = []
    for lineno, line in enumerate(load_text_corpus(path), start=1):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: malformed corpus record") from exc
        if not isinstance(record, dict) or not isinstance(record.get("text"), str):
            raise ParseError(f"{path}:{lineno}: corpus record needs a text field")
        spans = record.get("spans")
        if spans is None:
            sentences.append(record["text"])
        else:
            sentences.append(AnnotatedSentence(
                text=record["text"],
                subject_span=tuple(spans["subject"]),
                predicate_span=tuple(spans["predicate"]),
                object_span=tuple(spans["object"]),
            ))
    return sentences


def triple_to_json(triple: Triple) -> dict:
    return {
        "subject": triple.subject,
        "relation": triple.relation.value,
        "object": triple.object,
        "subject_lang": triple.subject_lang,
        "object_lang": triple.object_lang,
        "weight": triple.weight,
    }


def triple_from_json(record: dict) -> Triple:
    try:
        relation = Relation(record["relation"])
        return Triple(record["subject"], relation, record["object"],
                      record.get("subject_lang", ""), record.get("object_lang", ""),
                      float(record.get("weight", 1.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad triple record {record!r}: {exc}") from exc


def write_triples(triples, path):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for triple in triples:
                fh.write(json.dumps(triple_to_json(triple), ensure_ascii=False) + "\n")
    except OSError as exc:
        raise IngestIOError(f"cannot write triples to {path}: {exc}") from exc


def load_triples(path):
    triples = []
    for lineno, line in enumerate(load_text_corpus(path), start=1):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: malformed triple record") from exc
        triples.append(triple_from_json(record))
    return triples
