#!/usr/bin/env python3
"""Regenerate the bundled fixtures (ConceptNet pages, wiki text, SA/NER toys).

Everything is seeded, so reruns are byte-identical. The toy universe is a
small Maltese/English sentiment lexicon: ConceptNet-style edges link each
Maltese word to its English counterparts inside one sentiment field, and the
SA sentences are decidable from those same keywords.
"""

import json
import random
from pathlib import Path

FIXTURES = Path(__file__).resolve().parent.parent / "src" / "kgadapt" / "fixtures"

POS_MT = ["ferh", "kuntent", "imhabba", "tajjeb", "sabih", "dawl", "xemx", "helu", "paci", "tama"]
POS_EN = ["joy", "happy", "love", "good", "beautiful", "light", "sun", "sweet", "peace", "hope"]
NEG_MT = ["dwejjaq", "imdejjaq", "mibeghda", "hazin", "ikrah", "dlam", "maltemp", "morr", "gwerra", "biza"]
NEG_EN = ["sadness", "sad", "hate", "bad", "ugly", "darkness", "storm", "bitter", "war", "fear"]

FILLER_MT = ["il", "ta", "hija", "huwa", "dan", "fuq", "ma", "kif", "illum", "hafna",
             "ftit", "kbir", "zghir", "jum", "lejl", "dar", "triq", "bahar"]
FILLER_EN = ["the", "is", "a", "very", "today", "feels", "weather", "city", "day",
             "morning", "evening", "quite", "rather", "truly"]

RELATIONS = ["RelatedTo", "Synonym", "IsA", "SimilarTo", "Antonym", "FormOf", "DerivedFrom",
             "HasContext", "EtymologicallyRelatedTo", "EtymologicallyDerivedFrom",
             "SymbolOf", "DistinctFrom"]


def edge(rel, start_label, end_label, start_lang="mt", end_lang="en", weight=1.0):
    def node(label, lang):
        out = {"label": label}
        if lang:
            out["language"] = lang
            out["@id"] = f"/c/{lang}/{label.replace(' ', '_')}"
        else:
            out["@id"] = f"/c/{label.replace(' ', '_')}"
        return out

    return {
        "@id": f"/a/[/r/{rel}/,/c/{start_lang or 'x'}/{start_label.replace(' ', '_')}/,/c/{end_lang or 'x'}/{end_label.replace(' ', '_')}/]",
        "rel": {"@id": f"/r/{rel}", "label": rel},
        "start": node(start_label, start_lang),
        "end": node(end_label, end_lang),
        "weight": weight,
        "surfaceText": None,
    }


def conceptnet_pages():
    rng = random.Random(20240501)
    edges = []
    # same-field links: every Maltese word points at English words of its field
    for mt_words, en_words in ((POS_MT, POS_EN), (NEG_MT, NEG_EN)):
        for i, word in enumerate(mt_words):
            rel = RELATIONS[i % len(RELATIONS)]
            if rel in ("Antonym", "DistinctFrom"):
                rel = "RelatedTo"
            edges.append(edge(rel, word, en_words[i], weight=round(rng.uniform(0.5, 2.5), 2)))
    # secondary in-field links with shifted pairing
    for mt_words, en_words in ((POS_MT, POS_EN), (NEG_MT, NEG_EN)):
        for i, word in enumerate(mt_words[:6]):
            edges.append(edge("Synonym" if i % 2 else "RelatedTo", word,
                              en_words[(i + 1) % len(en_words)],
                              weight=round(rng.uniform(0.5, 2.5), 2)))
    # cross-field opposites
    edges.append(edge("Antonym", "ferh", "sadness"))
    edges.append(edge("Antonym", "tajjeb", "bad"))
    edges.append(edge("DistinctFrom", "dawl", "darkness"))
    # multi-word surface forms stay verbatim
    edges.append(edge("IsA", "qalb tajba", "good heart"))
    edges.append(edge("RelatedTo", "bahar", "sea", weight=1.0))
    # records parse_edge must skip or reject downstream
    edges.append(edge("ExternalURL", "ferh", "http://example.org/ferh", end_lang=""))
    edges.append(edge("RelatedTo", "paci", "", end_lang="en"))
    edges.append(edge("Synonym", "tama", "hope", start_lang="", end_lang=""))

    assert len(edges) == 40, len(edges)
    pages = [edges[:20], edges[20:]]
    out_dir = FIXTURES / "conceptnet_mt"
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, page_edges in enumerate(pages):
        payload = {"edges": page_edges}
        if i + 1 < len(pages):
            payload["view"] = {"nextPage": f"/query?node=/c/mt&offset={20 * (i + 1)}&limit=20",
                               "paginatedProperty": "edges"}
        (out_dir / f"page_{i:03d}.json").write_text(
            json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return len(edges)


def wiki_lines():
    rng = random.Random(77)
    vocab = FILLER_MT + FILLER_EN + POS_MT + NEG_MT + POS_EN + NEG_EN
    lines = []
    for _ in range(160):
        length = rng.randint(5, 11)
        lines.append(" ".join(rng.choice(vocab) for _ in range(length)))
    (FIXTURES / "wiki_mt.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return len(lines)


def sa_dataset():
    rng = random.Random(4242)
    templates = [
        "illum inhossni {a} u {b} u {c}",
        "dan il jum huwa {a} {b} {c}",
        "the day feels {a} and {b} and {c}",
        "{a} {b} {c} fuq il bahar",
        "kif {a} huwa {b} hafna {c}",
        "il lejl kien {a} u {b} u {c}",
        "this morning is {a} {b} very {c}",
        "{a} u {b} u {c} fit triq",
    ]
    examples = []
    for label, mt_words, en_words in (("positive", POS_MT, POS_EN), ("negative", NEG_MT, NEG_EN)):
        pool = mt_words + en_words
        for i in range(300):
            a, b, c = rng.sample(pool, 3)
            text = templates[i % len(templates)].format(a=a, b=b, c=c)
            examples.append({"text": text, "label": label})
    rng.shuffle(examples)
    with open(FIXTURES / "sa_toy.jsonl", "w", encoding="utf-8") as fh:
        for example in examples:
            fh.write(json.dumps(example, ensure_ascii=False) + "\n")
    return len(examples)


def ner_dataset():
    rng = random.Random(99)
    persons = [["anna"], ["omar"], ["luca"], ["maria", "borg"], ["karl"], ["sara", "vella"]]
    locations = [["malta"], ["valletta"], ["mdina"], ["gozo"], ["rabat"]]
    orgs = [["kunsill"], ["universita"], ["klabb", "tal", "futbol"]]
    fillers = FILLER_MT + FILLER_EN

    def entity(kind):
        words, tag = {"per": (persons, "PER"), "loc": (locations, "LOC"),
                      "org": (orgs, "ORG")}[kind]
        pick = rng.choice(words)
        return pick, [f"B-{tag}"] + [f"I-{tag}"] * (len(pick) - 1)

    sentences = []
    for _ in range(90):
        tokens, tags = [], []
        for _ in range(rng.randint(1, 2)):
            for _ in range(rng.randint(1, 3)):
                tokens.append(rng.choice(fillers))
                tags.append("O")
            words, entity_tags = entity(rng.choice(["per", "loc", "org"]))
            tokens.extend(words)
            tags.extend(entity_tags)
        for _ in range(rng.randint(0, 2)):
            tokens.append(rng.choice(fillers))
            tags.append("O")
        sentences.append((tokens, tags))
    with open(FIXTURES / "ner_toy.conll", "w", encoding="utf-8") as fh:
        for tokens, tags in sentences:
            for token, tag in zip(tokens, tags):
                fh.write(f"{token}\t{tag}\n")
            fh.write("\n")
    return len(sentences)


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    print(f"conceptnet edges: {conceptnet_pages()}")
    print(f"wiki lines:       {wiki_lines()}")
    print(f"sa examples:      {sa_dataset()}")
    print(f"ner sentences:    {ner_dataset()}")
    print(f"fixtures in {FIXTURES}")


if __name__ == "__main__":
    main()
