"""Template-based generator of annotated pseudo-reports.

Every surface word of an entity comes from a lexicon private to its entity
type, modality is signalled by a cue word right before the entity, and each
relation is realized by a template whose connective words identify the
relation type. A small model can therefore learn all three stages, which is
what the end-to-end tests need.
"""
from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .annotation_io import Corpus, Document, Entity, Relation
from .schema import DEFAULT_SCHEMA, Schema

# Relation-type counts of a radiography report corpus (LC).
LC_RELATION_WEIGHTS = {
    "region": 6794, "change": 689, "feature": 5077, "value": 2, "compare": 615,
    "on": 696, "start": 5, "finish": 2, "after": 3, "before": 1,
}
DEFAULT_MODALITY_WEIGHTS = {"positive": 0.7, "negative": 0.15, "suspicious": 0.1, "general": 0.05}
MODALITY_CUES = {"negative": "no", "suspicious": "possible", "general": "usual"}
# types whose modality varies; the rest are always the default modality
MODAL_TYPES = ("D", "A", "F", "C", "R", "T-test", "M-key", "CC")

_TYPE_PREFIX = {
    "D": "dz", "A": "an", "F": "fe", "C": "ch", "TIMEX3": "tm", "T-test": "tt",
    "T-key": "tk", "T-val": "tv", "M-key": "mk", "M-val": "mv", "R": "rx", "CC": "cc",
}
_SYLLABLES = ("ba", "ko", "ri", "me", "tu", "sa", "lo", "ne", "pi", "gu", "va", "ze")

# Argument type choices per relation: (source types, target types).
_ARGUMENTS = {
    "region": [(("D",), ("A",)), (("A",), ("D",))],
    "feature": [(("F",), ("D", "A"))],
    "change": [(("C",), ("D", "A", "T-key", "M-key"))],
    "compare": [(("C",), ("TIMEX3",))],
    "value": [(("T-key",), ("T-val",)), (("M-key",), ("M-val",))],
    "on": [(("D", "T-test", "R", "CC"), ("TIMEX3",))],
    "before": [(("CC", "D", "R"), ("TIMEX3",))],
    "after": [(("C", "D", "CC"), ("TIMEX3",))],
    "start": [(("M-key", "R"), ("TIMEX3",))],
    "finish": [(("R", "M-key"), ("TIMEX3",))],
}

# In-sentence templates: "S" source slot, "T" target slot, other items literal words.
_TEMPLATES = {
    "region": {("D", "A"): [["S", "found", "in", "the", "T", "."], ["S", "within", "T", "."]],
               ("A", "D"): [["the", "T", "seen", "inside", "S", "."]]},
    "feature": [["S", "T", "noted", "."], ["T", "appears", "S", "."]],
    "change": [["T", "has", "S", "."], ["S", "of", "T", "."]],
    "compare": [["S", "since", "T", "."], ["S", "compared", "with", "T", "."]],
    "value": [["S", ":", "T", "."]],
    "on": [["on", "T", ",", "S", "performed", "."], ["S", "on", "T", "."]],
    "before": [["S", "before", "T", "."]],
    "after": [["S", "after", "T", "."]],
    "start": [["S", "started", "at", "T", "."]],
    "finish": [["S", "stopped", "at", "T", "."]],
}
# Cross-sentence templates: two lines, source in the first.
_CROSS_TEMPLATES = {
    "region": [["S", "is", "reported", "."], ["located", "in", "T", "."]],
    "feature": [["T", "is", "reported", "."], ["described", "as", "S", "."]],
    "change": [["T", "is", "reported", "."], ["which", "S", "."]],
    "compare": [["S", "is", "reported", "."], ["relative", "to", "T", "."]],
    "value": [["S", "is", "measured", "."], ["result", "T", "."]],
    "on": [["S", "is", "reported", "."], ["dated", "T", "."]],
    "before": [["S", "is", "reported", "."], ["prior", "to", "T", "."]],
    "after": [["S", "is", "reported", "."], ["following", "T", "."]],
    "start": [["S", "is", "reported", "."], ["beginning", "T", "."]],
    "finish": [["S", "is", "reported", "."], ["ending", "T", "."]],
}
_DISTRACTORS = [["X", "noted", "."], ["also", "X", "."], ["review", "of", "X", "."]]


@dataclass
class GenConfig:
    n_documents: int = 500
    patients: int = 40
    seed: int = 0
    lexicon_size: object = 8  # int, or dict entity type -> int
    max_entity_tokens: int = 2
    relation_weights: dict = field(default_factory=lambda: dict(LC_RELATION_WEIGHTS))
    modality_weights: dict = field(default_factory=lambda: dict(DEFAULT_MODALITY_WEIGHTS))
    sentences_per_doc: tuple = (3, 7)
    cross_sentence_fraction: float = 0.1
    distractor_fraction: float = 0.2

    def __post_init__(self):
        if self.n_documents < 0:
            raise ValueError("n_documents must be >= 0")
        if self.patients < 1:
            raise ValueError("patients must be >= 1")
        for name in ("relation_weights", "modality_weights"):
            weights = getattr(self, name)
            if any(w < 0 for w in weights.values()) or not any(w > 0 for w in weights.values()):
                raise ValueError(f"{name} must be non-negative with at least one positive entry")
        unknown = set(self.relation_weights) - set(_TEMPLATES)
        if unknown:
            raise ValueError(f"no templates for relation types {sorted(unknown)}")
        lo, hi = self.sentences_per_doc
        if not 1 <= lo <= hi:
            raise ValueError("sentences_per_doc must satisfy 1 <= lo <= hi")
        if not 0 <= self.cross_sentence_fraction <= 1 or not 0 <= self.distractor_fraction < 1:
            raise ValueError("fractions must lie in [0, 1]")


@dataclass
class Ledger:
    n_documents: int
    n_patients: int
    relations: dict
    entities: dict
    modalities: dict
    cross_sentence_relations: int
    vocabulary: list

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Ledger":
        return cls(**json.loads(text))


def build_lexicon(size_per_type, rng: random.Random, entity_types=tuple(_TYPE_PREFIX)) -> dict:
    lexicon = {}
    for etype in entity_types:
        size = size_per_type[etype] if isinstance(size_per_type, dict) else size_per_type
        words = set()
        while len(words) < size:
            words.add(_TYPE_PREFIX[etype] + "".join(rng.choice(_SYLLABLES) for _ in range(2)))
        lexicon[etype] = sorted(words)
    return lexicon


class _DocBuilder:
    def __init__(self, tally):
        self.tally = tally  # ground-truth counters shared across documents
        self.lines = []
        self.words = []  # flat token list
        self.spans = []  # (start, end, etype, modality) token spans
        self.relations = []  # (source span index, rtype, target span index)

    def add_line(self, items):
        if self.lines:
            self.lines.append("\n")
        line_words = []
        for item in items:
            if isinstance(item, tuple):  # (phrase words, etype, modality, key)
                phrase, etype, modality, _ = item
                cue = MODALITY_CUES.get(modality)
                if cue:
                    line_words.append(cue)
                start = len(self.words) + len(line_words)
                line_words.extend(phrase)
                self.spans.append((start, start + len(phrase), etype, modality))
                self.tally["entities"][etype] += 1
                self.tally["modalities"][modality] += 1
            else:
                line_words.append(item)
        self.words.extend(line_words)
        self.tally["vocabulary"].update(line_words)
        self.lines.append(" ".join(line_words))

    def build(self, doc_id, patient_id) -> Document:
        text = "".join(self.lines)
        tokens, pos = [], 0
        for word in self.words:
            pos = text.index(word, pos)
            tokens.append((pos, pos + len(word)))
            pos += len(word)
        entities = [Entity(i + 1, etype, s, e, mod) for i, (s, e, etype, mod) in enumerate(self.spans)]
        relations = [Relation(si + 1, rtype, ti + 1, DEFAULT_SCHEMA.category_of(rtype))
                     for si, rtype, ti in self.relations]
        return Document(doc_id, text, tokens, entities, relations, patient_id)


def generate(config: GenConfig = None, schema: Schema = DEFAULT_SCHEMA):
    """Return ``(corpus, ledger)``; a pure function of ``config``."""
    config = config or GenConfig()
    rng = random.Random(config.seed)
    lexicon = build_lexicon(config.lexicon_size, rng)
    rel_codes = [c for c in config.relation_weights if config.relation_weights[c] > 0]
    rel_weights = [config.relation_weights[c] for c in rel_codes]
    mod_codes = list(config.modality_weights)
    mod_weights = [config.modality_weights[m] for m in mod_codes]
    entity_types = list(schema.entity_types)

    def phrase(etype):
        n = rng.randint(1, config.max_entity_tokens)
        return [rng.choice(lexicon[etype]) for _ in range(n)]

    def modality(etype):
        if etype not in MODAL_TYPES:
            return schema.default_modality
        return rng.choices(mod_codes, mod_weights)[0]

    patient_of = [i % config.patients for i in range(min(config.n_documents, config.patients))]
    patient_of += [rng.randrange(config.patients) for _ in range(config.n_documents - len(patient_of))]

    docs = []
    cross = 0
    tally = {"relations": Counter(), "entities": Counter(), "modalities": Counter(),
             "vocabulary": set()}
    for d in range(config.n_documents):
        b = _DocBuilder(tally)
        n_sent = rng.randint(*config.sentences_per_doc)
        for _ in range(n_sent):
            if rng.random() < config.distractor_fraction:
                etype = rng.choice(entity_types)
                template = rng.choice(_DISTRACTORS)
                b.add_line([(phrase(etype), etype, modality(etype), "X") if w == "X" else w
                            for w in template])
                continue
            rtype = rng.choices(rel_codes, rel_weights)[0]
            src_choices, tgt_choices = rng.choice(_ARGUMENTS[rtype])
            stype, ttype = rng.choice(src_choices), rng.choice(tgt_choices)
            slots = {"S": (phrase(stype), stype, modality(stype), "S"),
                     "T": (phrase(ttype), ttype, modality(ttype), "T")}
            first = len(b.spans)
            if rng.random() < config.cross_sentence_fraction:
                cross += 1
                lines = _CROSS_TEMPLATES[rtype]
            else:
                templates = _TEMPLATES[rtype]
                if isinstance(templates, dict):
                    templates = templates[(stype, ttype)]
                lines = [rng.choice(templates)]
            order = []
            for line in lines:
                b.add_line([slots[w] if w in slots else w for w in line])
                order += [w for w in line if w in slots]
            index = {key: first + i for i, key in enumerate(order)}
            b.relations.append((index["S"], rtype, index["T"]))
            tally["relations"][rtype] += 1
        docs.append(b.build(f"doc{d:04d}", f"pt{patient_of[d]:03d}"))

    ledger = Ledger(
        n_documents=len(docs),
        n_patients=len(set(patient_of)),
        relations={c: tally["relations"][c] for c in schema.relation_codes},
        entities={t: tally["entities"][t] for t in schema.entity_types},
        modalities={m: tally["modalities"][m] for m in schema.modalities},
        cross_sentence_relations=cross,
        vocabulary=sorted(tally["vocabulary"]),
    )
    return Corpus(docs), ledger


def write_generated(corpus, ledger: Ledger, out_path, ledger_path=None, schema: Schema = DEFAULT_SCHEMA):
    from .annotation_io import write_corpus

    write_corpus(corpus, out_path, schema)
    ledger_path = Path(ledger_path) if ledger_path else Path(str(out_path) + ".ledger.json")
    ledger_path.write_text(ledger.to_json(), encoding="utf-8")
    return ledger_path
