"""Documents and the inline XML-style annotated report format.

An annotated report is plain text with entity elements named by entity code::

    <D id="1" mod="suspicious" brel="region:2">nodules</D> in <A id="2">the lung field</A>

``brel`` carries medical relations and ``trel`` temporal ones, each a
``;``-separated list of ``relation:target_id`` pairs stored on the source
entity. A corpus file wraps each report in ``<doc id="..." patient="...">``.
Text characters ``&``, ``<`` and ``>`` are written as XML character entities.
"""
from __future__ import annotations

import bisect
import html
import json
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

from .exceptions import ParseError, SchemaError, SerializationError, ValidationError
from .schema import DEFAULT_SCHEMA, LENIENT, MEDICAL, STRICT, TEMPORAL, Schema, Verdict
from .tokenization import tokenize as default_tokenize


@dataclass(frozen=True, order=True)
class Token:
    index: int
    char_start: int
    char_end: int


@dataclass(frozen=True)
class Entity:
    id: int
    etype: str
    start: int  # token span, half-open
    end: int
    modality: str = "positive"

    @property
    def span(self) -> tuple:
        return (self.start, self.end)


@dataclass(frozen=True, order=True)
class Relation:
    source_id: int
    rtype: str
    target_id: int
    category: str = MEDICAL


def _normalize_tokens(tokens):
    out = []
    for i, tok in enumerate(tokens):
        if isinstance(tok, Token):
            out.append(tok if tok.index == i else Token(i, tok.char_start, tok.char_end))
        else:
            start, end = tok
            out.append(Token(i, int(start), int(end)))
    return tuple(out)


@dataclass(frozen=True)
class Document:
    """One report. Entities are kept in reading order, relations sorted.

    ``tokens`` may be given as ``(char_start, char_end)`` pairs; when omitted
    the text is tokenized with the default tokenizer.
    """

    doc_id: str
    text: str
    tokens: tuple = None
    entities: tuple = ()
    relations: tuple = ()
    patient_id: str = None

    def __post_init__(self):
        toks = default_tokenize(self.text) if self.tokens is None else self.tokens
        object.__setattr__(self, "tokens", _normalize_tokens(toks))
        if self.patient_id is None:
            object.__setattr__(self, "patient_id", self.doc_id)
        object.__setattr__(self, "entities", tuple(sorted(self.entities, key=lambda e: (e.start, e.id))))
        object.__setattr__(self, "relations", tuple(sorted(self.relations)))
        self._check()

    def _check(self):
        prev_end = 0
        for tok in self.tokens:
            if not (prev_end <= tok.char_start < tok.char_end <= len(self.text)):
                raise ValueError(f"{self.doc_id}: token {tok.index} has invalid offsets")
            prev_end = tok.char_end
        n = len(self.tokens)
        ids = set()
        last_end = 0
        for ent in self.entities:
            if not isinstance(ent.id, int) or ent.id <= 0:
                raise ValueError(f"{self.doc_id}: entity id must be a positive integer, got {ent.id!r}")
            if ent.id in ids:
                raise ValueError(f"{self.doc_id}: duplicate entity id {ent.id}")
            ids.add(ent.id)
            if not (0 <= ent.start < ent.end <= n):
                raise ValueError(f"{self.doc_id}: entity {ent.id} span [{ent.start}, {ent.end}) out of range")
            if ent.start < last_end:
                raise ValueError(f"{self.doc_id}: entity {ent.id} overlaps a preceding entity")
            last_end = ent.end
        seen = set()
        for rel in self.relations:
            if rel.source_id not in ids or rel.target_id not in ids:
                raise ValueError(f"{self.doc_id}: relation {rel} references an unknown entity")
            if rel.source_id == rel.target_id:
                raise ValueError(f"{self.doc_id}: relation {rel} is a self-loop")
            key = (rel.source_id, rel.rtype, rel.target_id)
            if key in seen:
                raise ValueError(f"{self.doc_id}: duplicate relation {key}")
            seen.add(key)

    # -- convenience -----------------------------------------------------
    def token_text(self, i: int) -> str:
        tok = self.tokens[i]
        return self.text[tok.char_start:tok.char_end]

    @property
    def words(self) -> list:
        return [self.text[t.char_start:t.char_end] for t in self.tokens]

    def entity(self, entity_id: int) -> Entity:
        for ent in self.entities:
            if ent.id == entity_id:
                return ent
        raise KeyError(entity_id)

    def entity_text(self, ent: Entity) -> str:
        return self.text[self.tokens[ent.start].char_start:self.tokens[ent.end - 1].char_end]

    def sentences(self) -> list:
        """Token ranges ``(start, end)`` of the non-empty lines of the report."""
        spans = []
        line_starts = [0] + [i + 1 for i, ch in enumerate(self.text) if ch == "\n"]
        current, begin = None, 0
        for tok in self.tokens:
            line = bisect.bisect_right(line_starts, tok.char_start) - 1
            if line != current:
                if current is not None:
                    spans.append((begin, tok.index))
                current, begin = line, tok.index
        if current is not None:
            spans.append((begin, len(self.tokens)))
        return spans

    def with_annotations(self, entities=None, relations=None) -> "Document":
        return replace(
            self,
            entities=self.entities if entities is None else tuple(entities),
            relations=self.relations if relations is None else tuple(relations),
        )

    def plain(self) -> "Document":
        return replace(self, entities=(), relations=())


@dataclass
class Corpus:
    documents: list = field(default_factory=list)

    def __post_init__(self):
        self.documents = list(self.documents)
        ids = [d.doc_id for d in self.documents]
        dupes = [k for k, v in Counter(ids).items() if v > 1]
        if dupes:
            raise ValueError(f"duplicate doc ids in corpus: {dupes[:5]}")

    def __iter__(self):
        return iter(self.documents)

    def __len__(self):
        return len(self.documents)

    def __getitem__(self, i):
        return self.documents[i]

    @property
    def doc_ids(self) -> list:
        return [d.doc_id for d in self.documents]

    def by_id(self) -> dict:
        return {d.doc_id: d for d in self.documents}


def as_documents(docs) -> list:
    if isinstance(docs, Corpus):
        return list(docs.documents)
    if isinstance(docs, Document):
        return [docs]
    return list(docs)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TAG_RE = re.compile(r"<(/?)([A-Za-z][\w\-]*)((?:\s+[A-Za-z_][\w\-]*\s*=\s*\"[^\"<]*\")*)\s*>")
_ATTR_RE = re.compile(r"([A-Za-z_][\w\-]*)\s*=\s*\"([^\"<]*)\"")
_CHARREF_RE = re.compile(r"&(amp|lt|gt|quot|apos);")
_CHARREFS = {"amp": "&", "lt": "<", "gt": ">", "quot": '"', "apos": "'"}
_DOC_RE = re.compile(r"<doc((?:\s+[A-Za-z_][\w\-]*\s*=\s*\"[^\"<]*\")*)\s*>(.*?)</doc>", re.S)
_REL_ITEM_RE = re.compile(r"^\s*([A-Za-z][\w\-]*)\s*:\s*(\d+)\s*$")


def _unescape(s: str) -> str:
    return _CHARREF_RE.sub(lambda m: _CHARREFS[m.group(1)], s)


def _escape_text(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


class _Locator:
    def __init__(self, source: str):
        self._starts = [0] + [i + 1 for i, ch in enumerate(source) if ch == "\n"]

    def __call__(self, pos: int):
        line = bisect.bisect_right(self._starts, pos) - 1
        return line + 1, pos - self._starts[line] + 1


def _warn_or_raise(mode, message, loc=None):
    if mode == STRICT:
        if loc is not None:
            raise ParseError(message, *loc)
        raise ParseError(message)
    warnings.warn(message, stacklevel=3)


def _parse_relations(value: str, attr: str, schema: Schema, where):
    category = MEDICAL if attr == "brel" else TEMPORAL
    out = []
    for item in value.split(";"):
        if not item.strip():
            continue
        m = _REL_ITEM_RE.match(item)
        if not m:
            raise ParseError(f"malformed relation item {item!r} in {attr}", *where)
        code, target = m.group(1), int(m.group(2))
        try:
            rel = schema.relation(code)
        except SchemaError:
            raise ParseError(f"unknown relation type {code!r}", *where) from None
        if rel.category != category:
            raise ParseError(
                f"{rel.category} relation {code!r} listed under {attr!r}", *where
            )
        out.append((code, target, category))
    return out


def _char_to_token_span(tokens, cstart, cend):
    """Token span covered by characters [cstart, cend) and whether it is exact."""
    starts = [t[0] for t in tokens]
    ends = [t[1] for t in tokens]
    first = bisect.bisect_right(ends, cstart)  # first token ending after cstart
    last = bisect.bisect_left(starts, cend)  # first token starting at/after cend
    if first >= last:
        return None, False
    exact = starts[first] == cstart and ends[last - 1] == cend
    return (first, last), exact


def _parse_body(source, begin, end, locate, schema, mode, doc_id, patient_id, tokenizer):
    text_parts = []
    length = 0
    open_ent = None  # (code, attrs, char_start, tag_pos)
    raw_entities = []
    pos = begin
    while pos < end:
        lt = source.find("<", pos, end)
        if lt < 0:
            chunk = _unescape(source[pos:end])
            text_parts.append(chunk)
            length += len(chunk)
            break
        if lt > pos:
            chunk = _unescape(source[pos:lt])
            text_parts.append(chunk)
            length += len(chunk)
        m = _TAG_RE.match(source, lt, end)
        if m is None:
            nxt = source[lt + 1:lt + 2]
            if nxt.isalpha() or nxt == "/":
                raise ParseError("malformed tag", *locate(lt))
            text_parts.append("<")
            length += 1
            pos = lt + 1
            continue
        closing, name = m.group(1) == "/", m.group(2)
        if name not in schema.entity_types:
            raise ParseError(f"unknown element <{'/' if closing else ''}{name}>", *locate(lt))
        if closing:
            if open_ent is None or open_ent[0] != name:
                raise ParseError(f"unexpected closing tag </{name}>", *locate(lt))
            if m.group(3).strip():
                raise ParseError("closing tag carries attributes", *locate(lt))
            raw_entities.append((open_ent[0], open_ent[1], open_ent[2], length, open_ent[3]))
            open_ent = None
        else:
            if open_ent is not None:
                raise ParseError(
                    f"nested or overlapping entity <{name}> inside <{open_ent[0]}>", *locate(lt)
                )
            attrs = {}
            for am in _ATTR_RE.finditer(m.group(3)):
                key = am.group(1)
                if key in attrs:
                    raise ParseError(f"duplicate attribute {key!r}", *locate(lt))
                attrs[key] = _unescape(am.group(2))
            open_ent = (name, attrs, length, lt)
        pos = m.end()
    if open_ent is not None:
        raise ParseError(f"unclosed element <{open_ent[0]}>", *locate(open_ent[3]))

    text = "".join(text_parts)
    token_spans = list(tokenizer(text))

    entities = []
    pending_rel = []
    used_ids = set()
    auto = []
    for code, attrs, cstart, cend, tag_pos in raw_entities:
        where = locate(tag_pos)
        unknown = set(attrs) - {"id", "mod", "brel", "trel"}
        if unknown:
            _warn_or_raise(mode, f"unknown attributes {sorted(unknown)} on <{code}>", where)
        span, exact = _char_to_token_span(token_spans, cstart, cend)
        if span is None:
            raise ParseError(f"entity <{code}> covers no token", *where)
        if not exact:
            _warn_or_raise(mode, f"entity <{code}> does not align with token boundaries", where)
        modality = attrs.get("mod", schema.default_modality)
        if modality not in schema.modalities:
            if mode == STRICT:
                raise ValidationError(
                    f"{doc_id}: unknown modality {modality!r} at line {where[0]}",
                    [(doc_id, "modality", modality)],
                )
            warnings.warn(f"{doc_id}: unknown modality {modality!r} kept as-is", stacklevel=2)
        if "id" in attrs:
            if not re.fullmatch(r"\d+", attrs["id"]) or int(attrs["id"]) <= 0:
                raise ParseError(f"entity id must be a positive integer, got {attrs['id']!r}", *where)
            eid = int(attrs["id"])
            if eid in used_ids:
                raise ParseError(f"duplicate entity id {eid}", *where)
            used_ids.add(eid)
        else:
            eid = None
            auto.append(len(entities))
        for attr in ("brel", "trel"):
            if attr in attrs:
                for rcode, target, category in _parse_relations(attrs[attr], attr, schema, where):
                    pending_rel.append((len(entities), rcode, target, category, where))
        entities.append([eid, code, span, modality, where])

    next_id = max(used_ids, default=0) + 1
    for idx in auto:
        entities[idx][0] = next_id
        next_id += 1

    last_end = 0
    for eid, code, (s, e), _, where in entities:
        if s < last_end:
            raise ParseError(f"entity {eid} overlaps the preceding entity", *where)
        last_end = e

    ids = {e[0] for e in entities}
    relations = []
    seen = set()
    for idx, rcode, target, category, where in pending_rel:
        src = entities[idx][0]
        if target not in ids:
            raise ParseError(f"relation {rcode}:{target} points to a missing entity", *where)
        if target == src:
            raise ParseError(f"relation {rcode}:{target} is a self-loop", *where)
        key = (src, rcode, target)
        if key in seen:
            raise ParseError(f"duplicate relation {rcode}:{target}", *where)
        seen.add(key)
        relations.append(Relation(src, rcode, target, category))

    ents = [Entity(eid, code, s, e, mod) for eid, code, (s, e), mod, _ in entities]
    doc = Document(doc_id, text, token_spans, ents, relations, patient_id)
    if mode == STRICT:
        violations = schema_violations(doc, schema)
        if violations:
            listing = "; ".join(f"{r.rtype}({s}->{t})" for r, s, t in violations)
            raise ValidationError(f"{doc_id}: relation signature violations: {listing}", violations)
    return doc


def schema_violations(doc: Document, schema: Schema = DEFAULT_SCHEMA) -> list:
    """Relations outside their canonical signature, as ``(relation, src_type, tgt_type)``."""
    types = {e.id: e.etype for e in doc.entities}
    bad = []
    for rel in doc.relations:
        src, tgt = types[rel.source_id], types[rel.target_id]
        if schema.validate_relation(rel.rtype, src, tgt, STRICT) is Verdict.VIOLATION:
            bad.append((rel, src, tgt))
    return bad


def validate_document(doc: Document, schema: Schema = DEFAULT_SCHEMA, mode: str = STRICT) -> list:
    """Check codes and signatures; returns lenient-mode warnings, raises on strict violations."""
    problems = []
    for ent in doc.entities:
        schema.check_entity_type(ent.etype)
        if not schema.check_modality(ent.modality, mode):
            problems.append((ent, "modality", ent.modality))
    for rel in doc.relations:
        if schema.category_of(rel.rtype) != rel.category:
            raise ValidationError(f"{doc.doc_id}: relation {rel} has the wrong category")
    violations = schema_violations(doc, schema)
    if violations and mode == STRICT:
        raise ValidationError(f"{doc.doc_id}: {len(violations)} signature violations", violations)
    return problems + violations


def parse_report(xml_text: str, schema: Schema = DEFAULT_SCHEMA, mode: str = STRICT,
                 doc_id: str = "doc", patient_id: str = None, tokenizer=None) -> Document:
    """Parse one annotated report (no ``<doc>`` wrapper)."""
    if mode not in (STRICT, LENIENT):
        raise ValueError(f"mode must be 'strict' or 'lenient', got {mode!r}")
    locate = _Locator(xml_text)
    return _parse_body(xml_text, 0, len(xml_text), locate, schema, mode, doc_id,
                       patient_id, tokenizer or default_tokenize)


def parse_corpus(xml_text: str, schema: Schema = DEFAULT_SCHEMA, mode: str = STRICT,
                 default_id: str = "doc", tokenizer=None) -> Corpus:
    """Parse a file holding ``<doc>``-wrapped reports, or a single bare report."""
    tokenizer = tokenizer or default_tokenize
    locate = _Locator(xml_text)
    if not re.search(r"<doc[\s>]", xml_text):
        return Corpus([parse_report(xml_text, schema, mode, doc_id=default_id, tokenizer=tokenizer)])
    docs = []
    pos = 0
    for m in _DOC_RE.finditer(xml_text):
        gap = xml_text[pos:m.start()]
        if gap.strip():
            raise ParseError("text outside <doc> elements", *locate(pos + len(gap) - len(gap.lstrip())))
        attrs = dict(_ATTR_RE.findall(m.group(1)))
        if "id" not in attrs:
            raise ParseError("<doc> without id", *locate(m.start()))
        begin, end = m.start(2), m.end(2)
        # one newline after the opening tag and before the closing tag belongs to the wrapper
        if xml_text.startswith("\n", begin):
            begin += 1
        if end > begin and xml_text[end - 1] == "\n":
            end -= 1
        docs.append(_parse_body(xml_text, begin, end, locate, schema, mode,
                                _unescape(attrs["id"]), _unescape(attrs.get("patient", attrs["id"])),
                                tokenizer))
        pos = m.end()
    if xml_text[pos:].strip():
        raise ParseError("text outside <doc> elements", *locate(pos))
    try:
        return Corpus(docs)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def read_corpus(paths, schema: Schema = DEFAULT_SCHEMA, mode: str = STRICT, tokenizer=None) -> Corpus:
    """Read one or more files; a file without ``<doc>`` wrappers is one report named by its stem."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    docs = []
    for path in paths:
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        docs.extend(parse_corpus(text, schema, mode, default_id=path.stem, tokenizer=tokenizer).documents)
    try:
        return Corpus(docs)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def serialize_report(doc: Document, schema: Schema = DEFAULT_SCHEMA) -> str:
    try:
        doc._check()
    except ValueError as exc:
        raise SerializationError(str(exc)) from None
    outgoing = {}
    for rel in doc.relations:
        outgoing.setdefault(rel.source_id, []).append(rel)
    inserts = []  # (char_pos, order, markup)
    for ent in doc.entities:
        if ent.etype not in schema.entity_types:
            raise SerializationError(f"{doc.doc_id}: unknown entity type {ent.etype!r}")
        attrs = [f'id="{ent.id}"']
        if ent.modality != schema.default_modality:
            attrs.append(f'mod="{html.escape(ent.modality)}"')
        rels = sorted(outgoing.get(ent.id, []), key=lambda r: (r.rtype, r.target_id))
        for attr, category in (("brel", MEDICAL), ("trel", TEMPORAL)):
            items = [f"{r.rtype}:{r.target_id}" for r in rels if r.category == category]
            if items:
                attrs.append(f'{attr}="{";".join(items)}"')
        cstart = doc.tokens[ent.start].char_start
        cend = doc.tokens[ent.end - 1].char_end
        inserts.append((cstart, 1, f"<{ent.etype} {' '.join(attrs)}>"))
        inserts.append((cend, 0, f"</{ent.etype}>"))
    inserts.sort(key=lambda x: (x[0], x[1]))
    out, pos = [], 0
    for cpos, _, markup in inserts:
        out.append(_escape_text(doc.text[pos:cpos]))
        out.append(markup)
        pos = cpos
    out.append(_escape_text(doc.text[pos:]))
    return "".join(out)


def serialize_corpus(docs, schema: Schema = DEFAULT_SCHEMA) -> str:
    parts = []
    for doc in as_documents(docs):
        parts.append(
            f'<doc id="{html.escape(doc.doc_id)}" patient="{html.escape(doc.patient_id)}">\n'
            f"{serialize_report(doc, schema)}\n</doc>\n"
        )
    return "".join(parts)


def write_corpus(docs, path, schema: Schema = DEFAULT_SCHEMA) -> None:
    Path(path).write_text(serialize_corpus(docs, schema), encoding="utf-8")


def strip_annotations(doc) -> str:
    """Plain report text: the document text, or markup-free text of an annotated string."""
    if isinstance(doc, Document):
        return doc.text
    return parse_report(doc, mode=LENIENT).text


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass
class CorpusStats:
    relations: dict  # category -> {rtype: count}
    entities: dict
    modalities: dict
    n_documents: int = 0

    def total(self, category: str) -> int:
        return sum(self.relations[category].values())

    def to_dict(self) -> dict:
        return {
            "documents": self.n_documents,
            "relations": {c: dict(v) for c, v in self.relations.items()},
            "relation_totals": {c: self.total(c) for c in self.relations},
            "entities": dict(self.entities),
            "modalities": dict(self.modalities),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def rows(self) -> list:
        rows = [("documents", "-", self.n_documents)]
        for category, counts in self.relations.items():
            rows += [("relation", f"{category}:{k}", v) for k, v in counts.items()]
            rows.append(("relation", f"{category}:total", self.total(category)))
        rows += [("entity", k, v) for k, v in self.entities.items()]
        rows += [("modality", k, v) for k, v in self.modalities.items()]
        return rows

    def to_tsv(self) -> str:
        return "kind\tname\tcount\n" + "".join(f"{a}\t{b}\t{c}\n" for a, b, c in self.rows())

    def to_text(self) -> str:
        lines = []
        med, tmp = self.relations[MEDICAL], self.relations[TEMPORAL]
        lines.append(f"{'Med REL':<10}{'#Num':>8}  {'Temp REL':<10}{'#Num':>8}")
        for (mk, mv), (tk, tv) in zip(med.items(), tmp.items()):
            lines.append(f"{mk:<10}{mv:>8,}  {tk:<10}{tv:>8,}")
        lines.append(f"{'Total':<10}{self.total(MEDICAL):>8,}  {'Total':<10}{self.total(TEMPORAL):>8,}")
        lines.append("")
        width = max([len(k) for k in self.entities] + [8])
        lines.append(f"{'Entity':<{width}}{'#Num':>8}")
        lines += [f"{k:<{width}}{v:>8,}" for k, v in self.entities.items()]
        lines.append("")
        width = max([len(k) for k in self.modalities] + [8])
        lines.append(f"{'Modality':<{width}}{'#Num':>8}")
        lines += [f"{k:<{width}}{v:>8,}" for k, v in self.modalities.items()]
        lines.append(f"\ndocuments: {self.n_documents}")
        return "\n".join(lines) + "\n"


def corpus_stats(corpus, schema: Schema = DEFAULT_SCHEMA) -> CorpusStats:
    relations = {MEDICAL: {}, TEMPORAL: {}}
    for rel in schema.relations:
        relations[rel.category][rel.code] = 0
    entities = {t: 0 for t in schema.entity_types}
    modalities = {m: 0 for m in schema.modalities}
    docs = as_documents(corpus)
    for doc in docs:
        for ent in doc.entities:
            entities[ent.etype] = entities.get(ent.etype, 0) + 1
            modalities[ent.modality] = modalities.get(ent.modality, 0) + 1
        for rel in doc.relations:
            bucket = relations[rel.category]
            bucket[rel.rtype] = bucket.get(rel.rtype, 0) + 1
    return CorpusStats(relations, entities, modalities, len(docs))
