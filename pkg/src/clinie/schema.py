"""Entity, modality and relation inventories and relation signature rules.

A :class:`Schema` is immutable. The module-level :data:`DEFAULT_SCHEMA` holds
the built-in inventory; :func:`load_schema` reads a plain-text declaration
file with one declaration per line::

    entity D
    modality positive default
    relation region medical A,D -> A,D
    relation on temporal * -> TIMEX3

``*`` stands for "every declared entity type".
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .exceptions import SchemaError

ENTITY_CODES = (
    "D", "A", "F", "C", "TIMEX3", "T-test", "T-key", "T-val", "M-key", "M-val", "R", "CC",
)
MODALITY_CODES = ("positive", "negative", "suspicious", "general")
DEFAULT_MODALITY = "positive"

MEDICAL = "medical"
TEMPORAL = "temporal"
CATEGORIES = (MEDICAL, TEMPORAL)

MEDICAL_RELATIONS = ("change", "compare", "feature", "region", "value")
TEMPORAL_RELATIONS = ("on", "before", "after", "start", "finish")

STRICT = "strict"
LENIENT = "lenient"


class Verdict(enum.Enum):
    OK = "ok"
    WARNING = "warning"
    VIOLATION = "violation"

    @property
    def ok(self) -> bool:
        return self is not Verdict.VIOLATION


@dataclass(frozen=True, order=True)
class RelationType:
    code: str
    category: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise SchemaError(f"unknown relation category {self.category!r}")


@dataclass(frozen=True)
class SignatureRule:
    relation: RelationType
    source_types: frozenset
    target_types: frozenset
    strictness: str = "canonical"

    def admits(self, src: str, tgt: str) -> bool:
        return src in self.source_types and tgt in self.target_types


def _check_mode(mode: str) -> None:
    if mode not in (STRICT, LENIENT):
        raise SchemaError(f"mode must be 'strict' or 'lenient', got {mode!r}")


@dataclass(frozen=True)
class Schema:
    entity_types: tuple
    modalities: tuple
    default_modality: str
    relations: tuple  # of RelationType, declaration order
    rules: tuple = field(repr=False)  # of SignatureRule, parallel to relations

    def __post_init__(self):
        if not self.entity_types:
            raise SchemaError("schema declares no entity types")
        if len(set(self.entity_types)) != len(self.entity_types):
            raise SchemaError("duplicate entity type codes")
        if not self.modalities:
            raise SchemaError("schema declares no modalities")
        if len(set(self.modalities)) != len(self.modalities):
            raise SchemaError("duplicate modality codes")
        if self.default_modality not in self.modalities:
            raise SchemaError(f"default modality {self.default_modality!r} is not declared")
        codes = [r.code for r in self.relations]
        if len(set(codes)) != len(codes):
            raise SchemaError("duplicate relation codes")
        if len(self.rules) != len(self.relations):
            raise SchemaError("every relation needs exactly one signature rule")
        known = set(self.entity_types)
        for rule in self.rules:
            unknown = (rule.source_types | rule.target_types) - known
            if unknown:
                raise SchemaError(
                    f"rule for {rule.relation.code!r} mentions undeclared types {sorted(unknown)}"
                )

    # -- lookups ---------------------------------------------------------
    @property
    def relation_codes(self) -> tuple:
        return tuple(r.code for r in self.relations)

    def relation(self, code: str) -> RelationType:
        for rel in self.relations:
            if rel.code == code:
                return rel
        raise SchemaError(f"unknown relation type {code!r}")

    def category_of(self, code: str) -> str:
        return self.relation(code).category

    def check_entity_type(self, etype: str) -> str:
        if etype not in self.entity_types:
            raise SchemaError(f"unknown entity type {etype!r}")
        return etype

    def check_modality(self, modality: str, mode: str = STRICT) -> bool:
        """True if known; False if unknown but tolerated (lenient); raises otherwise."""
        _check_mode(mode)
        if modality in self.modalities:
            return True
        if mode == LENIENT:
            return False
        raise SchemaError(f"unknown modality {modality!r}")

    def canonical_signature(self, rel) -> SignatureRule:
        code = rel.code if isinstance(rel, RelationType) else rel
        for rule in self.rules:
            if rule.relation.code == code:
                return rule
        raise SchemaError(f"unknown relation type {code!r}")

    def validate_relation(self, rel, src: str, tgt: str, mode: str = STRICT) -> Verdict:
        _check_mode(mode)
        rule = self.canonical_signature(rel)
        self.check_entity_type(src)
        self.check_entity_type(tgt)
        if rule.admits(src, tgt):
            return Verdict.OK
        return Verdict.WARNING if mode == LENIENT else Verdict.VIOLATION

    def bio_tagset(self, entity_types: Iterable[str] | None = None) -> list:
        types = self.entity_types if entity_types is None else entity_types
        for t in types:
            self.check_entity_type(t)
        return bio_tagset(types)

    # -- serialization -----------------------------------------------------
    def to_text(self) -> str:
        lines = [f"entity {t}" for t in self.entity_types]
        for m in self.modalities:
            lines.append(f"modality {m} default" if m == self.default_modality else f"modality {m}")
        every = frozenset(self.entity_types)
        for rule in self.rules:
            src = "*" if rule.source_types == every else ",".join(sorted(rule.source_types))
            tgt = "*" if rule.target_types == every else ",".join(sorted(rule.target_types))
            lines.append(f"relation {rule.relation.code} {rule.relation.category} {src} -> {tgt}")
        return "\n".join(lines) + "\n"

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def bio_tagset(entity_types: Iterable[str]) -> list:
    """``["O", "B-x", "I-x", ...]`` with types in alphabetical order."""
    types = sorted(set(entity_types))
    if not types:
        raise SchemaError("bio_tagset needs at least one entity type")
    tags = ["O"]
    for t in types:
        tags += [f"B-{t}", f"I-{t}"]
    return tags


def parse_schema(text: str) -> Schema:
    entities: list = []
    modalities: list = []
    default = None
    declared: list = []  # (code, category, src_spec, tgt_spec, lineno)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, _, rest = line.partition(" ")
        parts = rest.split()
        if kind == "entity" and len(parts) == 1:
            entities.append(parts[0])
        elif kind == "modality" and len(parts) in (1, 2):
            modalities.append(parts[0])
            if len(parts) == 2:
                if parts[1] != "default":
                    raise SchemaError(f"line {lineno}: expected 'default', got {parts[1]!r}")
                if default is not None:
                    raise SchemaError(f"line {lineno}: second default modality")
                default = parts[0]
        elif kind == "relation" and len(parts) == 5 and parts[3] == "->":
            declared.append((parts[0], parts[1], parts[2], parts[4], lineno))
        else:
            raise SchemaError(f"line {lineno}: cannot parse declaration {raw.strip()!r}")
    if default is None and modalities:
        default = modalities[0]

    def expand(spec: str, lineno: int) -> frozenset:
        if spec == "*":
            return frozenset(entities)
        types = frozenset(s for s in spec.split(",") if s)
        if not types:
            raise SchemaError(f"line {lineno}: empty type list")
        return types

    relations, rules = [], []
    for code, category, src, tgt, lineno in declared:
        rel = RelationType(code, category)
        relations.append(rel)
        rules.append(SignatureRule(rel, expand(src, lineno), expand(tgt, lineno)))
    return Schema(tuple(entities), tuple(modalities), default, tuple(relations), tuple(rules))


def load_schema(path) -> Schema:
    return parse_schema(Path(path).read_text(encoding="utf-8"))


_DEFAULT_TEXT = """\
entity D
entity A
entity F
entity C
entity TIMEX3
entity T-test
entity T-key
entity T-val
entity M-key
entity M-val
entity R
entity CC
modality positive default
modality negative
modality suspicious
modality general
relation change medical C -> A,D,M-key,T-key
relation compare medical C -> TIMEX3
relation feature medical F -> *
relation region medical A,D -> A,D
relation value medical M-key,T-key -> M-val,T-val
relation on temporal * -> TIMEX3
relation before temporal * -> TIMEX3
relation after temporal * -> TIMEX3
relation start temporal * -> TIMEX3
relation finish temporal * -> TIMEX3
"""

DEFAULT_SCHEMA = parse_schema(_DEFAULT_TEXT)


def canonical_signature(rel, schema: Schema = DEFAULT_SCHEMA) -> SignatureRule:
    return schema.canonical_signature(rel)


def validate_relation(rel, src: str, tgt: str, mode: str = STRICT,
                      schema: Schema = DEFAULT_SCHEMA) -> Verdict:
    return schema.validate_relation(rel, src, tgt, mode)
