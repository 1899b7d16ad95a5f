"""Joint evaluation of the three stages with exact-span micro P/R/F1.

Each stage is scored on whatever the prediction documents contain, so when
those documents come from running the pipeline, downstream scores include
upstream errors.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .annotation_io import as_documents
from .exceptions import CorpusMismatchError
from .schema import DEFAULT_SCHEMA, MEDICAL, TEMPORAL


@dataclass
class PRF:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def support(self) -> int:
        return self.tp + self.fn

    def __add__(self, other: "PRF") -> "PRF":
        return PRF(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


def _count(pred_keys: set, gold_keys: set) -> PRF:
    tp = len(pred_keys & gold_keys)
    return PRF(tp, len(pred_keys) - tp, len(gold_keys) - tp)


def align(pred, gold) -> list:
    """Pair documents by id; both sides must hold the same ids and token counts."""
    pred_docs, gold_docs = as_documents(pred), as_documents(gold)
    by_id = {d.doc_id: d for d in pred_docs}
    if len(by_id) != len(pred_docs) or set(by_id) != {d.doc_id for d in gold_docs} \
            or len(gold_docs) != len(pred_docs):
        missing = sorted({d.doc_id for d in gold_docs} ^ set(by_id))
        raise CorpusMismatchError(f"prediction and gold corpora differ in documents: {missing[:5]}")
    pairs = []
    for g in gold_docs:
        p = by_id[g.doc_id]
        if len(p.tokens) != len(g.tokens):
            raise CorpusMismatchError(f"{g.doc_id}: token counts differ ({len(p.tokens)} vs {len(g.tokens)})")
        pairs.append((p, g))
    return pairs


def entity_keys(doc, with_modality: bool = False) -> set:
    if with_modality:
        return {(doc.doc_id, e.start, e.end, e.etype, e.modality) for e in doc.entities}
    return {(doc.doc_id, e.start, e.end, e.etype) for e in doc.entities}


def relation_keys(doc) -> set:
    ents = {e.id: (e.start, e.end, e.etype) for e in doc.entities}
    return {(doc.doc_id, ents[r.source_id], r.rtype, ents[r.target_id]) for r in doc.relations}


def eval_mer(pred, gold) -> PRF:
    total = PRF()
    for p, g in align(pred, gold):
        total += _count(entity_keys(p), entity_keys(g))
    return total


def eval_mc(pred, gold) -> PRF:
    total = PRF()
    for p, g in align(pred, gold):
        total += _count(entity_keys(p, True), entity_keys(g, True))
    return total


def eval_re(pred, gold, relation_codes=None):
    """Micro PRF over ``{entity, relation, entity2}`` triplets, plus a per-type table."""
    codes = list(relation_codes or DEFAULT_SCHEMA.relation_codes)
    by_type = {c: PRF() for c in codes}
    for p, g in align(pred, gold):
        pk, gk = relation_keys(p), relation_keys(g)
        for code in set(codes) | {k[2] for k in pk | gk}:
            counts = _count({k for k in pk if k[2] == code}, {k for k in gk if k[2] == code})
            by_type[code] = by_type.get(code, PRF()) + counts
    total = PRF()
    for counts in by_type.values():
        total += counts
    return total, by_type


def _fmt(value: float, defined: bool = True) -> str:
    return f"{100 * value:6.2f}" if defined else "     -"


@dataclass
class EvalReport:
    mer: PRF
    mc: PRF
    re: PRF
    re_by_type: dict
    unreachable_gold: int = 0
    window: int = None
    n_documents: int = 0

    def stage(self, name: str) -> PRF:
        return {"mer": self.mer, "mc": self.mc, "re": self.re}[name]

    def to_dict(self) -> dict:
        return {
            "documents": self.n_documents,
            "mer": self.mer.to_dict(),
            "mc": self.mc.to_dict(),
            "re": self.re.to_dict(),
            "re_by_type": {k: v.to_dict() for k, v in self.re_by_type.items()},
            "unreachable_gold": self.unreachable_gold,
            "window": self.window,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_tsv(self) -> str:
        lines = ["scope\tname\ttp\tfp\tfn\tprecision\trecall\tf1"]
        for name in ("mer", "mc", "re"):
            s = self.stage(name)
            lines.append(f"stage\t{name}\t{s.tp}\t{s.fp}\t{s.fn}\t{s.precision:.6f}\t{s.recall:.6f}\t{s.f1:.6f}")
        for code, s in self.re_by_type.items():
            f1 = f"{s.f1:.6f}" if s.support else "-"
            lines.append(f"relation\t{code}\t{s.tp}\t{s.fp}\t{s.fn}\t{s.precision:.6f}\t{s.recall:.6f}\t{f1}")
        return "\n".join(lines) + "\n"

    def to_text(self, schema=DEFAULT_SCHEMA) -> str:
        lines = [f"{'Stage':<6}{'P':>8}{'R':>8}{'F1':>8}{'support':>9}"]
        for name in ("mer", "mc", "re"):
            s = self.stage(name)
            defined = bool(s.tp + s.fp + s.fn)
            lines.append(f"{name.upper():<6}  {_fmt(s.precision, defined)}  {_fmt(s.recall, defined)}"
                         f"  {_fmt(s.f1, defined)}{s.support:>9}")
        lines.append("")
        med = [c for c in self.re_by_type if _category(c, schema) == MEDICAL]
        tmp = [c for c in self.re_by_type if _category(c, schema) == TEMPORAL]
        lines.append(f"{'Med REL':<10}{'RE F1':>8}  {'Temp REL':<10}{'RE F1':>8}")
        for i in range(max(len(med), len(tmp))):
            left = right = " " * 18
            if i < len(med):
                s = self.re_by_type[med[i]]
                left = f"{med[i]:<10}  {_fmt(s.f1, s.support > 0)}"
            if i < len(tmp):
                s = self.re_by_type[tmp[i]]
                right = f"{tmp[i]:<10}  {_fmt(s.f1, s.support > 0)}"
            lines.append(f"{left}  {right}".rstrip())
        footer = f"unreachable gold relations: {self.unreachable_gold}"
        if self.window is not None:
            footer += f" (candidate window {self.window} tokens)"
        lines += ["", footer]
        return "\n".join(lines) + "\n"


def _category(code, schema):
    try:
        return schema.category_of(code)
    except Exception:
        return MEDICAL


def evaluate(pred, gold, unreachable_gold: int = 0, window: int = None, relation_codes=None) -> EvalReport:
    re_total, by_type = eval_re(pred, gold, relation_codes)
    return EvalReport(eval_mer(pred, gold), eval_mc(pred, gold), re_total, by_type,
                      unreachable_gold, window, len(as_documents(gold)))


@dataclass
class CrossValReport:
    """Per-fold reports with the macro average over folds as headline."""

    folds: list = field(default_factory=list)

    def macro(self, stage: str) -> dict:
        if not self.folds:
            return {"precision": 0.0, "recall": 0.0, "f1": 0.0}
        stats = [f.stage(stage) for f in self.folds]
        k = len(stats)
        return {"precision": sum(s.precision for s in stats) / k,
                "recall": sum(s.recall for s in stats) / k,
                "f1": sum(s.f1 for s in stats) / k}

    def to_dict(self) -> dict:
        return {"macro": {s: self.macro(s) for s in ("mer", "mc", "re")},
                "folds": [f.to_dict() for f in self.folds]}

    def to_text(self) -> str:
        lines = [f"{'Stage':<6}" + "".join(f"{'fold' + str(i):>9}" for i in range(len(self.folds)))
                 + f"{'macro':>9}"]
        for stage in ("mer", "mc", "re"):
            vals = "".join(f"{100 * f.stage(stage).f1:9.2f}" for f in self.folds)
            lines.append(f"{stage.upper():<6}{vals}{100 * self.macro(stage)['f1']:9.2f}")
        return "\n".join(lines) + "\n"
