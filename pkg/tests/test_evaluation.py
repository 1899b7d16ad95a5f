import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clinie.annotation_io import Document, Entity, Relation
from clinie.evaluation import PRF, CrossValReport, eval_mc, eval_mer, eval_re, evaluate
from clinie.exceptions import CorpusMismatchError

TEXT = "w0 w1 w2 w3 w4 w5 w6 w7"


def _doc(ents, rels=(), doc_id="d"):
    return Document(doc_id, TEXT, entities=ents, relations=rels)


def test_prf_basics():
    s = PRF(2, 1, 1)
    assert s.precision == pytest.approx(2 / 3) and s.recall == pytest.approx(2 / 3)
    assert s.f1 == pytest.approx(2 / 3) and s.support == 3
    assert PRF().f1 == 0.0 and PRF(0, 3, 0).precision == 0.0
    assert (PRF(1, 2, 3) + PRF(1, 1, 1)) == PRF(2, 3, 4)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_is_harmonic_mean(tp, fp, fn):
    s = PRF(tp, fp, fn)
    expected = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    assert s.f1 == pytest.approx(expected)
    assert 0 <= s.f1 <= 1


def test_exact_span_and_type():
    gold = _doc([Entity(1, "D", 0, 2, "positive"), Entity(2, "A", 3, 4)])
    off_by_one = _doc([Entity(1, "D", 0, 1, "positive"), Entity(2, "A", 3, 4)])
    retyped = _doc([Entity(1, "F", 0, 2, "positive"), Entity(2, "A", 3, 4)])
    assert eval_mer(off_by_one, [gold]) == PRF(1, 1, 1)
    assert eval_mer([retyped], [gold]) == PRF(1, 1, 1)
    remod = _doc([Entity(1, "D", 0, 2, "negative"), Entity(2, "A", 3, 4)])
    assert eval_mer([remod], [gold]) == PRF(2, 0, 0)
    assert eval_mc([remod], [gold]) == PRF(1, 1, 1)


def test_relations_keyed_by_span_not_id():
    gold = _doc([Entity(1, "D", 0, 1), Entity(2, "A", 2, 3)], [Relation(1, "region", 2)])
    renum = _doc([Entity(7, "D", 0, 1), Entity(3, "A", 2, 3)], [Relation(7, "region", 3)])
    flipped = _doc([Entity(1, "D", 0, 1), Entity(2, "A", 2, 3)], [Relation(2, "region", 1)])
    total, by_type = eval_re([renum], [gold])
    assert total == PRF(1, 0, 0) and by_type["region"] == PRF(1, 0, 0)
    assert eval_re([flipped], [gold])[0] == PRF(0, 1, 1)


def test_upstream_errors_propagate():
    gold = _doc([Entity(1, "D", 0, 1), Entity(2, "A", 2, 3)], [Relation(1, "region", 2)])
    wrong_span = _doc([Entity(1, "D", 0, 2), Entity(2, "A", 2, 3)], [Relation(1, "region", 2)])
    assert eval_re([wrong_span], [gold])[0] == PRF(0, 1, 1)


def test_alignment_errors():
    gold = [_doc([], doc_id="a"), _doc([], doc_id="b")]
    with pytest.raises(CorpusMismatchError):
        eval_mer(gold[:1], gold)
    with pytest.raises(CorpusMismatchError):
        eval_mer([gold[0], gold[0]], gold)
    with pytest.raises(CorpusMismatchError):
        eval_mer([Document("a", "w0 w1"), gold[1]], gold)
    assert eval_mer(list(reversed(gold)), gold) == PRF()


def test_report_formats():
    gold = _doc([Entity(1, "D", 0, 1), Entity(2, "A", 2, 3), Entity(3, "TIMEX3", 5, 6)],
                [Relation(1, "region", 2), Relation(1, "on", 3)])
    pred = _doc([Entity(1, "D", 0, 1), Entity(2, "A", 2, 3)], [Relation(1, "region", 2)])
    report = evaluate([pred], [gold], unreachable_gold=1, window=128)
    data = json.loads(report.to_json())
    assert data["re"]["tp"] == 1 and data["re"]["fn"] == 1 and data["unreachable_gold"] == 1
    assert data["re_by_type"]["on"]["f1"] == 0.0 and data["documents"] == 1
    tsv = report.to_tsv().splitlines()
    assert tsv[0].split("\t")[0] == "scope" and all(len(r.split("\t")) == 8 for r in tsv)
    assert "relation\tvalue\t0\t0\t0\t0.000000\t0.000000\t-" in tsv
    text = report.to_text()
    assert "Med REL" in text and "Temp REL" in text and "candidate window 128" in text
    assert "MER" in text and " 80.00" in text


def test_cross_val_report():
    a = evaluate([_doc([Entity(1, "D", 0, 1)])], [_doc([Entity(1, "D", 0, 1)])])
    b = evaluate([_doc([])], [_doc([Entity(1, "D", 0, 1)])])
    cv = CrossValReport([a, b])
    assert cv.macro("mer")["f1"] == pytest.approx(0.5)
    assert CrossValReport().macro("re")["f1"] == 0.0
    assert len(cv.to_dict()["folds"]) == 2
    assert cv.to_text().splitlines()[1].startswith("MER")
