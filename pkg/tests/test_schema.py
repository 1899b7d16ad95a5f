import pytest
from hypothesis import given
from hypothesis import strategies as st

from clinie.exceptions import SchemaError
from clinie.schema import (DEFAULT_SCHEMA, ENTITY_CODES, LENIENT, STRICT, Verdict, bio_tagset,
                           canonical_signature, load_schema, parse_schema, validate_relation)


def test_inventory():
    s = DEFAULT_SCHEMA
    assert len(s.entity_types) == 12 == len(set(s.entity_types))
    assert s.default_modality == "positive"
    medical = {r.code for r in s.relations if r.category == "medical"}
    temporal = {r.code for r in s.relations if r.category == "temporal"}
    assert medical == {"change", "compare", "feature", "region", "value"}
    assert temporal == {"on", "before", "after", "start", "finish"}


def test_canonical_signatures():
    region = canonical_signature("region")
    assert region.source_types == {"A", "D"} and region.target_types == {"A", "D"}
    on = canonical_signature("on")
    assert on.source_types == set(ENTITY_CODES) and on.target_types == {"TIMEX3"}
    value = canonical_signature("value")
    assert value.source_types == {"T-key", "M-key"} and value.target_types == {"T-val", "M-val"}
    assert canonical_signature("change").target_types == {"D", "A", "T-key", "M-key"}
    assert canonical_signature("feature").target_types == set(ENTITY_CODES)
    for r in DEFAULT_SCHEMA.relations:
        if r.category == "temporal":
            assert canonical_signature(r.code).target_types == {"TIMEX3"}
    with pytest.raises(SchemaError):
        canonical_signature("causes")


def test_validate_relation_examples():
    assert validate_relation("feature", "F", "D", STRICT) is Verdict.OK
    assert validate_relation("compare", "C", "C", STRICT) is Verdict.VIOLATION
    verdict = validate_relation("value", "TIMEX3", "T-val", LENIENT)
    assert verdict is Verdict.WARNING and verdict.ok
    with pytest.raises(SchemaError):
        validate_relation("value", "X", "T-val")
    with pytest.raises(SchemaError):
        validate_relation("value", "T-key", "T-val", "loose")


@given(st.sampled_from(DEFAULT_SCHEMA.relation_codes), st.sampled_from(ENTITY_CODES),
       st.sampled_from(ENTITY_CODES))
def test_strict_ok_implies_lenient_ok(code, src, tgt):
    if validate_relation(code, src, tgt, STRICT) is Verdict.OK:
        assert validate_relation(code, src, tgt, LENIENT) is Verdict.OK
    assert validate_relation(code, src, tgt, LENIENT).ok


def test_bio_tagset():
    assert bio_tagset({"D"}) == ["O", "B-D", "I-D"]
    assert bio_tagset({"D", "A"}) == ["O", "B-A", "I-A", "B-D", "I-D"]
    assert len(bio_tagset(ENTITY_CODES)) == 25
    with pytest.raises(SchemaError):
        bio_tagset(set())


@given(st.sets(st.sampled_from(ENTITY_CODES), min_size=1))
def test_bio_tagset_size_and_injective(types):
    tags = bio_tagset(types)
    assert len(tags) == 2 * len(types) + 1 == len(set(tags))
    assert {t[2:] for t in tags[1:]} == set(types)


def test_schema_text_roundtrip(tmp_path):
    path = tmp_path / "schema.txt"
    path.write_text(DEFAULT_SCHEMA.to_text())
    loaded = load_schema(path)
    assert loaded == DEFAULT_SCHEMA
    assert loaded.fingerprint == DEFAULT_SCHEMA.fingerprint


def test_custom_schema_and_errors():
    s = parse_schema("entity X\nentity Y  # comment\nmodality yes default\nmodality no\n"
                     "relation link medical X -> *\n")
    assert s.entity_types == ("X", "Y") and s.default_modality == "yes"
    assert s.fingerprint != DEFAULT_SCHEMA.fingerprint
    for bad in ("entity X\nmodality m\nrelation r medical X -> Z\n",
                "entity X\nentity X\nmodality m\n",
                "modality m\n",
                "entity X\nmodality m\nrelation r other X -> X\n",
                "entity X\nmodality m default\nmodality n default\n",
                "entity X\nmodality m\nbogus line\n"):
        with pytest.raises(SchemaError):
            parse_schema(bad)


def test_unknown_modality_check():
    assert DEFAULT_SCHEMA.check_modality("negative")
    assert DEFAULT_SCHEMA.check_modality("maybe", LENIENT) is False
    with pytest.raises(SchemaError):
        DEFAULT_SCHEMA.check_modality("maybe", STRICT)
