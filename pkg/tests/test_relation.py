import itertools

import numpy as np
import pytest
import torch
from _gradcases import relation_case

from clinie.annotation_io import Entity, Relation
from clinie.encoder import EncoderConfig, make_encoder
from clinie.exceptions import SchemaError
from clinie.gradcheck import check_gradients
from clinie.relation_extractor import (RelationExtractor, RelationNet, candidate_pairs, count_unreachable,
                                       decode_relations, distance_bucket, entity_rep, line_of,
                                       pair_probabilities, relation_loss, token_distance)
from clinie.schema import DEFAULT_SCHEMA, STRICT, Verdict

S = DEFAULT_SCHEMA


def _net(pair_hidden=0, use_distance=False, seed=0):
    torch.manual_seed(seed)
    enc = make_encoder(EncoderConfig(embed_dim=4, hidden_dim=4, dropout=0.0), 10)
    return RelationNet(enc, S.entity_types, S.modalities, S.relation_codes, 3, 2, pair_hidden,
                       use_distance).double()


def _zero(net):
    with torch.no_grad():
        for name, p in net.named_parameters():
            if not name.startswith("encoder"):
                p.zero_()


def test_entity_rep_layout():
    net = _net()
    H = torch.randn(5, 4, dtype=torch.float64)
    e = Entity(1, "D", 2, 3, "negative")
    rep = entity_rep(H, e, net)
    assert rep.shape == (4 + 3 + 2,)
    assert torch.equal(rep[:4], H[2])
    other = entity_rep(H, Entity(1, "D", 2, 3, "general"), net)
    assert torch.equal(rep[:-2], other[:-2]) and not torch.equal(rep[-2:], other[-2:])
    with pytest.raises(SchemaError):
        entity_rep(H, Entity(1, "D", 2, 3, "maybe"), net)


@pytest.mark.parametrize("pair_hidden", [0, 5])
def test_zero_scorer_gives_half(pair_hidden):
    net = _net(pair_hidden, use_distance=True)
    _zero(net)
    r = torch.randn(9, dtype=torch.float64)
    probs = pair_probabilities(r, r * 2, net, 3, 1)
    assert probs.shape == (len(S.relation_codes),)
    assert torch.allclose(probs, torch.full_like(probs, 0.5))


def test_hand_set_weights_region():
    net = _net()
    _zero(net)
    k = S.relation_codes.index("region")
    with torch.no_grad():
        net.source.weight[k, 0] = 4.0
        net.target.weight[k, 0] = 4.0
    r = torch.zeros(9, dtype=torch.float64)
    r[0] = 1.0
    probs = pair_probabilities(r, r, net)
    assert probs[k] > 0.9
    assert torch.allclose(torch.cat([probs[:k], probs[k + 1:]]), torch.full((9,), 0.5, dtype=torch.float64))


def _random_entities(rng, n_tok, k_max=6):
    ents, pos, k = [], 0, 1
    while pos < n_tok and len(ents) < k_max:
        end = pos + int(rng.integers(1, 3))
        if end <= n_tok and rng.random() < 0.7:
            ents.append(Entity(k, str(rng.choice(S.entity_types)), pos, end, str(rng.choice(S.modalities))))
            k += 1
        pos = end
    return ents


def test_pair_independence():
    rng = np.random.default_rng(0)
    net = _net(pair_hidden=6, use_distance=True)
    H = torch.randn(12, 4, dtype=torch.float64)
    ents = _random_entities(rng, 12)
    a, b = ents[0], ents[1]
    alone = decode_relations([a, b], H, net, 0.0, schema_filter=False)
    crowd = decode_relations(ents, H, net, 0.0, schema_filter=False)
    pair = {(r.source_id, r.target_id) for r in crowd}
    assert {(a.id, b.id), (b.id, a.id)} <= pair
    assert [r for r in crowd if {r.source_id, r.target_id} == {a.id, b.id}] == alone


def test_decode_matches_enumeration():
    rng = np.random.default_rng(1)
    for trial in range(30):
        net = _net(pair_hidden=int(rng.choice([0, 4])), use_distance=True, seed=trial)
        with torch.no_grad():
            for p in net.parameters():
                p.normal_(0, 1.0)
        H = torch.randn(10, 4, dtype=torch.float64)
        ents = _random_entities(rng, 10)
        theta = float(rng.uniform(0.2, 0.8))
        lines = [t // 4 for t in range(10)]
        expected = []
        for a, b in itertools.permutations(ents, 2):
            gap = min(abs(lines[a.start] - lines[b.start]), 2)
            probs = pair_probabilities(entity_rep(H, a, net), entity_rep(H, b, net), net,
                                       distance_bucket(a, b), gap)
            for k, code in enumerate(S.relation_codes):
                if probs[k] > theta and S.validate_relation(code, a.etype, b.etype, STRICT) is Verdict.OK:
                    expected.append(Relation(a.id, code, b.id, S.category_of(code)))
        got = decode_relations(ents, H, net, theta, schema_filter=True, schema=S, lines=lines)
        assert got == sorted(expected)
        for r in got:
            src, tgt = (next(e for e in ents if e.id == i) for i in (r.source_id, r.target_id))
            assert S.validate_relation(r.rtype, src.etype, tgt.etype) is Verdict.OK


def test_threshold_is_strict():
    net = _net()
    _zero(net)
    H = torch.randn(4, 4, dtype=torch.float64)
    ents = [Entity(1, "D", 0, 1), Entity(2, "A", 2, 3)]
    assert decode_relations(ents, H, net, 0.5, schema_filter=False) == []
    assert len(decode_relations(ents, H, net, 0.49, schema_filter=False)) == 2 * len(S.relation_codes)


def test_loss_values():
    net = _net()
    _zero(net)
    H = torch.randn(4, 4, dtype=torch.float64)
    ents = [Entity(1, "D", 0, 1), Entity(2, "A", 2, 3)]
    loss, unreachable = relation_loss(ents, [], H, net)
    assert loss.item() == pytest.approx(np.log(2)) and unreachable == 0
    # a scorer that saturates toward the targets drives the loss toward 0
    k = S.relation_codes.index("region")
    with torch.no_grad():
        net.source.bias.fill_(-30.0)
        net.source.bias[-1] = 30.0
    loss, _ = relation_loss(ents, [], H, net)
    assert loss.item() < 1e-10


def test_window_and_unreachable():
    a, b, c = Entity(1, "D", 0, 1), Entity(2, "A", 5, 6), Entity(3, "A", 1, 2)
    assert token_distance(a, b) == 4 and token_distance(a, c) == 0
    assert set(candidate_pairs([a, b, c], window=3)) == {(0, 2), (2, 0), (1, 2), (2, 1)}
    net = _net()
    H = torch.randn(6, 4, dtype=torch.float64)
    _, unreachable = relation_loss([a, b, c], [Relation(1, "region", 2)], H, net, window=3)
    assert unreachable == 1

    class Doc:
        relations = [Relation(1, "region", 2), Relation(1, "region", 3)]

        def entity(self, i):
            return {1: a, 2: b, 3: c}[i]

    assert count_unreachable([Doc()], window=3) == 1 and count_unreachable([Doc()], window=4) == 0


def test_distance_buckets_cover_range():
    mk = lambda s: Entity(1, "D", s, s + 1)  # noqa: E731
    buckets = {distance_bucket(mk(0), mk(d)) for d in range(0, 300)} | \
        {distance_bucket(mk(300), mk(300 - d)) for d in range(300)}
    from clinie.relation_extractor import N_DISTANCE
    assert min(buckets) == 0 and max(buckets) == N_DISTANCE - 1


@pytest.mark.parametrize("seed", range(3))
def test_gradients(seed):
    loss, params, _ = relation_case(seed)
    assert max(check_gradients(loss, params).values()) < 1e-3


def test_extractor_predict_matches_single_instance_decode(small_corpus):
    docs = small_corpus.documents
    est = RelationExtractor(epochs=3, embed_dim=8, hidden_dim=8, pair_hidden=8).fit(docs[:30], X_dev=docs[30:35])
    test = [d.with_annotations(relations=()) for d in docs[35:]]
    pred = est.predict(test)
    from clinie.encoder import encode

    for doc, p in zip(test, pred):
        assert p.entities == doc.entities
        sent_H = []
        for s, e in doc.sentences():
            sent_H.append(encode(est.network_.encoder, est.vocab_.encode(doc.words[s:e])))
        H = torch.cat(sent_H)
        with torch.no_grad():
            expected = decode_relations(doc.entities, H, est.network_, est.threshold, True, S,
                                        est.window, line_of(doc))
        assert list(p.relations) == expected
