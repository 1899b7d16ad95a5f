import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clinie.exceptions import TrainingDataError
from clinie.ner_crf import (CRF, ILLEGAL, EntityRecognizer, batch_log_partition, batch_sequence_score,
                            crf_nll, emissions, entities_to_tags, illegal_transitions, log_partition,
                            repair_tags, sequence_score, tags_to_entities, viterbi_decode)
from clinie.schema import bio_tagset


def brute_scores(em, trans):
    n, T = em.shape
    paths = list(itertools.product(range(T), repeat=n))
    return paths, torch.stack([sequence_score(em, trans, list(p)) for p in paths])


def random_instance(rng, n, T):
    em = torch.tensor(rng.uniform(-2, 2, (n, T)))
    trans = torch.tensor(rng.uniform(-2, 2, (T + 2, T + 2)))
    return em, trans


def test_sequence_score_by_hand():
    em = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
    trans = torch.zeros(4, 4, dtype=torch.float64)
    trans[2, 0] = 0.5  # START -> 0
    trans[0, 1] = -1.0
    trans[1, 3] = 0.25  # 1 -> STOP
    assert sequence_score(em, trans, [0, 1]).item() == pytest.approx(1 + 2 + 0.5 - 1 + 0.25)


def test_log_partition_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, T = rng.integers(1, 6), rng.integers(1, 6)
        em, trans = random_instance(rng, n, T)
        _, scores = brute_scores(em, trans)
        assert abs(log_partition(em, trans) - torch.logsumexp(scores, 0)).item() < 1e-9


def test_single_token_single_tag():
    em = torch.tensor([[0.7]], dtype=torch.float64)
    trans = torch.tensor(np.arange(9.0).reshape(3, 3))
    # the only path: START -> 0 -> STOP
    expected = 0.7 + trans[1, 0] + trans[0, 2]
    assert log_partition(em, trans).item() == pytest.approx(expected.item())
    assert viterbi_decode(em, trans) == [0]


def test_viterbi_matches_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n, T = rng.integers(1, 6), rng.integers(1, 6)
        em, trans = random_instance(rng, n, T)
        em = em + torch.tensor(rng.normal(0, 1e-3, em.shape))  # unique maximum
        paths, scores = brute_scores(em, trans)
        assert viterbi_decode(em, trans) == list(paths[int(scores.argmax())])


def test_viterbi_tie_goes_to_lowest_index():
    em = torch.zeros(3, 2, dtype=torch.float64)
    trans = torch.zeros(4, 4, dtype=torch.float64)
    assert viterbi_decode(em, trans) == [0, 0, 0]


def test_nll_gradient_is_marginal_difference():
    # d nll / d em[t, j] = P(y_t = j) - [gold_t = j], marginals by enumeration
    rng = np.random.default_rng(2)
    em, trans = random_instance(rng, 4, 3)
    em.requires_grad_(True)
    gold = [0, 2, 1, 1]
    crf_nll(em, trans, gold).backward()
    paths, scores = brute_scores(em.detach(), trans)
    probs = torch.softmax(scores, 0)
    marg = torch.zeros(4, 3, dtype=torch.float64)
    for p, w in zip(paths, probs):
        for t, j in enumerate(p):
            marg[t, j] += w
    marg[torch.arange(4), torch.tensor(gold)] -= 1
    assert torch.allclose(em.grad, marg, atol=1e-10)


def test_batch_forward_matches_single():
    rng = np.random.default_rng(3)
    tags = bio_tagset(["D", "A"])
    crf = CRF(tags).double()
    with torch.no_grad():
        crf.transitions.copy_(torch.tensor(rng.uniform(-2, 2, crf.transitions.shape)))
    trans = crf.matrix()
    lengths = torch.tensor([5, 1, 3])
    em = torch.tensor(rng.uniform(-2, 2, (3, 5, len(tags))))
    y = torch.tensor(rng.integers(0, len(tags), (3, 5)))
    z = batch_log_partition(em, lengths, trans)
    s = batch_sequence_score(em, lengths, trans, y)
    for b, n in enumerate(lengths.tolist()):
        assert z[b].item() == pytest.approx(log_partition(em[b, :n], trans).item(), abs=1e-9)
        assert s[b].item() == pytest.approx(sequence_score(em[b, :n], trans, y[b, :n]).item(), abs=1e-9)


def test_illegal_transitions():
    tags = bio_tagset(["A", "D"])  # O, B-A, I-A, B-D, I-D
    m = illegal_transitions(tags)
    T = len(tags)
    ix = tags.index
    assert m[ix("O"), ix("I-A")] and m[ix("B-D"), ix("I-A")] and m[ix("I-D"), ix("I-A")]
    assert m[T, ix("I-D")]  # START -> I-x
    assert not m[ix("B-A"), ix("I-A")] and not m[ix("I-A"), ix("I-A")]
    assert not m[ix("I-A"), ix("B-D")] and not m[T, ix("B-A")] and not m[ix("I-D"), T + 1]
    assert m[:, T].all() and m[T + 1, :].all()


def test_masked_paths_never_decoded_and_get_no_gradient():
    rng = np.random.default_rng(4)
    tags = bio_tagset(["A", "D"])
    crf = CRF(tags).double()
    for _ in range(20):
        em = torch.tensor(rng.uniform(-5, 5, (6, len(tags))))
        path = [tags[i] for i in crf.decode(em)]
        assert repair_tags(path) == path
    em = torch.tensor(rng.uniform(-1, 1, (1, 4, len(tags))))
    y = torch.tensor([[1, 2, 0, 3]])
    crf.nll(em, torch.tensor([4]), y).sum().backward()
    assert (crf.transitions.grad[crf.illegal] == 0).all()
    assert crf.matrix()[crf.illegal].eq(ILLEGAL).all()


def test_illegal_gold_rejected():
    tags = bio_tagset(["A"])
    T = len(tags)
    em = torch.zeros(2, T, dtype=torch.float64)
    trans = torch.zeros(T + 2, T + 2, dtype=torch.float64)
    with pytest.raises(TrainingDataError):
        crf_nll(em, trans, [0, tags.index("I-A")], illegal_transitions(tags))


def test_tags_to_entities_examples():
    assert tags_to_entities(["B-D", "I-D", "O", "B-A"]) == [(0, 2, "D"), (3, 4, "A")]
    assert tags_to_entities(["O", "I-D", "I-D"]) == [(1, 3, "D")]
    assert tags_to_entities(["B-D", "I-A"]) == [(0, 1, "D"), (1, 2, "A")]
    assert tags_to_entities(["B-D", "B-D"], offset=5) == [(5, 6, "D"), (6, 7, "D")]
    assert repair_tags(["O", "I-D", "I-A"]) == ["O", "B-D", "B-A"]


@st.composite
def span_sets(draw):
    n = draw(st.integers(0, 12))
    spans, i = [], 0
    while i < n:
        if draw(st.booleans()):
            end = draw(st.integers(i + 1, n))
            spans.append((i, end, draw(st.sampled_from(["A", "D", "T-key"]))))
            i = end
        else:
            i += 1
    return n, spans


@settings(max_examples=200, deadline=None)
@given(span_sets())
def test_tag_roundtrip(case):
    n, spans = case
    tags = entities_to_tags(spans, n)
    assert tags_to_entities(tags) == spans
    assert repair_tags(tags) == tags


def test_emissions_shape_check():
    H = torch.zeros(3, 4)
    assert emissions(H, torch.zeros(4, 5)).shape == (3, 5)
    with pytest.raises(ValueError):
        emissions(H, torch.zeros(3, 5))


@pytest.mark.parametrize("use_crf", [True, False])
def test_recognizer_fit_predict(small_corpus, use_crf):
    docs = small_corpus.documents
    est = EntityRecognizer(epochs=3, use_crf=use_crf, hidden_dim=16, embed_dim=8, seed=1)
    est.fit(docs[:30], X_dev=docs[30:35])
    pred = est.predict([d.plain() for d in docs[35:]])
    assert [d.doc_id for d in pred] == [d.doc_id for d in docs[35:]]
    for d in pred:
        assert not d.relations
        assert all(e.modality == "positive" for e in d.entities)
    assert len(est.log_) == 4 and sum(e["selected"] for e in est.log_) == 1
