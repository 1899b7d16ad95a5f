"""Entity recognition as BIO tagging with a linear-chain CRF.

Score tensors use ``T`` real tags plus two virtual states: index ``T`` is
START and ``T + 1`` is STOP in the ``(T+2, T+2)`` transition matrix, where
``trans[i, j]`` scores moving from tag ``i`` to tag ``j``.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .annotation_io import Entity
from .base import StageEstimator
from .evaluation import eval_mer
from .exceptions import TrainingDataError
from .schema import bio_tagset

ILLEGAL = -1e4


# ---------------------------------------------------------------------------
# BIO helpers
# ---------------------------------------------------------------------------

def illegal_transitions(tags) -> torch.Tensor:
    """Boolean ``(T+2, T+2)`` mask of structurally impossible transitions."""
    T = len(tags)
    start, stop = T, T + 1
    mask = torch.zeros(T + 2, T + 2, dtype=torch.bool)
    mask[:, start] = True  # nothing enters START
    mask[stop, :] = True  # nothing leaves STOP
    mask[start, stop] = True  # empty sequences do not exist
    for j, tag in enumerate(tags):
        if not tag.startswith("I-"):
            continue
        etype = tag[2:]
        mask[start, j] = True
        for i, prev in enumerate(tags):
            if prev == "O" or (prev[2:] != etype):
                mask[i, j] = True
    return mask


def tags_to_entities(tags, offset: int = 0) -> list:
    """Spans ``(start, end, etype)`` of maximal ``B-x (I-x)*`` runs.

    An ``I-x`` that does not continue an open ``x`` run starts a new entity.
    """
    spans = []
    current = None  # [start, etype]
    for i, tag in enumerate(list(tags) + ["O"]):
        if tag.startswith("I-") and current is not None and current[1] == tag[2:]:
            continue
        if current is not None:
            spans.append((current[0] + offset, i + offset, current[1]))
            current = None
        if tag != "O":
            current = [i, tag[2:]]
    return spans


def entities_to_tags(spans, n: int) -> list:
    """Inverse of :func:`tags_to_entities` for non-overlapping ``(start, end, etype)`` spans."""
    tags = ["O"] * n
    for start, end, etype in sorted(spans):
        if not 0 <= start < end <= n:
            raise ValueError(f"span [{start}, {end}) outside sequence of length {n}")
        if any(t != "O" for t in tags[start:end]):
            raise ValueError(f"span [{start}, {end}) overlaps another entity")
        tags[start] = f"B-{etype}"
        for i in range(start + 1, end):
            tags[i] = f"I-{etype}"
    return tags


def repair_tags(tags) -> list:
    """Rewrite orphan ``I-x`` tags to ``B-x``."""
    out = []
    prev = "O"
    for tag in tags:
        if tag.startswith("I-") and (prev == "O" or prev[2:] != tag[2:]):
            tag = "B-" + tag[2:]
        out.append(tag)
        prev = tag
    return out


# ---------------------------------------------------------------------------
# CRF scoring
# ---------------------------------------------------------------------------

def emissions(H, weight, bias=None):
    """Affine map of hidden rows ``(n, h)`` onto tag scores ``(n, T)``."""
    if H.shape[-1] != weight.shape[0]:
        raise ValueError(f"hidden size {H.shape[-1]} does not match projection {tuple(weight.shape)}")
    out = H @ weight
    return out if bias is None else out + bias


def _as_index(y, T):
    y = torch.as_tensor(y, dtype=torch.long)
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= T):
        raise IndexError(f"tag index out of range for {T} tags")
    return y


def sequence_score(em, trans, y):
    """Emission plus transition score of one tag path, START and STOP included."""
    n, T = em.shape
    y = _as_index(y, T)
    if len(y) != n:
        raise ValueError(f"path length {len(y)} != sequence length {n}")
    start, stop = T, T + 1
    score = em[torch.arange(n), y].sum()
    score = score + trans[start, y[0]] + trans[y[-1], stop]
    if n > 1:
        score = score + trans[y[:-1], y[1:]].sum()
    return score


def log_partition(em, trans):
    """log of the sum of ``exp(sequence_score)`` over all ``T**n`` paths (forward algorithm)."""
    n, T = em.shape
    if n < 1:
        raise ValueError("empty sequence")
    start, stop = T, T + 1
    inner = trans[:T, :T]
    alpha = trans[start, :T] + em[0]
    for t in range(1, n):
        alpha = torch.logsumexp(alpha.unsqueeze(1) + inner, dim=0) + em[t]
    return torch.logsumexp(alpha + trans[:T, stop], dim=0)


def crf_nll(em, trans, gold, illegal=None):
    """Negative log-likelihood of ``gold``; rejects paths through masked transitions."""
    T = em.shape[1]
    gold = _as_index(gold, T)
    if illegal is not None:
        path = [T] + gold.tolist() + [T + 1]
        for a, b in zip(path, path[1:]):
            if illegal[a, b]:
                raise TrainingDataError(f"gold path uses illegal transition {a}->{b}")
    return log_partition(em, trans) - sequence_score(em, trans, gold)


def viterbi_decode(em, trans) -> list:
    """Highest-scoring tag path; ties go to the lower tag index."""
    em = em.detach().cpu().numpy() if torch.is_tensor(em) else np.asarray(em, dtype=float)
    trans = trans.detach().cpu().numpy() if torch.is_tensor(trans) else np.asarray(trans, dtype=float)
    n, T = em.shape
    start, stop = T, T + 1
    inner = trans[:T, :T]
    score = trans[start, :T] + em[0]
    back = np.zeros((n, T), dtype=np.int64)
    for t in range(1, n):
        cand = score[:, None] + inner  # prev x next
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(T)] + em[t]
    last = int(np.argmax(score + trans[:T, stop]))
    path = [last]
    for t in range(n - 1, 0, -1):
        last = int(back[t, last])
        path.append(last)
    return path[::-1]


def batch_log_partition(em, lengths, trans):
    """Forward algorithm over a padded batch ``(B, L, T)``; returns ``(B,)``."""
    B, L, T = em.shape
    start, stop = T, T + 1
    inner = trans[:T, :T]
    # log-sum-exp over the previous tag as a matrix product, shifted by row maxima
    shift = inner.max().detach()
    exp_inner = torch.exp(inner - shift)
    tiny = torch.finfo(em.dtype).tiny
    alpha = trans[start, :T].unsqueeze(0) + em[:, 0]
    for t in range(1, L):
        m = alpha.max(dim=1, keepdim=True).values.detach()
        nxt = torch.log(torch.clamp_min(torch.exp(alpha - m) @ exp_inner, tiny)) + m + shift + em[:, t]
        live = (lengths > t).unsqueeze(1)
        alpha = torch.where(live, nxt, alpha)
    return torch.logsumexp(alpha + trans[:T, stop].unsqueeze(0), dim=1)


def batch_sequence_score(em, lengths, trans, y):
    B, L, T = em.shape
    start, stop = T, T + 1
    mask = torch.arange(L).unsqueeze(0) < lengths.unsqueeze(1)
    emit = em.gather(2, y.unsqueeze(2)).squeeze(2)
    score = (emit * mask).sum(1) + trans[start, y[:, 0]]
    if L > 1:
        step = trans[y[:, :-1], y[:, 1:]]
        score = score + (step * mask[:, 1:]).sum(1)
    last = y.gather(1, (lengths - 1).unsqueeze(1)).squeeze(1)
    return score + trans[last, stop]


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class CRF(nn.Module):
    """Transition parameters with BIO-illegal entries pinned to a constant."""

    def __init__(self, tags):
        super().__init__()
        self.tags = list(tags)
        T = len(self.tags)
        self.register_buffer("illegal", illegal_transitions(self.tags))
        self.transitions = nn.Parameter(torch.zeros(T + 2, T + 2))

    def matrix(self):
        return self.transitions.masked_fill(self.illegal, ILLEGAL)

    def nll(self, em, lengths, y):
        trans = self.matrix()
        return batch_log_partition(em, lengths, trans) - batch_sequence_score(em, lengths, trans, y)

    def decode(self, em) -> list:
        return viterbi_decode(em, self.matrix())


class TaggerNet(nn.Module):
    """Encoder, per-token projection onto BIO tags, CRF (or per-token softmax) output."""

    def __init__(self, encoder, tags, use_crf: bool = True):
        super().__init__()
        self.encoder = encoder
        self.tags = list(tags)
        self.tag_index = {t: i for i, t in enumerate(self.tags)}
        self.use_crf = use_crf
        self.projection = nn.Linear(encoder.hidden_dim, len(self.tags))
        nn.init.xavier_uniform_(self.projection.weight)
        nn.init.zeros_(self.projection.bias)
        self.crf = CRF(self.tags) if use_crf else None

    def sentence_scores(self, batch):
        """Emission scores per sentence, padded ``(S, L, T)``, and sentence lengths."""
        H = self.encoder(batch["sent_ids"], batch["sent_lengths"], batch["sent_doc_ids"],
                         batch["sent_offsets"])
        return emissions(H, self.projection.weight.t(), self.projection.bias), batch["sent_lengths"]

    def loss(self, batch):
        em, slen = self.sentence_scores(batch)
        y = batch["tags"]
        if self.use_crf:
            return self.crf.nll(em, slen, y).sum() / len(slen)
        mask = torch.arange(em.shape[1]).unsqueeze(0) < slen.unsqueeze(1)
        logp = torch.log_softmax(em, dim=-1).gather(2, y.unsqueeze(2)).squeeze(2)
        return -(logp * mask).sum() / len(slen)

    def decode(self, batch) -> list:
        """Per-document lists of ``(start, end, etype)`` spans."""
        em, slen = self.sentence_scores(batch)
        out, k = [], 0
        for spans in batch["sentences"]:
            found = []
            for (s, _), n in zip(spans, slen[k:k + len(spans)].tolist()):
                row = em[k, :n]
                k += 1
                if self.use_crf:
                    path = self.crf.decode(row)
                else:
                    path = row.argmax(-1).tolist()
                tags = repair_tags([self.tags[i] for i in path])
                found.extend(tags_to_entities(tags, offset=s))
            out.append(found)
        return out


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

class EntityRecognizer(StageEstimator):
    """BIO tagger over report lines. ``predict`` replaces entities, drops relations.

    Set ``use_crf=False`` for the per-token softmax ablation.
    """

    stage = "mer"

    def __init__(self, encoder="recurrent", embed_dim=32, hidden_dim=64, layers=1, heads=4,
                 dropout=0.1, vectors_path=None, min_freq=1, use_crf=True, epochs=200,
                 batch_size=8, learning_rate=1e-3, weight_decay=0.01, patience=10, min_epochs=20,
                 clip_norm=5.0, dev_fraction=0.10, seed=0, dtype="float64", schema=None):
        self.encoder = encoder
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.layers = layers
        self.heads = heads
        self.dropout = dropout
        self.vectors_path = vectors_path
        self.min_freq = min_freq
        self.use_crf = use_crf
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.patience = patience
        self.min_epochs = min_epochs
        self.clip_norm = clip_norm
        self.dev_fraction = dev_fraction
        self.seed = seed
        self.dtype = dtype
        self.schema = schema

    def _build_network(self, encoder, schema):
        self.tags_ = bio_tagset(schema.entity_types)
        return TaggerNet(encoder, self.tags_, self.use_crf)

    def _extra_state(self):
        return {"tags": self.tags_}

    def _restore_extra_state(self, state):
        self.tags_ = state["tags"]

    def _features(self, doc, train):
        item = self._base_features(doc)
        if train:
            index = {t: i for i, t in enumerate(bio_tagset(self.schema_.entity_types))}
            tags = []
            for s, e in item["sentences"]:
                inside = [(x.start - s, x.end - s, x.etype) for x in doc.entities
                          if s <= x.start and x.end <= e]
                tags.append([index[t] for t in entities_to_tags(inside, e - s)])
            item["tags"] = tags
        return item

    def _collate_extra(self, items, batch):
        if "tags" in items[0]:
            rows = [torch.tensor(t, dtype=torch.long) for it in items for t in it["tags"]]
            batch["tags"] = nn.utils.rnn.pad_sequence(rows, batch_first=True)

    def _decode(self, docs) -> list:
        docs = list(docs)
        live = [d for d in docs if d.tokens]
        items = [self._features(d, False) for d in live]
        spans = {}
        for b in range(0, len(items), 16):
            chunk = items[b:b + 16]
            for it, found in zip(chunk, self.network_.decode(self._collate(chunk))):
                spans[it["doc_id"]] = found
        out = []
        for doc in docs:
            found = spans.get(doc.doc_id, [])
            ents = [Entity(i + 1, etype, s, e, self.schema_.default_modality)
                    for i, (s, e, etype) in enumerate(found)]
            out.append(doc.with_annotations(entities=ents, relations=()))
        return out

    def _predict_docs(self, docs):
        return self._decode(docs)

    def _dev_score(self, docs):
        if not docs:
            return 0.0
        with torch.no_grad():
            return eval_mer(self._decode(docs), docs).f1
