"""Entity modality classification.

An entity is represented by the sum of its tokens' hidden rows concatenated
with an embedding of its entity type; one affine layer and a softmax give the
modality distribution.
"""
from __future__ import annotations

import torch
from torch import nn

from .base import StageEstimator
from .encoder import encode_sentences
from .evaluation import eval_mc
from .exceptions import SchemaError


def entity_embedding(H, span):
    """Element-wise sum of the rows of ``H`` in the token span ``[start, end)``."""
    start, end = span
    if not 0 <= start < end <= H.shape[0]:
        raise ValueError(f"span [{start}, {end}) is empty or outside {H.shape[0]} rows")
    return H[start:end].sum(0)


def span_pooling(spans, doc_index, n_docs: int, doc_len: int, dtype):
    """0/1 matrix ``(n_spans, n_docs * doc_len)`` summing the token rows of each span."""
    pool = torch.zeros(len(spans), n_docs * doc_len, dtype=dtype)
    for k, ((s, e), b) in enumerate(zip(spans, doc_index)):
        pool[k, b * doc_len + s:b * doc_len + e] = 1.0
    return pool


class ModalityNet(nn.Module):
    def __init__(self, encoder, entity_types, modalities, type_dim: int = 16):
        super().__init__()
        self.encoder = encoder
        self.entity_types = list(entity_types)
        self.modalities = list(modalities)
        self.type_index = {t: i for i, t in enumerate(self.entity_types)}
        self.type_embedding = nn.Embedding(len(self.entity_types), type_dim)
        self.classifier = nn.Linear(encoder.hidden_dim + type_dim, len(self.modalities))
        nn.init.uniform_(self.type_embedding.weight, -0.1, 0.1)
        nn.init.xavier_uniform_(self.classifier.weight)
        nn.init.zeros_(self.classifier.bias)

    def type_ids(self, etypes):
        try:
            return torch.tensor([self.type_index[t] for t in etypes], dtype=torch.long)
        except KeyError as exc:
            raise SchemaError(f"unknown entity type {exc.args[0]!r}") from None

    def logits(self, E, etypes):
        feats = torch.cat([E, self.type_embedding(self.type_ids(etypes))], dim=-1)
        return self.classifier(feats)

    def entity_vectors(self, batch):
        _, H = encode_sentences(self.encoder, batch)
        B, L, h = H.shape
        pool = span_pooling(batch["spans"], batch["span_doc"], B, L, H.dtype)
        return pool @ H.reshape(B * L, h)

    def loss(self, batch):
        if not batch["spans"]:
            return self.classifier.bias.sum() * 0.0
        logits = self.logits(self.entity_vectors(batch), batch["etypes"])
        return nn.functional.cross_entropy(logits, batch["gold"])

    def predict_proba(self, batch):
        if not batch["spans"]:
            return torch.zeros(0, len(self.modalities))
        return torch.softmax(self.logits(self.entity_vectors(batch), batch["etypes"]), dim=-1)


def classify_modality(E, etype, net: ModalityNet):
    """Probability vector over the modalities for one entity vector."""
    return torch.softmax(net.logits(E.unsqueeze(0), [etype])[0], dim=-1)


def modality_nll(probs, gold: int):
    if not 0 <= gold < probs.shape[-1]:
        raise IndexError(f"gold modality {gold} out of range")
    return -torch.log(probs[gold])


class ModalityClassifier(StageEstimator):
    """Assigns a modality to every entity already present in the input documents."""

    stage = "mc"

    def __init__(self, encoder="recurrent", embed_dim=32, hidden_dim=64, layers=1, heads=4,
                 dropout=0.1, vectors_path=None, min_freq=1, type_dim=16, epochs=200,
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
        self.type_dim = type_dim
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
        return ModalityNet(encoder, schema.entity_types, schema.modalities, self.type_dim)

    def _features(self, doc, train):
        item = self._base_features(doc)
        item["spans"] = [e.span for e in doc.entities]
        item["etypes"] = [e.etype for e in doc.entities]
        if train:
            index = {m: i for i, m in enumerate(self.schema_.modalities)}
            unknown = [e.modality for e in doc.entities if e.modality not in index]
            if unknown:
                raise SchemaError(f"{doc.doc_id}: unknown modality {unknown[0]!r} in training data")
            item["gold"] = [index[e.modality] for e in doc.entities]
        return item

    def _collate_extra(self, items, batch):
        batch["spans"] = [sp for it in items for sp in it["spans"]]
        batch["span_doc"] = [b for b, it in enumerate(items) for _ in it["spans"]]
        batch["etypes"] = [t for it in items for t in it["etypes"]]
        if "gold" in items[0]:
            batch["gold"] = torch.tensor([g for it in items for g in it["gold"]], dtype=torch.long)

    def _classify(self, docs) -> list:
        docs = list(docs)
        live = [d for d in docs if d.tokens and d.entities]
        items = [self._features(d, False) for d in live]
        labels = {}
        modalities = self.network_.modalities
        for b in range(0, len(items), 16):
            chunk = items[b:b + 16]
            probs = self.network_.predict_proba(self._collate(chunk))
            k = 0
            for it in chunk:
                n = len(it["spans"])
                labels[it["doc_id"]] = [modalities[i] for i in probs[k:k + n].argmax(-1).tolist()]
                k += n
        out = []
        for doc in docs:
            mods = labels.get(doc.doc_id)
            if mods is None:
                out.append(doc)
                continue
            ents = [type(e)(e.id, e.etype, e.start, e.end, m) for e, m in zip(doc.entities, mods)]
            out.append(doc.with_annotations(entities=ents))
        return out

    def _predict_docs(self, docs):
        return self._classify(docs)

    def _dev_score(self, docs):
        if not docs:
            return 0.0
        with torch.no_grad():
            return eval_mc(self._classify(docs), docs).f1
