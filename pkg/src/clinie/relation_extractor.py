"""Relation extraction by multiple-head selection.

Every entity ``E_i`` scores every other candidate entity ``E_j`` for each
relation type independently: ``P(E_j, r_k | E_i) = sigmoid(s(E_j, r_k, E_i))``.
Scores have one extra slot ``N`` (no relation) that only enters training.
"""
from __future__ import annotations

import torch
from torch import nn

from .annotation_io import Relation
from .base import StageEstimator
from .encoder import encode_sentences
from .evaluation import eval_re
from .exceptions import SchemaError
from .modality_clf import entity_embedding, span_pooling
from .schema import STRICT, Verdict

# signed token-distance buckets: 0..4 exact, then powers of two
_EDGES = (0, 1, 2, 3, 4, 5, 8, 16, 32, 64)
N_DISTANCE = 2 * len(_EDGES) + 1
N_LINE_GAP = 3  # same line, adjacent line, further


def token_distance(a, b) -> int:
    """Tokens strictly between two spans (0 when they touch or overlap)."""
    return max(0, max(a.start, b.start) - min(a.end, b.end))


def distance_bucket(a, b) -> int:
    d = b.start - a.start
    mag = sum(abs(d) >= e for e in _EDGES[1:])
    if d == 0:
        return len(_EDGES)
    return len(_EDGES) + (mag + 1 if d > 0 else -(mag + 1))


def line_of(doc) -> list:
    """Line number for every token (tokens outside any line get -1)."""
    lines = [-1] * len(doc.tokens)
    for n, (s, e) in enumerate(doc.sentences()):
        for t in range(s, e):
            lines[t] = n
    return lines


def candidate_pairs(entities, window: int = 128) -> list:
    """Ordered index pairs ``(i, j)``, ``i != j``, within ``window`` tokens of each other."""
    return [(i, j) for i, a in enumerate(entities) for j, b in enumerate(entities)
            if i != j and token_distance(a, b) <= window]


def count_unreachable(docs, window: int = 128) -> int:
    """Gold relations whose endpoints lie further apart than ``window`` tokens."""
    total = 0
    for doc in docs:
        for rel in doc.relations:
            if token_distance(doc.entity(rel.source_id), doc.entity(rel.target_id)) > window:
                total += 1
    return total


class RelationNet(nn.Module):
    """Entity reps ``[span sum; type embedding; modality embedding]`` and a pair scorer.

    With ``pair_hidden=0`` the scorer is one affine map of ``[rep_i; rep_j]``;
    otherwise a tanh hidden layer sits in between. ``use_distance`` adds
    embeddings of the signed token distance and line gap to the pre-activation.
    """

    def __init__(self, encoder, entity_types, modalities, relation_codes, type_dim=16,
                 modality_dim=8, pair_hidden=64, use_distance=True):
        super().__init__()
        self.encoder = encoder
        self.entity_types = list(entity_types)
        self.modalities = list(modalities)
        self.relation_codes = list(relation_codes)
        self.type_index = {t: i for i, t in enumerate(self.entity_types)}
        self.modality_index = {m: i for i, m in enumerate(self.modalities)}
        self.type_embedding = nn.Embedding(len(self.entity_types), type_dim)
        self.modality_embedding = nn.Embedding(len(self.modalities), modality_dim)
        self.rep_dim = encoder.hidden_dim + type_dim + modality_dim
        self.n_out = len(self.relation_codes) + 1
        self.pair_hidden = pair_hidden
        self.use_distance = use_distance
        width = pair_hidden or self.n_out
        self.source = nn.Linear(self.rep_dim, width)
        self.target = nn.Linear(self.rep_dim, width, bias=False)
        self.output = nn.Linear(pair_hidden, self.n_out) if pair_hidden else None
        if use_distance:
            self.distance_embedding = nn.Embedding(N_DISTANCE, width)
            self.line_embedding = nn.Embedding(N_LINE_GAP, width)
            nn.init.uniform_(self.distance_embedding.weight, -0.1, 0.1)
            nn.init.uniform_(self.line_embedding.weight, -0.1, 0.1)
        for emb in (self.type_embedding, self.modality_embedding):
            nn.init.uniform_(emb.weight, -0.1, 0.1)
        for lin in (self.source, self.target, self.output):
            if lin is not None:
                nn.init.xavier_uniform_(lin.weight)
                if lin.bias is not None:
                    nn.init.zeros_(lin.bias)

    def _index(self, table, values, what):
        try:
            return torch.tensor([table[v] for v in values], dtype=torch.long)
        except KeyError as exc:
            raise SchemaError(f"unknown {what} {exc.args[0]!r}") from None

    def reps(self, E, etypes, modalities):
        return torch.cat([E, self.type_embedding(self._index(self.type_index, etypes, "entity type")),
                          self.modality_embedding(self._index(self.modality_index, modalities, "modality"))],
                         dim=-1)

    def scores(self, rep_i, rep_j, distance=None, line_gap=None):
        """Raw scores ``(..., |R| + 1)``; the last column is the N slot."""
        z = self.source(rep_i) + self.target(rep_j)
        if self.use_distance and distance is not None:
            z = z + self.distance_embedding(distance) + self.line_embedding(line_gap)
        if self.output is None:
            return z
        return self.output(torch.tanh(z))

    def batch_scores(self, batch):
        if len(batch["pairs"]) == 0:
            return None
        _, H = encode_sentences(self.encoder, batch)
        B, L, h = H.shape
        E = span_pooling(batch["spans"], batch["span_doc"], B, L, H.dtype) @ H.reshape(B * L, h)
        R = self.reps(E, batch["etypes"], batch["modalities"])
        pi, pj = batch["pairs"][:, 0], batch["pairs"][:, 1]
        return self.scores(R[pi], R[pj], batch["distance"], batch["line_gap"])

    def loss(self, batch):
        s = self.batch_scores(batch)
        if s is None:
            return sum(p.sum() for p in self.parameters()) * 0.0
        return nn.functional.binary_cross_entropy_with_logits(s, batch["targets"])


# ---------------------------------------------------------------------------
# single-instance functions
# ---------------------------------------------------------------------------

def entity_rep(H, entity, net: RelationNet):
    E = entity_embedding(H, entity.span)
    return net.reps(E.unsqueeze(0), [entity.etype], [entity.modality])[0]


def pair_probabilities(rep_i, rep_j, net: RelationNet, distance=None, line_gap=None):
    """Independent sigmoid probability per relation type (N slot dropped)."""
    if distance is not None:
        distance = torch.as_tensor(distance, dtype=torch.long)
        line_gap = torch.as_tensor(line_gap, dtype=torch.long)
    return torch.sigmoid(net.scores(rep_i, rep_j, distance, line_gap))[..., :-1]


def _pair_features(a, b, lines):
    gap = abs(lines[a.start] - lines[b.start]) if lines is not None else 0
    return distance_bucket(a, b), min(gap, N_LINE_GAP - 1)


def decode_relations(entities, H, net: RelationNet, threshold: float = 0.5, schema_filter: bool = True,
                     schema=None, window: int = 128, lines=None) -> list:
    """Emit ``r_k`` for candidate pair ``(i, j)`` iff its probability is strictly above ``threshold``."""
    entities = list(entities)
    reps = [entity_rep(H, e, net) for e in entities]
    out = []
    for i, j in candidate_pairs(entities, window):
        a, b = entities[i], entities[j]
        dist, gap = _pair_features(a, b, lines)
        probs = pair_probabilities(reps[i], reps[j], net, dist, gap)
        for k, p in enumerate(probs.tolist()):
            if p > threshold:
                out.append(_relation(a, b, net.relation_codes[k], schema, schema_filter))
    return sorted(r for r in out if r is not None)


def _relation(a, b, code, schema, schema_filter):
    category = schema.category_of(code) if schema is not None else None
    if schema_filter and schema is not None:
        if schema.validate_relation(code, a.etype, b.etype, STRICT) is not Verdict.OK:
            return None
    return Relation(a.id, code, b.id, category) if category else Relation(a.id, code, b.id)


def relation_targets(entities, relations, relation_codes, window: int = 128):
    """Candidate pairs and their ``(n_pairs, |R| + 1)`` 0/1 targets, plus the unreachable count."""
    pos = {e.id: i for i, e in enumerate(entities)}
    codes = {c: k for k, c in enumerate(relation_codes)}
    pairs = candidate_pairs(entities, window)
    row = {p: n for n, p in enumerate(pairs)}
    targets = torch.zeros(len(pairs), len(relation_codes) + 1)
    unreachable = 0
    for rel in relations:
        key = (pos[rel.source_id], pos[rel.target_id])
        if key not in row:
            unreachable += 1
            continue
        targets[row[key], codes[rel.rtype]] = 1.0
    if len(pairs):
        targets[:, -1] = (targets[:, :-1].sum(1) == 0).to(targets.dtype)
    return pairs, targets, unreachable


def relation_loss(entities, relations, H, net: RelationNet, window: int = 128, lines=None):
    """Mean BCE over all candidate ``(i, j, k)``; returns ``(loss, unreachable)``."""
    entities = list(entities)
    pairs, targets, unreachable = relation_targets(entities, relations, net.relation_codes, window)
    if not pairs:
        return H.sum() * 0.0, unreachable
    reps = torch.stack([entity_rep(H, e, net) for e in entities])
    feats = [_pair_features(entities[i], entities[j], lines) for i, j in pairs]
    dist = torch.tensor([f[0] for f in feats])
    gap = torch.tensor([f[1] for f in feats])
    idx = torch.tensor(pairs)
    s = net.scores(reps[idx[:, 0]], reps[idx[:, 1]], dist, gap)
    return nn.functional.binary_cross_entropy_with_logits(s, targets.to(s.dtype)), unreachable


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

class RelationExtractor(StageEstimator):
    """Predicts relations among the entities (with modalities) present in the input.

    ``predict`` keeps the input entities and replaces the relations.
    """

    stage = "re"

    def __init__(self, encoder="recurrent", embed_dim=32, hidden_dim=64, layers=1, heads=4,
                 dropout=0.1, vectors_path=None, min_freq=1, type_dim=16, modality_dim=8,
                 pair_hidden=64, use_distance=True, threshold=0.5, window=128, schema_filter=True,
                 epochs=200, batch_size=8, learning_rate=1e-3, weight_decay=0.01, patience=10,
                 min_epochs=20, clip_norm=5.0, dev_fraction=0.10, seed=0, dtype="float64", schema=None):
        self.encoder = encoder
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.layers = layers
        self.heads = heads
        self.dropout = dropout
        self.vectors_path = vectors_path
        self.min_freq = min_freq
        self.type_dim = type_dim
        self.modality_dim = modality_dim
        self.pair_hidden = pair_hidden
        self.use_distance = use_distance
        self.threshold = threshold
        self.window = window
        self.schema_filter = schema_filter
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
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.window < 0:
            raise ValueError("window must be non-negative")
        return RelationNet(encoder, schema.entity_types, schema.modalities,
                           [r.code for r in schema.relations], self.type_dim, self.modality_dim,
                           self.pair_hidden, self.use_distance)

    def _features(self, doc, train):
        item = self._base_features(doc)
        ents = list(doc.entities)
        lines = line_of(doc)
        codes = [r.code for r in self.schema_.relations]
        pairs, targets, unreachable = relation_targets(ents, doc.relations if train else (), codes,
                                                       self.window)
        feats = [_pair_features(ents[i], ents[j], lines) for i, j in pairs]
        item.update(spans=[e.span for e in ents], etypes=[e.etype for e in ents],
                    modalities=[e.modality for e in ents], entities=ents, pairs=pairs,
                    distance=[f[0] for f in feats], line_gap=[f[1] for f in feats],
                    unreachable=unreachable)
        if train:
            item["targets"] = targets
        return item

    def _collate_extra(self, items, batch):
        pairs, base = [], 0
        for it in items:
            pairs.extend((i + base, j + base) for i, j in it["pairs"])
            base += len(it["spans"])
        batch["pairs"] = torch.tensor(pairs, dtype=torch.long).reshape(-1, 2) if pairs else []
        batch["spans"] = [sp for it in items for sp in it["spans"]]
        batch["span_doc"] = [b for b, it in enumerate(items) for _ in it["spans"]]
        batch["etypes"] = [t for it in items for t in it["etypes"]]
        batch["modalities"] = [m for it in items for m in it["modalities"]]
        batch["distance"] = torch.tensor([d for it in items for d in it["distance"]], dtype=torch.long)
        batch["line_gap"] = torch.tensor([g for it in items for g in it["line_gap"]], dtype=torch.long)
        if "targets" in items[0]:
            dtype = next(self.network_.parameters()).dtype
            batch["targets"] = torch.cat([it["targets"] for it in items]).to(dtype)

    def _extract(self, docs) -> list:
        docs = list(docs)
        schema = self.schema_
        live = [d for d in docs if d.tokens and len(d.entities) > 1]
        items = [self._features(d, False) for d in live]
        found = {}
        for b in range(0, len(items), 16):
            chunk = items[b:b + 16]
            s = self.network_.batch_scores(self._collate(chunk))
            probs = torch.sigmoid(s[:, :-1]) if s is not None else None
            k = 0
            for it in chunk:
                rels = []
                ents = it["entities"]
                for i, j in it["pairs"]:
                    for r in (probs[k] > self.threshold).nonzero().flatten().tolist():
                        rel = _relation(ents[i], ents[j], self.network_.relation_codes[r], schema,
                                        self.schema_filter)
                        if rel is not None:
                            rels.append(rel)
                    k += 1
                found[it["doc_id"]] = rels
        return [doc.with_annotations(relations=found.get(doc.doc_id, ())) for doc in docs]

    def _predict_docs(self, docs):
        return self._extract(docs)

    def _dev_score(self, docs):
        if not docs:
            return 0.0
        with torch.no_grad():
            return eval_re(self._extract(docs), docs)[0].f1
