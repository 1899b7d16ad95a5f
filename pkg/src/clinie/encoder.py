"""Token-sequence encoders producing one hidden row per token.

Three kinds share one call signature ``encoder(ids, lengths, doc_ids)``:

``recurrent``
    word embeddings followed by a bidirectional LSTM (half the hidden size per
    direction);
``self_attention``
    word embeddings plus sinusoidal positions through a small transformer stack;
``precomputed``
    rows read from a sidecar vector file keyed by ``(doc_id, token_index)``,
    the stand-in for an external pretrained encoder.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .annotation_io import as_documents
from .exceptions import EncoderError, TrainingError
from .tokenization import tokenize  # noqa: F401  (re-exported: the pipeline's tokenizer)

PAD, UNK = "<pad>", "<unk>"
KINDS = ("recurrent", "self_attention", "precomputed")


class Vocab:
    """Dense token index; ``<pad>`` is 0 and ``<unk>`` is 1."""

    def __init__(self, tokens=(), min_freq: int = 1):
        self.min_freq = min_freq
        self.itos = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    pad_index = 0
    unk_index = 1

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, self.unk_index)

    def encode(self, words) -> list:
        return [self.stoi.get(w, self.unk_index) for w in words]

    def to_dict(self) -> dict:
        return {"min_freq": self.min_freq, "tokens": self.itos[2:]}

    @classmethod
    def from_dict(cls, data) -> "Vocab":
        return cls(data["tokens"], data.get("min_freq", 1))

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos


def build_vocab(corpus, min_freq: int = 1) -> Vocab:
    docs = as_documents(corpus)
    if not docs:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for doc in docs:
        counts.update(doc.words)
    # frequency-descending, ties alphabetical: stable across runs
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(kept, min_freq)


@dataclass
class EncoderConfig:
    kind: str = "recurrent"
    embed_dim: int = 64
    hidden_dim: int = 128
    layers: int = 1
    heads: int = 4
    dropout: float = 0.1
    vectors_path: str = None  # precomputed kind only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EncoderError(f"unknown encoder kind {self.kind!r}; expected one of {KINDS}")
        for name in ("embed_dim", "hidden_dim", "layers", "heads"):
            if int(getattr(self, name)) <= 0:
                raise EncoderError(f"{name} must be a positive integer")
        if not 0 <= self.dropout < 1:
            raise EncoderError("dropout must lie in [0, 1)")
        if self.kind == "recurrent" and self.hidden_dim % 2:
            raise EncoderError("recurrent encoder needs an even hidden_dim (half per direction)")
        if self.kind == "self_attention" and self.hidden_dim % self.heads:
            raise EncoderError("hidden_dim must be divisible by heads")
        if self.kind == "precomputed" and not self.vectors_path:
            raise EncoderError("precomputed encoder needs vectors_path")

    def to_dict(self) -> dict:
        return asdict(self)


class RecurrentEncoder(nn.Module):
    def __init__(self, vocab_size: int, config: EncoderConfig):
        super().__init__()
        self.hidden_dim = config.hidden_dim
        self.embedding = nn.Embedding(vocab_size, config.embed_dim, padding_idx=0)
        self.dropout = nn.Dropout(config.dropout)
        self.lstm = nn.LSTM(config.embed_dim, config.hidden_dim // 2, num_layers=config.layers,
                            batch_first=True, bidirectional=True,
                            dropout=config.dropout if config.layers > 1 else 0.0)
        nn.init.uniform_(self.embedding.weight, -0.1, 0.1)
        with torch.no_grad():
            self.embedding.weight[0].zero_()
        for name, param in self.lstm.named_parameters():
            if name.startswith("weight_hh"):
                for gate in param.chunk(4, 0):
                    nn.init.orthogonal_(gate)
            elif name.startswith("weight_ih"):
                nn.init.xavier_uniform_(param)
            else:
                nn.init.zeros_(param)

    def forward(self, ids, lengths, doc_ids=None, offsets=None):
        x = self.dropout(self.embedding(ids))
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=ids.shape[1])
        return self.dropout(out)


def sinusoid_positions(length: int, dim: int, dtype=torch.float64):
    pos = torch.arange(length, dtype=dtype).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=dtype) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return table


class SelfAttentionEncoder(nn.Module):
    def __init__(self, vocab_size: int, config: EncoderConfig):
        super().__init__()
        self.hidden_dim = config.hidden_dim
        self.embedding = nn.Embedding(vocab_size, config.embed_dim, padding_idx=0)
        self.project = nn.Linear(config.embed_dim, config.hidden_dim)
        layer = nn.TransformerEncoderLayer(config.hidden_dim, config.heads,
                                           dim_feedforward=2 * config.hidden_dim,
                                           dropout=config.dropout, batch_first=True)
        self.layers = nn.TransformerEncoder(layer, config.layers, enable_nested_tensor=False)
        self.dropout = nn.Dropout(config.dropout)
        nn.init.uniform_(self.embedding.weight, -0.1, 0.1)
        with torch.no_grad():
            self.embedding.weight[0].zero_()
        for name, param in self.named_parameters():
            if name.startswith("embedding"):
                continue
            if param.dim() > 1:
                nn.init.normal_(param, 0.0, 1.0 / math.sqrt(param.shape[1]))
            elif "norm" not in name:
                nn.init.zeros_(param)

    def forward(self, ids, lengths, doc_ids=None, offsets=None):
        x = self.project(self.embedding(ids))
        x = x + sinusoid_positions(ids.shape[1], self.hidden_dim, x.dtype)
        pad_mask = torch.arange(ids.shape[1]).unsqueeze(0) >= lengths.unsqueeze(1)
        out = self.layers(self.dropout(x), src_key_padding_mask=pad_mask)
        return out.masked_fill(pad_mask.unsqueeze(-1), 0.0)


def load_vectors(path) -> dict:
    """Read ``doc_id<TAB>token_index<TAB>v1 v2 ...`` into ``{doc_id: {index: array}}``."""
    table: dict = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise EncoderError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                vec = np.array([float(v) for v in parts[2].split()], dtype=np.float64)
                index = int(parts[1])
            except ValueError:
                raise EncoderError(f"{path}:{lineno}: malformed number") from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise EncoderError(f"{path}:{lineno}: vector has {len(vec)} values, expected {dim}")
            table.setdefault(parts[0], {})[index] = vec
    if dim is None:
        raise EncoderError(f"{path}: no vectors")
    return table


def write_vectors(table: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id in sorted(table):
            for index in sorted(table[doc_id]):
                values = " ".join(repr(float(v)) for v in table[doc_id][index])
                fh.write(f"{doc_id}\t{index}\t{values}\n")


class PrecomputedEncoder(nn.Module):
    """No trainable parameters; every row comes from the vector file."""

    def __init__(self, vectors):
        super().__init__()
        self.vectors = load_vectors(vectors) if isinstance(vectors, (str, Path)) else vectors
        first = next(iter(next(iter(self.vectors.values())).values()))
        self.hidden_dim = len(first)
        self.register_buffer("_dtype_probe", torch.zeros(0, dtype=torch.float64))

    def forward(self, ids, lengths, doc_ids=None, offsets=None):
        """``offsets[b]`` is the document-level index of row ``b``'s first token."""
        if doc_ids is None:
            raise EncoderError("precomputed encoder needs doc_ids")
        offsets = [0] * len(doc_ids) if offsets is None else list(offsets)
        out = torch.zeros(ids.shape[0], ids.shape[1], self.hidden_dim, dtype=self._dtype_probe.dtype)
        for row, (doc_id, n, off) in enumerate(zip(doc_ids, lengths.tolist(), offsets)):
            rows = self.vectors.get(doc_id, {})
            for t in range(n):
                if off + t not in rows:
                    raise EncoderError(
                        f"no precomputed vector for token {off + t} of document {doc_id!r}")
                out[row, t] = torch.from_numpy(rows[off + t])
        return out


def make_encoder(config: EncoderConfig, vocab_size: int) -> nn.Module:
    if config.kind == "recurrent":
        return RecurrentEncoder(vocab_size, config)
    if config.kind == "self_attention":
        return SelfAttentionEncoder(vocab_size, config)
    return PrecomputedEncoder(config.vectors_path)


def pad_batch(sequences, pad_index: int = 0):
    """``(ids, lengths)`` long tensors from a list of index lists."""
    lengths = torch.tensor([len(s) for s in sequences], dtype=torch.long)
    ids = torch.full((len(sequences), int(lengths.max()) if len(sequences) else 0), pad_index,
                     dtype=torch.long)
    for i, seq in enumerate(sequences):
        ids[i, : len(seq)] = torch.as_tensor(seq, dtype=torch.long)
    return ids, lengths


def encode_sentences(encoder: nn.Module, batch):
    """Encode every sentence of a collated batch and reassemble document rows.

    ``batch`` carries ``sent_ids``/``sent_lengths`` (padded sentences),
    ``sent_doc_ids``/``sent_offsets`` and ``gather``, a ``(B, L_doc)`` index
    into the flattened sentence outputs (the last flat row is all zeros and
    serves document padding). Returns ``(sentence_rows, doc_rows)``.
    """
    out = encoder(batch["sent_ids"], batch["sent_lengths"], batch["sent_doc_ids"], batch["sent_offsets"])
    S, L, h = out.shape
    flat = torch.cat([out.reshape(S * L, h), out.new_zeros(1, h)], dim=0)
    return out, flat[batch["gather"]]


def collate_sentences(token_ids, sentences, doc_ids, batch=None) -> dict:
    """Add the sentence-level tensors used by :func:`encode_sentences` to ``batch``."""
    batch = {} if batch is None else batch
    rows, sent_doc, offsets = [], [], []
    for ids, spans, doc_id in zip(token_ids, sentences, doc_ids):
        for s, e in spans:
            rows.append(ids[s:e])
            sent_doc.append(doc_id)
            offsets.append(s)
    sent_ids, sent_lengths = pad_batch(rows)
    L = sent_ids.shape[1]
    pad_row = len(rows) * L
    doc_len = max((len(ids) for ids in token_ids), default=0)
    gather = torch.full((len(token_ids), doc_len), pad_row, dtype=torch.long)
    k = 0
    for b, spans in enumerate(sentences):
        for s, e in spans:
            gather[b, s:e] = torch.arange(k * L, k * L + (e - s))
            k += 1
    batch.update(sent_ids=sent_ids, sent_lengths=sent_lengths, sent_doc_ids=sent_doc,
                 sent_offsets=offsets, gather=gather)
    return batch


def encode(encoder: nn.Module, token_ids, doc_id: str = None, vocab_size: int = None):
    """Hidden matrix ``(n, hidden_dim)`` for one sequence, inference mode."""
    token_ids = list(token_ids)
    if not token_ids:
        raise EncoderError("cannot encode an empty sequence")
    emb = getattr(encoder, "embedding", None)
    limit = vocab_size if vocab_size is not None else (emb.num_embeddings if emb is not None else None)
    if limit is not None:
        bad = [i for i in token_ids if not 0 <= i < limit]
        if bad:
            raise EncoderError(f"token index {bad[0]} out of range for vocabulary of size {limit}")
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            ids, lengths = pad_batch([token_ids])
            return encoder(ids, lengths, [doc_id])[0]
    finally:
        encoder.train(was_training)


def parameter_gradients(loss, params) -> dict:
    """Gradients of a scalar loss for named parameters (``{name: tensor}``)."""
    params = dict(params)
    if not torch.is_tensor(loss):
        loss = torch.as_tensor(loss)
    if not torch.isfinite(loss).all():
        raise TrainingError(f"non-finite loss {loss.item()!r}")
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    if not loss.requires_grad or not trainable:
        return {k: torch.zeros_like(p) for k, p in params.items()}
    grads = torch.autograd.grad(loss, list(trainable.values()), allow_unused=True)
    out = {k: torch.zeros_like(p) for k, p in params.items()}
    for (name, p), g in zip(trainable.items(), grads):
        if g is not None:
            out[name] = g
    return out


def config_from_json(text: str) -> EncoderConfig:
    return EncoderConfig(**json.loads(text))
