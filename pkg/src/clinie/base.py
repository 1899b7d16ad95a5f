"""Common machinery for the three stage estimators.

Estimators follow the scikit-learn conventions: hyperparameters are plain
constructor arguments (so ``get_params``/``set_params``/``clone`` work), and
fitted state lives in attributes with a trailing underscore. ``X`` is a list
(or :class:`~clinie.annotation_io.Corpus`) of documents; ``predict`` returns new
documents carrying the stage's annotations.
"""
from __future__ import annotations

import json
from collections import Counter
from pathlib import Path

import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import __version__
from .annotation_io import Document, as_documents
from .encoder import EncoderConfig, Vocab, build_vocab, collate_sentences, make_encoder
from .exceptions import ModelMismatchError, TrainingError
from .schema import DEFAULT_SCHEMA, Schema, parse_schema
from .training import TrainConfig, fit_network, split_dev

# Number of predict() calls per stage; lets tests assert that training a
# downstream stage never consults upstream predictions.
PREDICT_CALLS = Counter()

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


def check_documents(X, name: str = "X") -> list:
    """Validate estimator input: a sequence of :class:`Document`."""
    docs = as_documents(X)
    for i, doc in enumerate(docs):
        if not isinstance(doc, Document):
            raise TypeError(f"{name}[{i}] is {type(doc).__name__}, expected Document")
    return docs


def check_dtype(dtype: str):
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {dtype!r}")
    return _DTYPES[dtype]


class StageEstimator(BaseEstimator):
    """Shared fit/predict/save logic; subclasses supply the network and features."""

    stage = None

    # -- hooks ---------------------------------------------------------------
    def _build_network(self, encoder, schema):
        raise NotImplementedError

    def _features(self, doc, train: bool):
        raise NotImplementedError

    def _collate_extra(self, items, batch):
        pass

    def _dev_score(self, docs) -> float:
        raise NotImplementedError

    def _predict_docs(self, docs) -> list:
        raise NotImplementedError

    def _extra_state(self) -> dict:
        return {}

    def _restore_extra_state(self, state):
        pass

    # -- helpers ---------------------------------------------------------------
    @property
    def schema_(self) -> Schema:
        return self.schema if self.schema is not None else DEFAULT_SCHEMA

    def _encoder_config(self) -> EncoderConfig:
        return EncoderConfig(kind=self.encoder, embed_dim=self.embed_dim, hidden_dim=self.hidden_dim,
                             layers=self.layers, heads=self.heads, dropout=self.dropout,
                             vectors_path=self.vectors_path)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(stage=self.stage, epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                           seed=self.seed, patience=self.patience,
                           min_epochs=self.min_epochs, clip_norm=self.clip_norm,
                           dev_fraction=self.dev_fraction)

    def _token_ids(self, doc) -> list:
        return self.vocab_.encode(doc.words)

    def _base_features(self, doc) -> dict:
        return {"ids": self._token_ids(doc), "doc_id": doc.doc_id, "sentences": doc.sentences()}

    def _collate(self, items):
        batch = {"doc_ids": [it["doc_id"] for it in items],
                 "lengths": torch.tensor([len(it["ids"]) for it in items], dtype=torch.long),
                 "sentences": [it["sentences"] for it in items]}
        collate_sentences([it["ids"] for it in items], batch["sentences"], batch["doc_ids"], batch)
        self._collate_extra(items, batch)
        return batch

    def _batches(self, items, size=None):
        size = size or max(self.batch_size, 16)
        for b in range(0, len(items), size):
            yield self._collate(items[b:b + size])

    def _mean_loss(self, items) -> float:
        if not items:
            return 0.0
        total = 0.0
        for b in range(0, len(items), 32):
            chunk = items[b:b + 32]
            total += float(self.network_.loss(self._collate(chunk))) * len(chunk)
        return total / len(items)

    # -- public API ------------------------------------------------------------
    def fit(self, X, y=None, X_dev=None):
        """Train on gold-annotated documents; ``X_dev`` defaults to a patient-held-out split."""
        docs = check_documents(X)
        if X_dev is None:
            docs, dev = split_dev(docs, self.dev_fraction, self.seed)
        else:
            dev = check_documents(X_dev, "X_dev")
        docs = [d for d in docs if d.tokens]
        if not docs:
            raise TrainingError("empty training set")
        dev = [d for d in dev if d.tokens]
        dtype = check_dtype(self.dtype)
        schema = self.schema_
        torch.manual_seed(self.seed)
        self.vocab_ = build_vocab(docs, self.min_freq)
        self.encoder_config_ = self._encoder_config()
        encoder = make_encoder(self.encoder_config_, len(self.vocab_))
        self.network_ = self._build_network(encoder, schema).to(dtype)
        self.schema_fingerprint_ = schema.fingerprint
        train_items = [self._features(d, True) for d in docs]
        dev_items = [self._features(d, True) for d in dev]
        self.log_ = fit_network(
            self.network_, train_items, self._collate,
            dev_score=lambda: self._dev_score(dev) if dev else 0.0,
            config=self._train_config(),
            dev_loss=lambda: self._mean_loss(dev_items),
        )
        self.network_.eval()
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "network_")
        PREDICT_CALLS[self.stage] += 1
        docs = check_documents(X)
        self.network_.eval()
        with torch.no_grad():
            return self._predict_docs(docs)

    def score(self, X, y=None) -> float:
        """Stage micro-F1 of predictions on gold-annotated ``X`` (gold upstream input)."""
        return self._dev_score(check_documents(X))

    @property
    def best_dev_f1_(self) -> float:
        return max((e["dev_f1"] for e in self.log_ if e.get("selected")), default=0.0)

    # -- persistence -------------------------------------------------------------
    def save(self, path) -> Path:
        """Write ``config.json``, ``vocab.json``, ``schema.txt``, ``params.pt``, ``train_log.json``."""
        check_is_fitted(self, "network_")
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        params = {k: v for k, v in self.get_params().items() if k != "schema"}
        config = {
            "stage": self.stage,
            "version": __version__,
            "params": params,
            "encoder": self.encoder_config_.to_dict(),
            "schema_fingerprint": self.schema_fingerprint_,
            "extra": self._extra_state(),
        }
        (path / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True), encoding="utf-8")
        (path / "vocab.json").write_text(json.dumps(self.vocab_.to_dict()), encoding="utf-8")
        (path / "schema.txt").write_text(self.schema_.to_text(), encoding="utf-8")
        (path / "train_log.json").write_text(json.dumps(self.log_, indent=2), encoding="utf-8")
        state = {k: v for k, v in self.network_.state_dict().items()}
        torch.save(state, path / "params.pt")
        return path


def load_model(path, vectors_path: str = None):
    """Rebuild a fitted stage estimator from a checkpoint directory."""
    from .training import estimator_class

    path = Path(path)
    if not (path / "config.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    config = json.loads((path / "config.json").read_text(encoding="utf-8"))
    schema = parse_schema((path / "schema.txt").read_text(encoding="utf-8"))
    if schema.fingerprint != config["schema_fingerprint"]:
        raise ModelMismatchError(f"{path}: schema file does not match the recorded fingerprint")
    params = dict(config["params"])
    if vectors_path is not None:
        params["vectors_path"] = vectors_path
    est = estimator_class(config["stage"])(**params, schema=schema)
    est.vocab_ = Vocab.from_dict(json.loads((path / "vocab.json").read_text(encoding="utf-8")))
    enc = dict(config["encoder"])
    if vectors_path is not None:
        enc["vectors_path"] = vectors_path
    est.encoder_config_ = EncoderConfig(**enc)
    est._restore_extra_state(config.get("extra", {}))
    encoder = make_encoder(est.encoder_config_, len(est.vocab_))
    est.network_ = est._build_network(encoder, schema).to(check_dtype(est.dtype))
    state = torch.load(path / "params.pt", weights_only=True)
    est.network_.load_state_dict(state)
    est.network_.eval()
    est.schema_fingerprint_ = config["schema_fingerprint"]
    est.log_ = json.loads((path / "train_log.json").read_text(encoding="utf-8"))
    return est
