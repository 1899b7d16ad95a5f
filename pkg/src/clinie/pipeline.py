"""The three stages chained: entities, then modalities, then relations."""
from __future__ import annotations

import json
from pathlib import Path

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import __version__
from .base import check_documents, load_model
from .exceptions import ModelMismatchError
from .modality_clf import ModalityClassifier
from .ner_crf import EntityRecognizer
from .relation_extractor import RelationExtractor

STAGE_DIRS = {"mer": "ner", "mc": "mod", "re": "rel"}


class ClinicalIEPipeline(BaseEstimator):
    """``mer``/``mc``/``re`` are keyword dicts for the stage estimators.

    Each stage trains on gold upstream annotations; ``predict`` feeds every
    stage the previous stage's output.
    """

    def __init__(self, mer=None, mc=None, re=None, schema=None):
        self.mer = mer
        self.mc = mc
        self.re = re
        self.schema = schema

    def _stage_params(self, params):
        out = dict(params or {})
        if self.schema is not None:
            out.setdefault("schema", self.schema)
        return out

    def fit(self, X, y=None, X_dev=None):
        docs = check_documents(X)
        dev = check_documents(X_dev, "X_dev") if X_dev is not None else None
        self.entity_recognizer_ = EntityRecognizer(**self._stage_params(self.mer)).fit(docs, X_dev=dev)
        self.modality_classifier_ = ModalityClassifier(**self._stage_params(self.mc)).fit(docs, X_dev=dev)
        self.relation_extractor_ = RelationExtractor(**self._stage_params(self.re)).fit(docs, X_dev=dev)
        self._check_fingerprints()
        return self

    @property
    def stages_(self) -> dict:
        return {"mer": self.entity_recognizer_, "mc": self.modality_classifier_,
                "re": self.relation_extractor_}

    @property
    def schema_fingerprint_(self) -> str:
        return self.entity_recognizer_.schema_fingerprint_

    def _check_fingerprints(self):
        prints = {s: est.schema_fingerprint_ for s, est in self.stages_.items()}
        if len(set(prints.values())) != 1:
            raise ModelMismatchError(f"stage models were trained with different schemas: {prints}")

    def predict(self, X) -> list:
        check_is_fitted(self, "relation_extractor_")
        docs = self.entity_recognizer_.predict(check_documents(X))
        docs = self.modality_classifier_.predict(docs)
        return self.relation_extractor_.predict(docs)

    def save(self, path) -> Path:
        check_is_fitted(self, "relation_extractor_")
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for stage, est in self.stages_.items():
            est.save(path / STAGE_DIRS[stage])
        meta = {"version": __version__, "schema_fingerprint": self.schema_fingerprint_,
                "stages": STAGE_DIRS}
        (path / "pipeline.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def from_stages(cls, mer, mc, re):
        pipe = cls()
        pipe.entity_recognizer_, pipe.modality_classifier_, pipe.relation_extractor_ = mer, mc, re
        pipe._check_fingerprints()
        return pipe

    @classmethod
    def load(cls, path, vectors_path: str = None):
        path = Path(path)
        ests = [load_model(path / STAGE_DIRS[s], vectors_path) for s in ("mer", "mc", "re")]
        for stage, est in zip(("mer", "mc", "re"), ests):
            if est.stage != stage:
                raise ModelMismatchError(f"{path / STAGE_DIRS[stage]} holds a {est.stage!r} model")
        pipe = cls.from_stages(*ests)
        meta_file = path / "pipeline.json"
        if meta_file.exists():
            meta = json.loads(meta_file.read_text(encoding="utf-8"))
            if meta.get("schema_fingerprint") != pipe.schema_fingerprint_:
                raise ModelMismatchError(f"{path}: stage schemas do not match pipeline.json")
        return pipe
