"""Stage-wise training, patient-grouped folds and training-data subsets.

Each stage is trained on gold upstream annotations; the checkpoint kept is
the one with the best dev micro-F1 (dev loss breaks ties).
"""
from __future__ import annotations

import copy
import logging
import math
import random
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import torch

from .annotation_io import Corpus, as_documents
from .exceptions import TrainingError

logger = logging.getLogger(__name__)

STAGES = ("mer", "mc", "re")

PROFILES = {
    # fine-tuning a large pretrained encoder
    "paper": {"epochs": 10, "batch_size": 16, "learning_rate": 5e-5},
    # small encoders trained from scratch
    "desk": {"epochs": 200, "batch_size": 8, "learning_rate": 1e-3},
}


@dataclass
class TrainConfig:
    stage: str = "mer"
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    patience: int = 10
    clip_norm: float = 5.0
    dev_fraction: float = 0.10
    min_epochs: int = 20  # epochs before this never count toward patience

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay non-negative")

    @classmethod
    def profile(cls, name: str, stage: str = "mer", **overrides) -> "TrainConfig":
        if name not in PROFILES:
            raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
        return cls(stage=stage, **{**PROFILES[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


def fit_network(network, train_items, collate, dev_score, config: TrainConfig, dev_loss=None):
    """Optimize ``network.loss`` over ``train_items``; restore the best dev checkpoint.

    ``dev_score()`` returns the stage micro-F1 on the dev set, ``dev_loss()``
    (optional) the tie-breaking dev loss. Returns the per-epoch log.
    """
    params = [p for p in network.parameters() if p.requires_grad]
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate,
                                  weight_decay=config.weight_decay) if params else None

    def evaluate():
        network.eval()
        with torch.no_grad():
            f1 = float(dev_score())
            loss = float(dev_loss()) if dev_loss is not None else 0.0
        return f1, loss

    f1, dloss = evaluate()
    best_key = (f1, -dloss)
    best_state = copy.deepcopy(network.state_dict())
    best_epoch = 0
    log = [{"epoch": 0, "train_loss": None, "dev_loss": dloss, "dev_f1": f1}]
    stale = 0
    n = len(train_items)
    for epoch in range(1, config.epochs + 1):
        if not n or optimizer is None:
            break
        network.train()
        order = torch.randperm(n, generator=generator).tolist()
        total, batches = 0.0, 0
        for b in range(0, n, config.batch_size):
            batch = collate([train_items[i] for i in order[b:b + config.batch_size]])
            loss = network.loss(batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            if config.clip_norm:
                torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
            optimizer.step()
            total += loss.item()
            batches += 1
        f1, dloss = evaluate()
        log.append({"epoch": epoch, "train_loss": total / max(batches, 1), "dev_loss": dloss, "dev_f1": f1})
        logger.debug("%s epoch %d loss %.4f dev_f1 %.4f", config.stage, epoch, total / max(batches, 1), f1)
        improved_f1 = f1 > best_key[0]
        if (f1, -dloss) > best_key:
            best_key, best_epoch = (f1, -dloss), epoch
            best_state = copy.deepcopy(network.state_dict())
        stale = 0 if improved_f1 or epoch <= config.min_epochs else stale + 1
        if config.patience and stale >= config.patience:
            break
    network.load_state_dict(best_state)
    network.eval()
    for entry in log:
        entry["selected"] = entry["epoch"] == best_epoch
    return log


# ---------------------------------------------------------------------------
# folds and subsets
# ---------------------------------------------------------------------------

def group_by_patient(docs) -> "OrderedDict[str, list]":
    groups = OrderedDict()
    for doc in as_documents(docs):
        groups.setdefault(doc.patient_id, []).append(doc)
    return groups


@dataclass
class FoldPlan:
    folds: list  # list of lists of doc ids
    patients: list  # list of lists of patient ids, parallel to folds
    dev_fraction: float = 0.10
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.folds)

    def split(self, corpus, i: int):
        """``(train, test)`` document lists for fold ``i``."""
        test_ids = set(self.folds[i])
        docs = as_documents(corpus)
        return [d for d in docs if d.doc_id not in test_ids], [d for d in docs if d.doc_id in test_ids]

    def sizes(self) -> list:
        return [len(f) for f in self.folds]


def make_folds(corpus, k: int = 5, seed: int = 0, dev_fraction: float = 0.10) -> FoldPlan:
    """Patient-disjoint folds balanced by document count (largest group first)."""
    if k < 2:
        raise ValueError("k must be at least 2")
    groups = group_by_patient(corpus)
    if len(groups) < k:
        raise ValueError(f"{len(groups)} patients cannot fill {k} folds")
    patients = list(groups)
    random.Random(seed).shuffle(patients)
    patients.sort(key=lambda p: -len(groups[p]))  # stable: shuffled order breaks ties
    folds = [[] for _ in range(k)]
    fold_patients = [[] for _ in range(k)]
    for p in patients:
        target = min(range(k), key=lambda i: (len(folds[i]), i))
        folds[target].extend(d.doc_id for d in groups[p])
        fold_patients[target].append(p)
    return FoldPlan(folds, fold_patients, dev_fraction, seed)


def split_dev(docs, fraction: float = 0.10, seed: int = 0):
    """Hold out whole patients totalling about ``fraction`` of the documents."""
    docs = as_documents(docs)
    groups = group_by_patient(docs)
    if len(groups) < 2 or fraction <= 0:
        return docs, []
    patients = list(groups)
    random.Random(seed).shuffle(patients)
    target = max(1, round(fraction * len(docs)))
    dev_patients, count = set(), 0
    for p in patients[:-1]:  # always leave one patient for training
        if count >= target:
            break
        dev_patients.add(p)
        count += len(groups[p])
    train = [d for d in docs if d.patient_id not in dev_patients]
    dev = [d for d in docs if d.patient_id in dev_patients]
    return train, dev


def subset_train(corpus, fraction: float, seed: int = 0, tolerance: float = 0.05):
    """Patient-grouped random subset holding about ``fraction`` of the relations.

    Patients are visited in seeded random order and kept while the relation
    count stays within ``(1 + tolerance) * target``; the walk stops once the
    count reaches ``(1 - tolerance) * target``. Document order is preserved.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    docs = as_documents(corpus)
    if fraction == 1:
        return Corpus(docs) if isinstance(corpus, Corpus) else docs
    groups = group_by_patient(docs)
    rels = {p: sum(len(d.relations) for d in g) for p, g in groups.items()}
    total = sum(rels.values())
    target = fraction * total
    lo, hi = (1 - tolerance) * target, (1 + tolerance) * target
    patients = list(groups)
    random.Random(seed).shuffle(patients)
    chosen, count = set(), 0
    for p in patients:
        if count >= lo:
            break
        if count + rels[p] <= hi:
            chosen.add(p)
            count += rels[p]
    if not chosen:  # every group overshoots: take the smallest
        p = min(patients, key=lambda q: (rels[q], patients.index(q)))
        chosen.add(p)
    kept = [d for d in docs if d.patient_id in chosen]
    return Corpus(kept) if isinstance(corpus, Corpus) else kept


# ---------------------------------------------------------------------------
# stage entry points
# ---------------------------------------------------------------------------

def estimator_class(stage: str):
    from .modality_clf import ModalityClassifier
    from .ner_crf import EntityRecognizer
    from .relation_extractor import RelationExtractor

    return {"mer": EntityRecognizer, "mc": ModalityClassifier, "re": RelationExtractor}[stage]


def train_stage(stage: str, train, dev, config: TrainConfig = None, **model_params):
    """Fit one stage on gold annotations and return the fitted estimator."""
    config = config or TrainConfig(stage=stage)
    train = as_documents(train)
    if not train:
        raise TrainingError("empty training set")
    params = {k: v for k, v in config.to_dict().items() if k != "stage"}
    est = estimator_class(stage)(**params, **model_params)
    return est.fit(train, X_dev=as_documents(dev) if dev is not None else None)


@dataclass
class CrossValResult:
    report: object
    predictions: list = field(default_factory=list)  # per fold, pipeline output documents
    models: list = field(default_factory=list)


def cross_validate(corpus, k: int = 5, seed: int = 0, stage_params: dict = None,
                   keep_models: bool = False, subset_fraction: float = None, progress=None):
    """Patient-level k-fold CV of the full pipeline with joint evaluation.

    ``stage_params`` maps ``"mer"``/``"mc"``/``"re"`` (or ``"all"``) to
    estimator keyword arguments. With ``subset_fraction`` the training part
    of every fold is reduced by :func:`subset_train` before the dev split.
    """
    from .evaluation import CrossValReport, evaluate
    from .pipeline import ClinicalIEPipeline
    from .relation_extractor import count_unreachable

    stage_params = stage_params or {}
    plan = make_folds(corpus, k, seed)
    result = CrossValResult(CrossValReport())
    for i in range(plan.k):
        train, test = plan.split(corpus, i)
        if subset_fraction is not None:
            train = subset_train(train, subset_fraction, seed + i)
        train, dev = split_dev(train, plan.dev_fraction, seed + i)
        params = {s: {**stage_params.get("all", {}), **stage_params.get(s, {})} for s in STAGES}
        pipe = ClinicalIEPipeline(mer=params["mer"], mc=params["mc"], re=params["re"])
        pipe.fit(train, X_dev=dev)
        pred = pipe.predict([d.plain() for d in test])
        window = pipe.relation_extractor_.window
        report = evaluate(pred, test, count_unreachable(test, window), window)
        result.report.folds.append(report)
        result.predictions.append(pred)
        if keep_models:
            result.models.append(pipe)
        if progress:
            progress(i, report)
    return result
