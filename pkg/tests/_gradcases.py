"""Random small configurations for finite-difference gradient checks."""
import numpy as np
import torch

from clinie.encoder import EncoderConfig, make_encoder, pad_batch
from clinie.modality_clf import ModalityClassifier
from clinie.ner_crf import EntityRecognizer
from clinie.relation_extractor import RelationExtractor
from clinie.synth_corpus import GenConfig, generate

_DOCS = None


def docs():
    global _DOCS
    if _DOCS is None:
        corpus, _ = generate(GenConfig(n_documents=12, patients=4, seed=11, sentences_per_doc=(2, 3)))
        _DOCS = corpus.documents
    return _DOCS


def _tiny(rng):
    kind = str(rng.choice(["recurrent", "self_attention"]))
    if kind == "recurrent":
        hidden = int(rng.choice([2, 4]))
        heads = 1
    else:
        heads = int(rng.choice([1, 2]))
        hidden = 4
    return dict(encoder=kind, embed_dim=int(rng.integers(2, 4)), hidden_dim=hidden, heads=heads,
                layers=int(rng.integers(1, 3)), dropout=0.0, dtype="float64", epochs=0,
                seed=int(rng.integers(0, 10_000)))


def encoder_case(seed):
    rng = np.random.default_rng(seed)
    p = _tiny(rng)
    cfg = EncoderConfig(kind=p["encoder"], embed_dim=p["embed_dim"], hidden_dim=p["hidden_dim"],
                        heads=p["heads"], layers=p["layers"], dropout=0.0)
    torch.manual_seed(p["seed"])
    enc = make_encoder(cfg, 7).double()
    seqs = [list(rng.integers(1, 7, int(n))) for n in rng.integers(1, 6, 2)]
    ids, lengths = pad_batch(seqs)
    weight = torch.tensor(rng.normal(size=(ids.shape[1], cfg.hidden_dim)))

    def loss():
        return (enc(ids, lengths) * weight).sum()

    return loss, dict(enc.named_parameters()), p


class _Cached(torch.nn.Module):
    """Replays one encoder output; the checked groups sit downstream of the encoder."""

    def __init__(self, encoder, batch):
        super().__init__()
        self.hidden_dim = encoder.hidden_dim
        with torch.no_grad():
            self.out = encoder(batch["sent_ids"], batch["sent_lengths"])

    def forward(self, *args):
        return self.out


def _stage_case(cls, seed, own, **extra):
    rng = np.random.default_rng(seed)
    p = {**_tiny(rng), **extra}
    picked = [docs()[i] for i in rng.choice(len(docs()), 2, replace=False)]
    est = cls(**p).fit(docs()[:6], X_dev=docs()[6:8])
    est.network_.train()
    batch = est._collate([est._features(d, True) for d in picked])
    est.network_.encoder = _Cached(est.network_.encoder, batch)
    params = {k: v for k, v in est.network_.named_parameters() if k.split(".")[0] in own}

    def loss():
        return est.network_.loss(batch)

    return loss, params, p


def ner_case(seed):
    return _stage_case(EntityRecognizer, seed, ("projection", "crf"))


def modality_case(seed):
    return _stage_case(ModalityClassifier, seed, ("type_embedding", "classifier"), type_dim=3)


def relation_case(seed):
    rng = np.random.default_rng(10_000 + seed)
    return _stage_case(RelationExtractor, seed,
                       ("type_embedding", "modality_embedding", "source", "target", "output",
                        "distance_embedding", "line_embedding"),
                       type_dim=3, modality_dim=2, pair_hidden=int(rng.choice([0, 3])))


CASES = {"encoder": encoder_case, "ner_crf": ner_case, "modality_clf": modality_case,
         "relation_extractor": relation_case}
