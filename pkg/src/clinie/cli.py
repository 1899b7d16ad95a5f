"""Command-line entry point.

Subcommands ``ner``, ``mod`` and ``rel`` train (``--do_train``) or apply a
single stage; ``pipeline`` annotates raw reports with all three stages;
``stats``, ``generate`` and ``eval`` are corpus utilities.

Exit codes: 0 ok, 1 runtime error, 2 usage, 3 model/schema mismatch,
4 data validation failure. Results go to stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

from .exceptions import (ClinieError, CorpusMismatchError, ModelMismatchError, ParseError, SchemaError,
                         ValidationError)

logger = logging.getLogger("clinie")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_MISMATCH, EXIT_DATA = 0, 1, 2, 3, 4

STAGE_OF = {"ner": "mer", "mod": "mc", "rel": "re"}
ENCODERS = ("recurrent", "self_attention")


class UsageError(Exception):
    pass


class MissingCheckpoint(ClinieError):
    pass


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys use flag names without dashes."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _apply_config(parser, args, argv):
    """Config values become defaults, so explicit flags still win."""
    config = read_config(args.config)
    sub = parser.subcommands[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in config.items():
        action = actions.get(key)
        if action is None or key in ("help", "config", "command"):
            raise UsageError(f"unknown config key {key!r}")
        if action.nargs == 0:  # store_true / store_false
            low = value.lower()
            if low not in _TRUE | _FALSE:
                raise UsageError(f"config key {key!r} expects a boolean, got {value!r}")
            defaults[key] = (low in _TRUE) == isinstance(action, argparse._StoreTrueAction)
        elif action.nargs in ("+", "*"):
            defaults[key] = [action.type(v) if action.type else v for v in value.split()]
        else:
            defaults[key] = value  # argparse applies ``type`` to string defaults
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _model_flags(p, stage):
    p.add_argument("--pretrained_model", default="recurrent",
                   help="encoder kind (recurrent, self_attention) or a precomputed vector file")
    p.add_argument("--saved_model", help="checkpoint directory (written by --do_train, read otherwise)")
    p.add_argument("--train_file", help="annotated training corpus")
    p.add_argument("--dev_file", help="annotated dev corpus")
    p.add_argument("--test_file", nargs="+", help="input corpus or reports")
    p.add_argument("--test_out", help="output XML path")
    p.add_argument("--do_train", action="store_true", help="train instead of (before) testing")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk", help="training profile")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch_size", type=int)
    p.add_argument("--learning_rate", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embed_dim", type=int)
    p.add_argument("--hidden_dim", type=int)
    p.add_argument("--dtype", choices=("float64", "float32"))
    p.add_argument("--schema", help="schema definition file (default: built-in)")
    if stage in ("re", None):
        p.add_argument("--threshold", type=float, help="relation decoding threshold")
        p.add_argument("--window", type=int, help="candidate window in tokens")
        p.add_argument("--no_schema_filter", action="store_true", help="keep signature-violating relations")
    if stage in ("mer", None):
        p.add_argument("--no_crf", action="store_true", help="per-token softmax instead of a CRF")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clinie", description="Clinical report information extraction.")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = sub.choices
    for name, stage, desc in (("ner", "mer", "entity recognition"), ("mod", "mc", "modality classification"),
                              ("rel", "re", "relation extraction")):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", help="key=value file; command-line flags override it")
        _model_flags(p, stage)
    p = sub.add_parser("pipeline", help="annotate raw reports with all three stages")
    p.add_argument("--config")
    _model_flags(p, None)
    p.add_argument("--ner_model", help="entity checkpoint (overrides --saved_model/ner)")
    p.add_argument("--mod_model", help="modality checkpoint (overrides --saved_model/mod)")
    p.add_argument("--rel_model", help="relation checkpoint (overrides --saved_model/rel)")

    p = sub.add_parser("stats", help="relation, entity and modality counts")
    p.add_argument("files", nargs="+")
    p.add_argument("--format", choices=("text", "tsv", "json"), default="text")
    p.add_argument("--lenient", action="store_true", help="tolerate and report format problems")
    p.add_argument("--schema")

    p = sub.add_parser("generate", help="write a synthetic annotated corpus")
    p.add_argument("--config")
    p.add_argument("--out", help="corpus XML path")
    p.add_argument("--ledger", help="ledger JSON path (default: OUT.ledger.json)")
    p.add_argument("--n_documents", type=int, default=500)
    p.add_argument("--patients", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="score predictions against gold, or cross-validate on a corpus")
    p.add_argument("--config")
    p.add_argument("--pred", nargs="+", help="predicted corpus")
    p.add_argument("--gold", nargs="+", help="gold corpus")
    p.add_argument("--cross_validate", nargs="+", metavar="CORPUS", help="run patient-level CV")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--window", type=int, default=128, help="candidate window used for the unreachable count")
    p.add_argument("--format", choices=("text", "tsv", "json"), default="text")
    p.add_argument("--schema")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _schema(args):
    from .schema import DEFAULT_SCHEMA, load_schema

    return load_schema(args.schema) if getattr(args, "schema", None) else DEFAULT_SCHEMA


def _read(paths, schema, mode="strict"):
    from .annotation_io import read_corpus

    for p in paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")
    return read_corpus(paths, schema, mode)


def _read_raw(paths, schema):
    """Reports to annotate: ``<doc>`` corpora or bare (possibly annotated) reports lose their
    markup; any other file is taken verbatim as one report named by its stem."""
    from .annotation_io import Document, parse_corpus

    docs = []
    for p in paths:
        path = Path(p)
        if not path.is_file():
            raise FileNotFoundError(f"input file not found: {p}")
        text = path.read_text(encoding="utf-8")
        if re.search(r"<doc[\s>]", text):
            docs.extend(d.plain() for d in parse_corpus(text, schema, "lenient", path.stem).documents)
        else:
            docs.append(Document(path.stem, text))
    return docs


def _stage_params(args, stage) -> dict:
    from .training import PROFILES

    params = dict(PROFILES[args.profile])
    kind = args.pretrained_model
    if kind in ENCODERS:
        params["encoder"] = kind
    else:
        if not Path(kind).is_file():
            raise UsageError(f"--pretrained_model: {kind!r} is neither an encoder kind {ENCODERS} nor a file")
        params.update(encoder="precomputed", vectors_path=kind)
    for key in ("epochs", "batch_size", "learning_rate", "patience", "seed", "embed_dim", "hidden_dim", "dtype"):
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    if stage == "re":
        for key in ("threshold", "window"):
            if getattr(args, key, None) is not None:
                params[key] = getattr(args, key)
        params["schema_filter"] = not args.no_schema_filter
    if stage == "mer":
        params["use_crf"] = not args.no_crf
    if args.schema:
        params["schema"] = _schema(args)
    return params


def _load_stage(path, stage, args):
    from .base import load_model

    vectors = None if args.pretrained_model in ENCODERS else args.pretrained_model
    if not (Path(path) / "config.json").is_file():
        raise MissingCheckpoint(f"no checkpoint at {path}")
    est = load_model(path, vectors)
    if est.stage != stage:
        raise ModelMismatchError(f"{path} holds a {est.stage!r} model, expected {stage!r}")
    if args.schema and _schema(args).fingerprint != est.schema_fingerprint_:
        raise ModelMismatchError(f"{path} was trained with a different schema")
    return est


def _require(args, names, mode):
    missing = [f"--{n}" for n in names if not getattr(args, n, None)]
    if missing:
        raise UsageError(f"{mode} requires {', '.join(missing)}")


def _stage_input(doc, stage):
    """Gold upstream annotations stay; this stage's own output is removed."""
    if stage == "mer":
        return doc.plain()
    return doc.with_annotations(relations=())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_stage(args, out):
    from .annotation_io import write_corpus
    from .evaluation import eval_mc, eval_mer, eval_re
    from .training import estimator_class

    stage = STAGE_OF[args.command]
    schema = _schema(args)
    if args.do_train:
        _require(args, ("train_file", "dev_file", "saved_model"), "--do_train")
        params = _stage_params(args, stage)
        train, dev = _read([args.train_file], schema), _read([args.dev_file], schema)
        logger.info("training %s on %d documents (dev %d)", stage, len(train), len(dev))
        est = estimator_class(stage)(**params).fit(train, X_dev=dev)
        est.save(args.saved_model)
        print(f"saved\t{args.saved_model}\tdev_f1\t{est.best_dev_f1_:.6f}", file=out)
        if not args.test_file:
            return EXIT_OK
    else:
        _require(args, ("saved_model", "test_file", "test_out"), "test mode")
        est = _load_stage(args.saved_model, stage, args)
    if args.test_file and not args.test_out:
        raise UsageError("--test_file requires --test_out")
    gold = _read(args.test_file, schema)
    pred = est.predict([_stage_input(d, stage) for d in gold])
    write_corpus(pred, args.test_out, est.schema_)
    score = {"mer": eval_mer, "mc": eval_mc, "re": lambda p, g: eval_re(p, g)[0]}[stage](pred, gold)
    print(f"{stage}\tprecision\t{score.precision:.6f}\trecall\t{score.recall:.6f}\tf1\t{score.f1:.6f}",
          file=out)
    return EXIT_OK


def cmd_pipeline(args, out):
    from .annotation_io import serialize_corpus
    from .pipeline import STAGE_DIRS, ClinicalIEPipeline

    schema = _schema(args)
    if args.do_train:
        _require(args, ("train_file", "dev_file", "saved_model"), "--do_train")
        train, dev = _read([args.train_file], schema), _read([args.dev_file], schema)
        pipe = ClinicalIEPipeline(mer=_stage_params(args, "mer"), mc=_stage_params(args, "mc"),
                                  re=_stage_params(args, "re"))
        pipe.fit(train, X_dev=dev)
        pipe.save(args.saved_model)
        print(f"saved\t{args.saved_model}", file=out)
        if not args.test_file:
            return EXIT_OK
    paths = {"mer": args.ner_model, "mc": args.mod_model, "re": args.rel_model}
    if args.saved_model:
        paths = {s: p or str(Path(args.saved_model) / STAGE_DIRS[s]) for s, p in paths.items()}
    if not all(paths.values()) or not args.test_file or not args.test_out:
        raise UsageError("pipeline requires --test_file, --test_out and --saved_model "
                         "(or all of --ner_model, --mod_model, --rel_model)")
    stages = [_load_stage(paths[s], s, args) for s in ("mer", "mc", "re")]
    pipe = ClinicalIEPipeline.from_stages(*stages)
    docs = _read_raw(args.test_file, schema)
    pred = pipe.predict(docs)
    text = serialize_corpus(pred, pipe.entity_recognizer_.schema_)
    Path(args.test_out).write_text(text, encoding="utf-8")
    logger.info("annotated %d reports -> %s", len(pred), args.test_out)
    return EXIT_OK


def cmd_stats(args, out):
    from .annotation_io import corpus_stats

    schema = _schema(args)
    corpus = _read(args.files, schema, "lenient" if args.lenient else "strict")
    stats = corpus_stats(corpus, schema)
    text = {"text": stats.to_text, "tsv": stats.to_tsv, "json": stats.to_json}[args.format]()
    out.write(text if text.endswith("\n") else text + "\n")
    return EXIT_OK


def cmd_generate(args, out):
    from .synth_corpus import GenConfig, generate, write_generated

    _require(args, ("out",), "generate")
    corpus, ledger = generate(GenConfig(n_documents=args.n_documents, patients=args.patients, seed=args.seed))
    ledger_path = write_generated(corpus, ledger, args.out, args.ledger)
    print(f"documents\t{ledger.n_documents}\tpatients\t{ledger.n_patients}\t"
          f"relations\t{sum(ledger.relations.values())}\tledger\t{ledger_path}", file=out)
    return EXIT_OK


def cmd_eval(args, out):
    from .evaluation import evaluate
    from .relation_extractor import count_unreachable
    from .training import PROFILES, cross_validate

    schema = _schema(args)
    if args.cross_validate:
        if args.pred or args.gold:
            raise UsageError("--cross_validate cannot be combined with --pred/--gold")
        corpus = _read(args.cross_validate, schema)
        params = dict(PROFILES[args.profile], seed=args.seed, window=args.window)
        if args.epochs is not None:
            params["epochs"] = args.epochs
        if args.schema:
            params["schema"] = schema
        stage_params = {"all": {k: v for k, v in params.items() if k != "window"},
                        "re": {"window": args.window}}
        result = cross_validate(corpus, args.folds, args.seed, stage_params,
                                progress=lambda i, r: logger.info("fold %d: re f1 %.4f", i, r.re.f1))
        report = result.report
        text = {"text": report.to_text, "tsv": None, "json": lambda: _json(report.to_dict())}[args.format]
        if text is None:
            raise UsageError("--format tsv is not available with --cross_validate")
        out.write(text())
        return EXIT_OK
    _require(args, ("pred", "gold"), "eval")
    pred, gold = _read(args.pred, schema), _read(args.gold, schema)
    report = evaluate(pred, gold, count_unreachable(gold.documents, args.window), args.window,
                      schema.relation_codes)
    text = {"text": lambda: report.to_text(schema), "tsv": report.to_tsv, "json": report.to_json}[args.format]()
    out.write(text if text.endswith("\n") else text + "\n")
    return EXIT_OK


def _json(data) -> str:
    import json

    return json.dumps(data, indent=2, sort_keys=True) + "\n"


COMMANDS = {"ner": cmd_stage, "mod": cmd_stage, "rel": cmd_stage, "pipeline": cmd_pipeline,
            "stats": cmd_stats, "generate": cmd_generate, "eval": cmd_eval}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        if getattr(args, "config", None):
            args = _apply_config(parser, args, argv)
        import torch

        torch.set_num_threads(1)
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    except ModelMismatchError as exc:
        print(f"model mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ParseError, ValidationError, CorpusMismatchError, SchemaError, UnicodeDecodeError,
            FileNotFoundError) as exc:
        print(f"invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ClinieError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
