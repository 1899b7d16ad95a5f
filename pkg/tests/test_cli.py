import io
import json
import re

import pytest

from clinie.annotation_io import read_corpus, write_corpus
from clinie.cli import EXIT_DATA, EXIT_MISMATCH, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main, read_config
from clinie.schema import DEFAULT_SCHEMA

FAST = ["--epochs", "2", "--embed_dim", "8", "--hidden_dim", "8"]


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def files(small_corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    docs = small_corpus.documents
    paths = {"train": root / "train.xml", "dev": root / "dev.xml", "test": root / "test.xml"}
    write_corpus(docs[:25], paths["train"])
    write_corpus(docs[25:30], paths["dev"])
    write_corpus(docs[30:34], paths["test"])
    paths["root"] = root
    for cmd in ("ner", "mod", "rel"):
        code, _ = run(cmd, "--do_train", "--train_file", paths["train"], "--dev_file", paths["dev"],
                      "--saved_model", root / cmd, *FAST)
        assert code == EXIT_OK
    return paths


def test_train_log_dev_f1_reproduced(files):
    """Testing the saved model on the dev file prints the dev F1 logged for the selected epoch."""
    root = files["root"]
    log = json.loads((root / "ner" / "train_log.json").read_text())
    dev_f1 = next(e["dev_f1"] for e in log if e["selected"])
    code, out = run("ner", "--saved_model", root / "ner", "--test_file", files["dev"],
                    "--test_out", root / "dev_pred.xml")
    assert code == EXIT_OK
    assert float(out.split("\t")[-1]) == pytest.approx(dev_f1, abs=1e-6)
    assert len(read_corpus([root / "dev_pred.xml"])) == 5


@pytest.mark.parametrize("cmd", ["mod", "rel"])
def test_stage_test_mode(files, cmd):
    root = files["root"]
    code, out = run(cmd, "--saved_model", root / cmd, "--test_file", files["test"], "--test_out",
                    root / f"{cmd}.xml")
    assert code == EXIT_OK and re.match(r"(mc|re)\tprecision\t", out)


def test_pipeline_raw_and_corpus_input(files, tmp_path):
    root = files["root"]
    raw = tmp_path / "report.txt"
    raw.write_text("dzba found in the anko .\nno fesa noted .\n", encoding="utf-8")
    empty = tmp_path / "empty.txt"
    empty.write_text("", encoding="utf-8")
    out_path = tmp_path / "out.xml"
    code, _ = run("pipeline", "--ner_model", root / "ner", "--mod_model", root / "mod", "--rel_model",
                  root / "rel", "--test_file", raw, empty, files["test"], "--test_out", out_path)
    assert code == EXIT_OK
    docs = read_corpus([out_path]).documents
    assert [d.doc_id for d in docs[:2]] == ["report", "empty"]
    assert docs[1].tokens == () or len(docs[1].tokens) == 0
    assert len(docs) == 6


def test_pipeline_schema_mismatch_writes_nothing(files, tmp_path):
    root = files["root"]
    schema = tmp_path / "schema.txt"
    schema.write_text(DEFAULT_SCHEMA.to_text() + "modality hypothetical\n")
    out_path = tmp_path / "out.xml"
    code, _ = run("pipeline", "--ner_model", root / "ner", "--mod_model", root / "mod", "--rel_model",
                  root / "rel", "--test_file", files["test"], "--test_out", out_path, "--schema", schema)
    assert code == EXIT_MISMATCH and not out_path.exists()
    code, _ = run("pipeline", "--ner_model", root / "ner", "--mod_model", root / "ner", "--rel_model",
                  root / "rel", "--test_file", files["test"], "--test_out", out_path)
    assert code == EXIT_MISMATCH and not out_path.exists()


def test_exit_codes(files, tmp_path):
    root = files["root"]
    assert run()[0] == EXIT_USAGE
    assert run("ner", "--bogus")[0] == EXIT_USAGE
    assert run("ner", "--do_train", "--train_file", files["train"])[0] == EXIT_USAGE
    assert run("ner", "--saved_model", tmp_path / "none", "--test_file", files["test"],
               "--test_out", tmp_path / "x.xml")[0] == EXIT_RUNTIME
    bad = tmp_path / "bad.xml"
    bad.write_text("<doc id='a'><D>unclosed</doc>")
    assert run("stats", bad)[0] == EXIT_DATA
    assert run("stats", tmp_path / "missing.xml")[0] == EXIT_DATA
    assert run("eval", "--pred", files["dev"], "--gold", files["test"])[0] == EXIT_DATA
    assert run("eval", "--cross_validate", files["test"], "--pred", files["test"])[0] == EXIT_USAGE
    assert run("generate")[0] == EXIT_USAGE
    assert run("ner", "--pretrained_model", "no-such-kind", "--do_train", "--train_file", files["train"],
               "--dev_file", files["dev"], "--saved_model", tmp_path / "m")[0] == EXIT_USAGE


def test_config_file_and_override(files, tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text(f"# synthetic\nout = {tmp_path / 'g.xml'}\nn_documents = 7\npatients = 3\n")
    code, out = run("generate", "--config", cfg)
    assert code == EXIT_OK and out.startswith("documents\t7\tpatients\t3")
    code, out = run("generate", "--config", cfg, "--n_documents", "4")
    assert code == EXIT_OK and out.startswith("documents\t4")
    assert len(read_corpus([tmp_path / "g.xml"])) == 4
    cfg.write_text("nonsense_key = 1\n")
    assert run("generate", "--config", cfg)[0] == EXIT_USAGE
    cfg.write_text("just words\n")
    with pytest.raises(Exception):
        read_config(cfg)


def test_stats_and_eval_output(files):
    code, out = run("stats", files["train"], "--format", "json")
    data = json.loads(out)
    assert code == EXIT_OK and data["documents"] == 25
    code, out = run("stats", files["train"], "--format", "tsv")
    assert out.splitlines()[0] == "kind\tname\tcount"
    code, out = run("eval", "--pred", files["test"], "--gold", files["test"], "--format", "json")
    report = json.loads(out)
    assert code == EXIT_OK and report["mer"]["f1"] == report["re"]["f1"] == 1.0
