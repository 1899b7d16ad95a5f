import pytest
import torch

torch.set_num_threads(1)

# (name, passed, detail) lines recorded by tests/test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def small_corpus():
    from clinie.synth_corpus import GenConfig, generate

    corpus, ledger = generate(GenConfig(n_documents=40, patients=8, seed=3))
    return corpus
