import pytest
import torch

from avsep.synthdata import CorpusConfig, make_corpus

torch.set_num_threads(1)

TINY = CorpusConfig(categories=2, train_per_category=4, val_per_category=2, test_per_category=2)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    return make_corpus(TINY, 3, tmp_path_factory.mktemp("tiny") / "corpus")


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        terminalreporter.write_line(verdicts[number])
