import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from case_dialogue.config import TrainConfig  # noqa: E402
from case_dialogue.knowledge import ConceptStore, build_vocab  # noqa: E402
from case_dialogue.model import CASEModel, featurize  # noqa: E402
from case_dialogue.toy import make_toy_cache, make_toy_concepts, make_toy_lexicon, make_toy_samples  # noqa: E402


class ToyWorld:
    def __init__(self, n=10, **cfg):
        self.samples = make_toy_samples(n)
        self.cache = make_toy_cache(self.samples)
        self.store = ConceptStore.build(make_toy_concepts(), make_toy_lexicon())
        extra = [k.split() for key in self.cache.keys() for k in self.cache.lookup(*key)]
        extra += [[c] for c in self.store.inventory()]
        self.vocab = build_vocab(self.samples, 1, extra)
        base = dict(d_model=16, num_heads=2, num_layers=1, dropout=0.0)
        base.update(cfg)
        self.cfg = TrainConfig(**base)
        self.feats = [featurize(s, self.vocab, self.cache, self.store, self.cfg) for s in self.samples]

    def model(self, **kw):
        return CASEModel(self.cfg.replace(**kw) if kw else self.cfg, len(self.vocab), len(self.vocab.labels))


@pytest.fixture(scope="session")
def toy():
    return ToyWorld()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
