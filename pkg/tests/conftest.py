from fractions import Fraction

import numpy as np
import pytest

from mmtm import dataset, model, synth, train
from mmtm.expr import Constant, Leaf, Node, OPERATORS, Placeholder


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        status = "PASS" if report.passed else "FAIL"
        print(f"\n[acceptance] {name}: {status}")


def random_tree(rng: np.random.Generator, max_depth: int, n_placeholders: int = 4,
                allow_constants: bool = True):
    """Random binary expression tree of depth <= max_depth."""
    if max_depth <= 1 or rng.random() < 0.3:
        if allow_constants and rng.random() < 0.2:
            return Leaf(Constant(Fraction(int(rng.integers(1, 20)))))
        return Leaf(Placeholder(int(rng.integers(n_placeholders))))
    op = OPERATORS[int(rng.integers(4))]
    return Node(op, random_tree(rng, max_depth - 1, n_placeholders, allow_constants),
                random_tree(rng, max_depth - 1, n_placeholders, allow_constants))


def make_records(n: int, seed: int = 0):
    rows = synth.generate_raw(n, seed=seed)
    return [dataset.make_record(raw) for raw in rows]


@pytest.fixture(scope="session")
def corpus12():
    return make_records(12, seed=21)


@pytest.fixture(scope="session")
def memorized(corpus12):
    """A small model fine-tuned to memorize corpus12 (used by eval tests)."""
    vocab = dataset.build_vocab(corpus12)
    cfg = model.ModelConfig(src_vocab_size=vocab.src_size,
                            tgt_vocab_size=vocab.tgt_size,
                            d_model=32, n_heads=4, dropout=0.1, seed=9)
    plan = train.TrainPlan(pretrain_epochs=1, finetune_epochs=120,
                           finetune_lr=1e-3, batch_size=8, seed=9)
    return train.train_pipeline(corpus12, cfg, plan, vocab=vocab).trained
