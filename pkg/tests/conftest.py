import numpy as np
import pytest

from goce.graph_builder import EdgeScorerParams, ReadoutParams
from goce.model import ModelConfig, init_params
from goce.numerics import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=12, n_classes=3, d=6, n_layers=2, n_heads=2, d_k=3, n_experts=3, k=1, d_ff=5, d_edge=4, d_readout=4, max_T=8, batch_size=4)


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg)


def make_scorer(rng, d, de=5, scale=1.0):
    return EdgeScorerParams(
        Tensor(rng.normal(0, scale, (2 * d, de))),
        Tensor(rng.normal(0, scale, de)),
        Tensor(rng.normal(0, scale, (de, 1))),
        Tensor(rng.normal(0, scale, 1)),
    )


def make_readout(rng, d, dr=5, scale=0.7):
    return ReadoutParams(
        Tensor(rng.normal(0, scale, (2 * d, dr))),
        Tensor(rng.normal(0, scale, dr)),
        Tensor(rng.normal(0, scale, (dr, d))),
        Tensor(rng.normal(0, scale, d)),
    )


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("[", 1)[1].split("]", 1)[0])):
            terminalreporter.write_line(line)
