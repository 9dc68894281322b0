import numpy as np
import pytest

from glat import model as M
from glat.data import SentencePair


def tiny_config(**kw) -> M.ModelConfig:
    base = dict(vocab_size=12, d_model=16, n_heads=2, d_ff=24, enc_layers=1, dec_layers=1,
                max_len=10, dropout=0.0)
    base.update(kw)
    return M.ModelConfig(**base)


@pytest.fixture
def tiny_params():
    return M.init_params(tiny_config(), seed=0)


@pytest.fixture
def pairs():
    rng = np.random.default_rng(5)
    out = []
    for _ in range(6):
        n = int(rng.integers(2, 7))
        x = rng.integers(6, 12, size=n).tolist()
        out.append(SentencePair(x, [((t - 6 + 1) % 6) + 6 for t in x]))
    return out


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
