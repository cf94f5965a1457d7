import numpy as np
import pytest

from xtra.masking import BlockLayout
from xtra.model import ModelConfig, XTRAModel, init_parameters


def tiny_config(**overrides) -> ModelConfig:
    """8x8 px, p=2, k=2 -> 16 tokens in 4 blocks."""
    layout = overrides.pop("layout", None) or BlockLayout(8, 8, channels=3, patch=2, block=2)
    kw = dict(enc_width=16, enc_depth=1, enc_heads=2, dec_width=8, dec_depth=1, dec_heads=2)
    kw.update(overrides)
    return ModelConfig(layout, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    cfg = tiny_config()
    return XTRAModel(cfg), init_parameters(cfg, seed=0)


# acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
