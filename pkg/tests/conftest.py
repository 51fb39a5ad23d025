import numpy as np
import pytest

from rgbdscene.config import Variant, tiny_config
from rgbdscene.weights import reference_init


@pytest.fixture(scope="session")
def tiny():
    """Tiny 128-Multi-shaped config and its reference weights."""
    cfg = tiny_config(Variant.SWINV2_T_128_MULTI)
    return cfg, reference_init(cfg, seed=0)


@pytest.fixture(scope="session")
def tiny_stores():
    out = {}
    for v in Variant:
        cfg = tiny_config(v)
        out[v] = (cfg, reference_init(cfg, seed=0))
    return out


def rgbd(seed, h, w, batch=1):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((batch, h, w, 3)).astype(np.float32),
            rng.standard_normal((batch, h, w, 1)).astype(np.float32))


# Acceptance verdict lines, printed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
