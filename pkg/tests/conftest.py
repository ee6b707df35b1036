import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from salkv.attention import AttentionBatch  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_batch(rng, B=1, N=2, L=12, D=4, scale=1.5, with_v=True):
    q = rng.normal(0, scale, (B, N, L, D))
    k = rng.normal(0, scale, (B, N, L, D))
    v = rng.normal(0, 1, (B, N, L, D)) if with_v else None
    return AttentionBatch(q, k, v)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
