import re
from collections import defaultdict

import numpy as np
import pytest

from causal_sar.model import CausalModel
from causal_sar.nn import BackboneConfig, ConvBlock


def micro_cfg(size=8, channels=(4, 8)):
    """Two pooled blocks on 8x8 input: a 2x2 map, i.e. 4 strata."""
    return BackboneConfig(1, size, tuple(ConvBlock(c, 3, True) for c in channels))


@pytest.fixture
def micro_model():
    return CausalModel(micro_cfg(), "same", num_classes=2, seed=3, dtype=np.float64)


@pytest.fixture
def micro_batch():
    rng = np.random.default_rng(11)
    return rng.random((3, 8, 8)), np.array([0, 1, 1])


# ---------------------------------------------------------------- acceptance summary

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_criteria: dict[int, list[str]] = defaultdict(list)


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m and (report.when == "call" or report.outcome != "passed"):
        _criteria[int(m.group(1))].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        outcomes = _criteria[num]
        verdict = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {num}: {verdict} ({len(outcomes)} checks)")
