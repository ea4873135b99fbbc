import os

import numpy as np
import pytest

from mixln.data import stdlib_corpus_text
from mixln.training import encode, split_tokens


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the multi-hour toy pre-training criteria")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-hour toy pre-training runs (need --runslow)")
    config.addinivalue_line("markers", "criterion(n): acceptance criterion n; reported in the summary")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow") or os.environ.get("MIXLN_RUNSLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow suite: pass --runslow (or MIXLN_RUNSLOW=1)")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def small_corpus():
    """~400 KB of Python source bytes, split 90/10."""
    return split_tokens(encode(stdlib_corpus_text(400_000)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report ------------------------------------------------------------------
# Tests marked ``criterion(n)`` get a one-line PASS/FAIL summary at the end of the run.

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    n = marker.args[0]
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    if rep.skipped:
        status, detail = "SKIP", detail or str(rep.longrepr[-1] if isinstance(rep.longrepr, tuple) else "")
    else:
        status = "PASS" if rep.passed else "FAIL"
    prev = _CRITERIA.get(n)
    if prev is None or prev[0] == "PASS" or status == "FAIL":
        _CRITERIA[n] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}" + (f"  ({detail})" if detail else ""))
