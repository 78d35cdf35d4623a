import os

import pytest
import torch
from hypothesis import settings

torch.set_num_threads(int(os.environ.get("RFLSCM_THREADS", "1")))
settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    import re

    from acceptance_report import ATTEMPTED

    m = re.search(r"test_acceptance\.py::test_c(\d+)_", report.nodeid)
    if m and (report.when == "call" or report.failed):
        ATTEMPTED.add(int(m.group(1)))


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import ATTEMPTED, RESULTS

    if not RESULTS and not ATTEMPTED:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 13):
        if n in RESULTS:
            ok, detail = RESULTS[n]
            verdict = "PASS" if ok else "FAIL"
        elif n in ATTEMPTED:
            verdict, detail = "FAIL", "errored before reaching a verdict"
        else:
            verdict, detail = "NOT RUN", "deselected in this session"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {detail}")
