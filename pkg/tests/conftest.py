"""Pin numeric libraries to one thread before numpy loads anywhere.

Reduction order inside threaded BLAS kernels varies with thread count, which
would break the bit-level reproducibility the determinism tests assert.

Also hosts the acceptance-verdict channel: criterion tests append their
one-line verdicts to a session fixture, and the lines are replayed in the
terminal summary so they survive output capture.
"""

import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ[var] = "1"

import pytest

_verdicts: list[str] = []


@pytest.fixture(scope="session")
def verdicts() -> list[str]:
    return _verdicts


def pytest_terminal_summary(terminalreporter, exitstatus):
    if _verdicts:
        terminalreporter.section("acceptance verdicts")
        for line in _verdicts:
            terminalreporter.line(line)
