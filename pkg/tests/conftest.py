import numpy as np
import pytest

from qpreduce.spectral_basis import DiscretizationParams, PotentialSpec, build_basis


@pytest.fixture(scope="session")
def harmonic_basis():
    return build_basis(PotentialSpec(1.0, (), 10.0), DiscretizationParams(301, "sinc"), 40)


@pytest.fixture(scope="session")
def quartic_basis():
    return build_basis(PotentialSpec(2.0, (), 8.0), DiscretizationParams(401, "sinc"), 60)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance verdicts ---------------------------------------------------------

import time
from contextlib import contextmanager

ACCEPTANCE: dict[int, str] = {}


@contextmanager
def verdict(num: int, title: str):
    """Record a PASS/FAIL line for acceptance criterion ``num``.

    The body may fill ``info["detail"]`` with the measured numbers.
    """
    info = {"detail": ""}
    start = time.perf_counter()
    try:
        yield info
    except BaseException as err:
        msg = str(err).strip().splitlines()[0] if str(err).strip() else type(err).__name__
        extra = f"; {info['detail']}" if info["detail"] else ""
        ACCEPTANCE[num] = f"criterion {num} FAIL  {title}: {msg}{extra}"
        raise
    else:
        ACCEPTANCE[num] = f"criterion {num} PASS  {title}: {info['detail']} ({time.perf_counter() - start:.1f} s)"
    finally:
        print(ACCEPTANCE[num])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for num in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[num])
