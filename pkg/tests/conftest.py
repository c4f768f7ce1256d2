import numpy as np
import pytest

from incdet._kernels import _pykernels

try:
    from incdet._kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None

# (criterion, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE = []


def record(criterion, passed, detail=""):
    ACCEPTANCE.append((criterion, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")


@pytest.fixture
def recorder():
    return record


BACKENDS = [pytest.param(_pykernels, id="python")]
if _ckernels is not None:
    BACKENDS.append(pytest.param(_ckernels, id="cython"))


@pytest.fixture(params=BACKENDS)
def kernels(request):
    return request.param


@pytest.fixture
def compiled():
    if _ckernels is None:
        pytest.skip("compiled extension not built")
    return _ckernels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {crit}: {detail}")
