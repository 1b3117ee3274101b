import pytest

from cogplant import _kernels, _pykernels

KERNEL_NAMES = ("splitmix64", "to_unit", "gaussian", "gaussian_fill", "window_zscore", "place_bnb")


def _backends():
    out = [pytest.param(_pykernels, id="python")]
    core = _kernels.compiled()
    out.append(pytest.param(core, id="cython", marks=pytest.mark.skipif(core is None, reason="extension not built")))
    return out


@pytest.fixture(params=_backends())
def backend(request, monkeypatch):
    """Route every kernel call in the package through one backend."""
    for name in KERNEL_NAMES:
        monkeypatch.setattr(_kernels, name, getattr(request.param, name))
    return request.param


CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
