import math
import random
import statistics

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cogplant import _kernels, _pykernels

MASK = (1 << 64) - 1


def ref_splitmix(state):
    state = (state + 0x9E3779B97F4A7C15) & MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return state, z ^ (z >> 31)


def test_seed_zero_reference(backend):
    state, out = backend.splitmix64(0)
    assert out == 0xE220A8397B1DCDAF == ref_splitmix(0)[1]
    assert backend.splitmix64(state)[1] == 0x6E789E6AA1B965F4


@settings(max_examples=300)
@given(st.integers(0, MASK))
def test_recurrence(seed):
    expect = ref_splitmix(seed)
    assert _pykernels.splitmix64(seed) == expect
    core = _kernels.compiled()
    if core is not None:
        assert core.splitmix64(seed) == expect


def test_seeds_differ(backend):
    assert backend.splitmix64(1)[1] != backend.splitmix64(2)[1]


def test_box_muller(backend):
    s1, a = ref_splitmix(42)
    _, b = ref_splitmix(s1)
    u1 = 1.0 - (a >> 11) * 2.0 ** -53
    u2 = (b >> 11) * 2.0 ** -53
    expect = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
    state, g = backend.gaussian(42)
    assert g == expect
    assert backend.gaussian_fill(42, 3)[1][0] == g


def test_gaussian_moments(backend):
    _, xs = backend.gaussian_fill(7, 20_000)
    assert abs(statistics.fmean(xs)) < 0.03
    assert abs(statistics.pstdev(xs) - 1.0) < 0.03


@pytest.mark.skipif(_kernels.compiled() is None, reason="extension not built")
def test_backends_bit_identical():
    core = _kernels.compiled()
    assert core.gaussian_fill(123, 5000) == _pykernels.gaussian_fill(123, 5000)
    rng = random.Random(1)
    for _ in range(500):
        w = [rng.uniform(-1e3, 1e3) for _ in range(rng.randint(2, 40))]
        x = rng.uniform(-2e3, 2e3)
        assert core.window_zscore(w, x, 1e-6) == _pykernels.window_zscore(w, x, 1e-6)
    for _ in range(100):
        n = rng.randint(0, 14)
        args = ([rng.uniform(0, 3) for _ in range(n)], [rng.uniform(0, 3) for _ in range(n)],
                [rng.choice([0.0, 10.0]) for _ in range(n)], [rng.choice([0.0, 10.0, 100.0]) for _ in range(n)],
                rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 20), rng.uniform(0, 20))
        assert core.place_bnb(*args) == _pykernels.place_bnb(*args)


def test_backend_selection():
    assert _kernels.BACKEND in ("cython", "python")
    assert (_kernels.BACKEND == "cython") == (_kernels.compiled() is not None and _kernels.window_zscore
                                              is _kernels.compiled().window_zscore)


@settings(max_examples=300)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50), st.floats(-1e6, 1e6))
def test_zscore_vs_statistics(window, x):
    for impl in filter(None, (_pykernels, _kernels.compiled())):
        mu, s, z = impl.window_zscore(window, x, 1e-6)
        assert mu == pytest.approx(statistics.fmean(window), rel=1e-12, abs=1e-9)
        assert s == pytest.approx(statistics.stdev(window), rel=1e-9, abs=1e-6)
        assert math.isfinite(z)


def test_zscore_floor(backend):
    mu, s, z = backend.window_zscore([5.0, 5.0, 5.0], 5.5, 0.1)
    assert (mu, s, z) == (5.0, 0.0, 5.0)


def test_place_empty(backend):
    assert backend.place_bnb([], [], [], [], 0, 0, 0, 0) == (0.0, [])
