import numpy as np
import pytest

from flexattn import kernels


def uniform(rng, *shape, dtype=np.float32):
    return rng.uniform(-1, 1, shape).astype(dtype)


def qkv(rng, B, H, Hk, L, D, kv_len=None, dtype=np.float32):
    kv_len = L if kv_len is None else kv_len
    return (uniform(rng, B, H, L, D, dtype=dtype), uniform(rng, B, Hk, kv_len, D, dtype=dtype),
            uniform(rng, B, Hk, kv_len, D, dtype=dtype))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=kernels.available())
def backend(request):
    with kernels.use_backend(request.param):
        yield request.param


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
