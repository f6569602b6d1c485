import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, side, channels=3, height=None):
    h = height or side
    return rng.random((h, side, channels)).astype(np.float32)


@pytest.fixture
def image(rng):
    return random_image(rng, 64)


# acceptance criteria report one line each at the end of the session
ACCEPTANCE = {}


@pytest.fixture
def accept():
    def record(key, ok, detail=""):
        ACCEPTANCE[key] = (bool(ok), detail)
        print(f"ACCEPT {key}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k[1:].rstrip("abc")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
