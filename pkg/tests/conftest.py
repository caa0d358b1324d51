import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flowlab.htransform import build_h_transform  # noqa: E402
from flowlab.model import make_bundle  # noqa: E402
from flowlab.semigroup import engine_for  # noqa: E402

M1_L = [[0.5]]
M2P_L = [[-2.0, 3.0], [0.5, -2.0]]
M3_L = [[-1.0, 1.0], [1.0, -1.0]]

# filled by test_acceptance, printed at the end of the session
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def m1():
    return make_bundle(M1_L, [1.0], 2.0)


@pytest.fixture(scope="session")
def m2p():
    return make_bundle(M2P_L, [1.0, 1.0], 2.0)


@pytest.fixture(scope="session")
def m3():
    return make_bundle(M3_L, [1.0, 1.0], 1.0)


@pytest.fixture(scope="session")
def m1_h(m1):
    return build_h_transform(m1, engine_for(m1).make_excessive([1.0], 2.0))


@pytest.fixture(scope="session")
def m2p_hs(m2p):
    eng = engine_for(m2p)
    return [build_h_transform(m2p, eng.make_excessive([1.0, 1.0], 2.0)),
            build_h_transform(m2p, [1.0, 1.0])]


@pytest.fixture(scope="session")
def m3_hs(m3):
    eng = engine_for(m3)
    return [build_h_transform(m3, eng.make_excessive([1.0, 1.0], 1.0)),
            build_h_transform(m3, eng.make_excessive([1.0, 2.0], 1.0))]


def random_metzler(rng, n, growth=0.0):
    L = rng.uniform(0.0, 2.0, (n, n))
    np.fill_diagonal(L, 0.0)
    np.fill_diagonal(L, -L.sum(axis=1) + rng.uniform(-1.0, growth, n))
    return L


@pytest.fixture(scope="session")
def m5():
    rng = np.random.default_rng(5)
    L = random_metzler(rng, 5, growth=1.0)
    m = rng.uniform(0.5, 2.0, 5)
    b = make_bundle(L, m, 1.0)
    alpha = max(b.L.spectral_bound, b.form.alpha0) + 1.0
    return make_bundle(L, m, alpha)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {line}")
