import numpy as np
import pytest

from solar.linalg import make_rng


@pytest.fixture
def rng():
    return make_rng(12345)


def rel(a, b):
    """Relative Frobenius distance of ``a`` from reference ``b``."""
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


def low_rank(n, d, r, rng):
    return rng.standard_normal((n, r)) @ rng.standard_normal((r, d))


def random_orthogonal(n, rng):
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diag(R))


def conditioned_low_rank(n, d, r, rng, cond=10.0):
    """Rank-r matrix with singular values spread over [1, cond]."""
    U = np.linalg.qr(rng.standard_normal((n, r)))[0]
    V = np.linalg.qr(rng.standard_normal((d, r)))[0]
    return (U * np.geomspace(cond, 1.0, r)) @ V.T


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, text in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {text}")
