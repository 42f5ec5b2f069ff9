import numpy as np
import pytest

from relaync.qbd import QbdBlocks


def random_blocks(rng, n, up=0.2, down=0.45, n0=None):
    """Random positive-recurrent QBD: each row splits mass up/same/down."""
    def part(shape, total):
        m = rng.random(shape) + 0.05
        return m / m.sum(1, keepdims=True) * total[:, None]

    n0 = n if n0 is None else n0
    tot_up = up * (0.5 + rng.random(n))
    tot_down = down * (0.5 + rng.random(n))
    tot_down = np.maximum(tot_down, tot_up * 1.6)
    A0 = part((n, n), tot_up)
    A2 = part((n, n), tot_down)
    A1 = part((n, n), 1.0 - tot_up - tot_down)
    B10 = part((n, n0), tot_down)
    b_up = 0.3 * rng.random(n0) + 0.05
    B01 = part((n0, n), b_up)
    B00 = part((n0, n0), 1.0 - b_up)
    return QbdBlocks(B00=B00, B01=B01, B10=B10, A0=A0, A1=A1, A2=A2)


def dense_truncated(blocks, levels):
    n0, n = blocks.boundary_phase_count, blocks.phase_count
    size = n0 + levels * n
    P = np.zeros((size, size))
    P[:n0, :n0] = blocks.B00
    P[:n0, n0:n0 + n] = blocks.B01
    for L in range(1, levels + 1):
        r = n0 + (L - 1) * n
        prev = slice(0, n0) if L == 1 else slice(r - n, r)
        P[r:r + n, prev] = blocks.B10 if L == 1 else blocks.A2
        P[r:r + n, r:r + n] = blocks.A1
        if L < levels:
            P[r:r + n, r + n:r + 2 * n] = blocks.A0
        else:
            P[r:r + n, r:r + n] += blocks.A0  # reflect at the top
    return P


def dense_stationary(P):
    n = P.shape[0]
    M = (P - np.eye(n)).T
    M[-1] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    return np.linalg.solve(M, b)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def scalar_blocks():
    return QbdBlocks(B00=[[0.8]], B01=[[0.2]], B10=[[0.3]], A0=[[0.2]], A1=[[0.5]], A2=[[0.3]])


ACCEPTANCE_LINES = []


@pytest.fixture
def report(capsys):
    """Record one pass/fail line per acceptance criterion."""
    def emit(line):
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
