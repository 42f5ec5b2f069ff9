import numpy as np
import pytest

from relaync import qbd
from relaync.exceptions import DegenerateBlocksError, InstabilityError
from relaync.qbd import QbdBlocks

from conftest import dense_stationary, dense_truncated, random_blocks


def naive_rate_matrix(b, steps=1_000_000):
    R = np.zeros_like(b.A1)
    for _ in range(steps):
        new = b.A0 + R @ b.A1 + R @ R @ b.A2
        if np.array_equal(new, R):
            break
        R = new
    return R


def test_scalar_rate_matrix(scalar_blocks):
    R, _ = qbd.solve_rate_matrix(scalar_blocks, tol=1e-14)
    assert R[0, 0] == pytest.approx(2 / 3, abs=1e-12)


def test_zero_up_blocks():
    b = QbdBlocks(B00=[[1.0]], B01=[[0.0]], B10=[[0.4]], A0=[[0.0]], A1=[[0.6]], A2=[[0.4]])
    R, it = qbd.solve_rate_matrix(b)
    assert R[0, 0] == 0.0 and it == 0
    sol = qbd.stationary(b, R)
    assert sol.pi0.sum() == pytest.approx(1.0)
    assert sol.pi1.sum() == pytest.approx(0.0, abs=1e-15)
    assert qbd.expected_level(sol) == pytest.approx(sol.pi1.sum(), abs=1e-15)


def test_zero_up_with_boundary_entry():
    # level 1 is entered from level 0 but never left upwards
    b = QbdBlocks(B00=[[0.9]], B01=[[0.1]], B10=[[0.5]], A0=[[0.0]], A1=[[0.5]], A2=[[0.5]])
    sol = qbd.solve(b)
    assert sol.pi0[0] == pytest.approx(5 / 6)
    assert sol.pi1[0] == pytest.approx(1 / 6)
    assert qbd.expected_level(sol) == pytest.approx(1 / 6)


@pytest.mark.parametrize("method", ["linear", "logred"])
def test_random_blocks_vs_naive_iteration(rng, method):
    b = random_blocks(rng, 4)
    b.check()
    R, _ = qbd.solve_rate_matrix(b, method=method)
    oracle = naive_rate_matrix(b)
    assert np.max(np.abs(R - oracle)) < 1e-8
    assert np.all(R >= 0)
    assert qbd.spectral_radius(R) < 1


def test_linear_progression_monotone_and_minimal(rng):
    b = random_blocks(rng, 3)
    inv = np.linalg.inv(np.eye(3) - b.A1)
    R = np.zeros((3, 3))
    for _ in range(200):
        new = (b.A0 + R @ R @ b.A2) @ inv
        assert np.all(new >= R - 1e-15)
        R = new
    final, _ = qbd.solve_rate_matrix(b)
    assert np.all(R <= final + 1e-9)
    assert np.all(final <= naive_rate_matrix(b) + 1e-10)


def test_scalar_stationary(scalar_blocks):
    sol = qbd.solve(scalar_blocks, tol=1e-14)
    assert sol.pi0[0] == pytest.approx(1 / 3, abs=1e-12)
    for L in range(1, 8):
        assert sol.level(L)[0] == pytest.approx((1 / 3) * (2 / 3) ** L, abs=1e-12)
    assert sol.total_mass == pytest.approx(1.0, abs=1e-10)


def test_stationary_vs_dense_truncation(rng):
    b = random_blocks(rng, 2)
    sol = qbd.solve(b)
    pi = dense_stationary(dense_truncated(b, 60))
    masses = sol.level_masses(59)
    dense = np.concatenate([[pi[:2].sum()], pi[2:].reshape(60, 2).sum(1)[:59]])
    assert np.max(np.abs(masses - dense)) < 1e-8


def test_balance_on_truncated_system(rng):
    b = random_blocks(rng, 3, n0=2)
    sol = qbd.solve(b)
    pi = np.concatenate([sol.level(L) for L in range(0, 41)])
    P = dense_truncated(b, 40)
    tail = 1 - pi.sum()
    assert np.max(np.abs(pi @ P - pi)) <= 1e-8 + tail


def test_tail_mass_scalar(scalar_blocks):
    sol = qbd.solve(scalar_blocks, tol=1e-14)
    assert qbd.tail_mass(sol, 2)[0] == pytest.approx(4 / 9, abs=1e-12)
    assert qbd.tail_mass(sol, 1).sum() == pytest.approx(1 - sol.pi0.sum(), abs=1e-12)
    assert qbd.tail_mass(sol, 0).sum() == pytest.approx(1.0, abs=1e-12)


def test_tail_mass_vs_direct_sum(rng):
    b = random_blocks(rng, 2)
    sol = qbd.solve(b)
    levels = [sol.level(L) for L in range(501)]
    prev = None
    for L in (1, 2, 5, 10):
        direct = np.sum(levels[L:], axis=0)
        got = qbd.tail_mass(sol, L)
        assert np.max(np.abs(got - direct)) < 1e-10
        if prev is not None:
            assert np.all(got <= prev + 1e-15)
        prev = got


def test_expected_level_scalar(scalar_blocks):
    sol = qbd.solve(scalar_blocks, tol=1e-14)
    assert qbd.expected_level(sol) == pytest.approx(2.0, abs=1e-10)


def test_expected_level_vs_direct_sum(rng):
    b = random_blocks(rng, 3)
    sol = qbd.solve(b)
    direct = sum(L * sol.level(L).sum() for L in range(1, 501))
    assert qbd.expected_level(sol) == pytest.approx(direct, abs=1e-9)


def test_spectral_radius():
    assert qbd.spectral_radius(np.array([[2 / 3]])) == pytest.approx(2 / 3, abs=1e-12)
    assert qbd.spectral_radius(np.zeros((3, 3))) == 0.0
    rng = np.random.default_rng(5)
    for _ in range(10):
        R = rng.random((5, 5)) * 0.3
        roots = np.roots(np.poly(R))
        assert qbd.spectral_radius(R) == pytest.approx(np.max(np.abs(roots)), abs=1e-8)


def test_spectral_radius_reducible_periodic():
    R = np.array([[0.0, 0.5, 0.0], [0.5, 0.0, 0.0], [0.0, 0.0, 0.2]])
    assert qbd.spectral_radius(R) == pytest.approx(0.5, abs=1e-10)


def test_unstable_chain_detected():
    b = QbdBlocks(B00=[[0.5]], B01=[[0.5]], B10=[[0.2]], A0=[[0.4]], A1=[[0.4]], A2=[[0.2]])
    with pytest.raises(InstabilityError):
        qbd.solve_rate_matrix(b)
    with pytest.raises(InstabilityError):
        qbd.stationary(b, np.array([[1.0]]))


def test_degenerate_blocks():
    b = QbdBlocks(B00=[[0.5]], B01=[[0.5]], B10=[[0.0]], A0=[[0.0]], A1=[[1.0]], A2=[[0.0]])
    with pytest.raises(DegenerateBlocksError):
        qbd.solve_rate_matrix(QbdBlocks(B00=[[0.5]], B01=[[0.5]], B10=[[0.0]], A0=[[1e-3]],
                                        A1=[[1.0]], A2=[[0.0]]))
    with pytest.raises(DegenerateBlocksError):
        QbdBlocks(B00=[[0.5]], B01=[[0.6]], B10=[[0.3]], A0=[[0.2]], A1=[[0.5]],
                  A2=[[0.3]]).check()
    assert b.phase_count == 1


def test_homogeneous_boundary(scalar_blocks):
    b = QbdBlocks.homogeneous(B1=[[0.8]], A0=[[0.2]], A1=[[0.5]], A2=[[0.3]])
    b.check()
    sol = qbd.solve(b, tol=1e-14)
    assert sol.pi0[0] == pytest.approx(qbd.solve(scalar_blocks, tol=1e-14).pi0[0], abs=1e-12)
