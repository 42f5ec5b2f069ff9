import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relaync import qbd
from relaync._chains import chain_template
from relaync.exceptions import SaturatedRelayError, UnsupportedModeError, ValidationError
from relaync.model import ProtocolParams, coefficients, slot_outcomes
from relaync.oracle import oracle
from relaync.qbd import QbdBlocks
from relaync.saturated import (DistributedChainSpec, build_distributed_chain,
                               conditional_probability, fixed_point, metrics, occupancy_split,
                               occupancy_split_from_chain2, phase_masses)

from conftest import random_blocks

TABLE = ProtocolParams(0.5, 0.25, 0.75, 0.45, 0.35)
WORKING = ProtocolParams.imbalanced(0.25, 2, 0.75, 0.4, 0.4)


def test_spec_validation():
    with pytest.raises(ValidationError, match="m=1"):
        DistributedChainSpec(0, 1, 0.5, TABLE)
    with pytest.raises(ValidationError, match="r_other"):
        DistributedChainSpec(0, 4, 1.5, TABLE)
    with pytest.raises(ValidationError):
        DistributedChainSpec(2, 4, 0.5, TABLE)


def test_capped_down_entry():
    m = 4
    b = build_distributed_chain(DistributedChainSpec(0, m, 0.6, TABLE))
    assert b.A2[m - 1, m - 1] == pytest.approx(0.28125 + 0.4 * 0.28125, abs=1e-15)
    assert b.A2[m - 1, m - 1] == pytest.approx(0.39375, abs=1e-15)
    c = coefficients(TABLE)
    # coded and vbuf-2 successes leave phase m-1 only with weight r
    assert b.A2[m - 1, m - 2] == pytest.approx(0.6 * c.mu, abs=1e-15)
    assert b.A1[m - 1, m - 2] == pytest.approx(0.6 * c.mu2, abs=1e-15)
    assert b.B00[m - 1, m - 2] == pytest.approx(0.6 * c.mu22, abs=1e-15)


@pytest.mark.parametrize("r", [0.0, 0.3, 1.0])
def test_down_mass_conserved_for_any_r(r):
    m = 4
    c = coefficients(TABLE)
    b = build_distributed_chain(DistributedChainSpec(0, m, r, TABLE))
    assert b.A2[m - 1].sum() == pytest.approx(c.mu1 + c.mu, abs=1e-15)
    assert b.A1[m - 1, :m - 1].sum() + b.A1[m - 1, m - 1] == pytest.approx(
        1 - c.mu1 - c.mu - c.lam_b1, abs=1e-15)


def _exact_saturated_rows(params, own, level, m):
    """Transition rows of the uncapped chain from (level, phase) for phase < m-1."""
    rows = {}
    for phase in range(m - 1):
        state = [0, 0]
        state[own], state[1 - own] = level, phase
        row = {}
        for o in slot_outcomes(tuple(state), params):
            key = (o.delta[own], phase + o.delta[1 - own])
            row[key] = row.get(key, 0.0) + o.prob
        rows[phase] = row
    return rows


@pytest.mark.parametrize("own", [0, 1])
def test_r_one_matches_uncapped_chain(own):
    m = 5
    b = build_distributed_chain(DistributedChainSpec(own, m, 1.0, TABLE))
    blocks = {-1: b.A2, 0: b.A1, 1: b.A0}
    for phase, row in _exact_saturated_rows(TABLE, own, 2, m).items():
        for (dlev, dst), prob in row.items():
            assert blocks[dlev][phase, dst] == pytest.approx(prob, abs=1e-15)
        total = sum(blocks[d][phase].sum() for d in blocks)
        assert total == pytest.approx(1.0, abs=1e-14)
    b.check()


unit = st.floats(0.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(g1=unit, g2=unit, q=unit, q1=unit, q2=unit, r=unit, own=st.sampled_from([0, 1]),
       m=st.integers(2, 5))
def test_blocks_row_stochastic(g1, g2, q, q1, q2, r, own, m):
    p = ProtocolParams(g1, g2, q, q1, q2)
    b = build_distributed_chain(DistributedChainSpec(own, m, r, p))
    assert np.allclose((b.B00 + b.B01).sum(1), 1.0, atol=1e-12, rtol=0)
    assert np.allclose((b.A0 + b.A1 + b.A2).sum(1), 1.0, atol=1e-12, rtol=0)
    assert np.allclose((b.B10 + b.A1 + b.A0).sum(1), 1.0, atol=1e-12, rtol=0)
    for blk in (b.B00, b.B01, b.B10, b.A0, b.A1, b.A2):
        assert blk.min() >= 0


def test_conditional_probability_geometric(scalar_blocks):
    sol = qbd.solve(scalar_blocks, tol=1e-15)
    assert conditional_probability(sol, 4) == pytest.approx(1 / 3, abs=1e-12)


def test_conditional_probability_empty_tail():
    b = QbdBlocks(B00=[[1.0]], B01=[[0.0]], B10=[[0.5]], A0=[[0.0]], A1=[[0.5]], A2=[[0.5]])
    assert conditional_probability(qbd.solve(b), 2) == 1.0


def test_conditional_probability_vs_direct_sum(rng):
    b = random_blocks(rng, 2)
    sol = qbd.solve(b)
    masses = [sol.level(L).sum() for L in range(1, 501)]
    for m in (2, 3, 5):
        want = masses[m - 2] / sum(masses[m - 2:])
        assert conditional_probability(sol, m) == pytest.approx(want, abs=1e-9)


def test_fixed_point_requires_nc():
    with pytest.raises(UnsupportedModeError):
        fixed_point(ProtocolParams(0.5, 0.25, 0.75, mode="nonnc"))


def test_single_queue_matches_oracle():
    p = ProtocolParams(0.5, 0.0, 0.75, 0.5, 0.4)
    res = fixed_point(p)
    got = metrics(res)
    want = oracle(p, cap=60)
    assert got.S == pytest.approx(want.S, abs=1e-6)
    assert got.P == pytest.approx(want.P, abs=1e-6)


def test_symmetric_r():
    res = fixed_point(ProtocolParams(0.3, 0.3, 0.8, 0.5, 0.5))
    assert res.converged
    assert res.r1 == pytest.approx(res.r2, abs=1e-8)


def test_working_point_converges():
    res = fixed_point(WORKING)
    assert res.converged and res.final_delta < 1e-8
    assert 0 <= res.r1 <= 1 and 0 <= res.r2 <= 1
    m = metrics(res)
    assert m.D * m.S == pytest.approx(m.N_R, rel=1e-14)
    assert 0 <= m.S <= 2 and 0 <= m.P <= 0.75
    assert sum(m.occupancy_split) == pytest.approx(1.0, abs=1e-10)


def test_iterates_settle():
    res = fixed_point(ProtocolParams.imbalanced(0.4, 2, 0.75, 0.4, 0.4), tol=1e-12)
    h = res.history
    assert res.converged
    if len(h) >= 3:
        assert h[-1] <= h[-2] <= h[-3]


def test_working_point_vs_oracle():
    got = metrics(fixed_point(WORKING))
    want = oracle(WORKING, cap=40)
    for key in ("S", "P", "N_R", "D"):
        assert getattr(got, key) == pytest.approx(getattr(want, key), rel=0.01)


def test_cross_chain_occupancy():
    for p in (WORKING, ProtocolParams.imbalanced(0.4, 2, 0.75, 0.4, 0.4), TABLE):
        res = fixed_point(p)
        a = np.array(occupancy_split(res))
        b = np.array(occupancy_split_from_chain2(res))
        assert np.max(np.abs(a - b)) < 0.005


def test_throughput_matches_state_rewards():
    res = fixed_point(WORKING)
    m = metrics(res)
    t = chain_template(WORKING, None, res.m, 0)
    pi0, tail = phase_masses(res.sol1)
    assert pi0 @ t.succ[0] + tail @ t.succ[1] == pytest.approx(m.S, abs=1e-12)
    assert pi0 @ t.tx[0] + tail @ t.tx[1] == pytest.approx(m.P, abs=1e-12)


def test_frozen_system():
    m = metrics(fixed_point(ProtocolParams(0, 0, 0, 0, 0)))
    assert m.S == 0 and m.P == 0 and m.N_R == 0 and m.D == 0


def test_silent_relay_saturates():
    with pytest.raises(SaturatedRelayError) as err:
        fixed_point(ProtocolParams(0.5, 0.25, 0.0, 0.0, 0.0))
    assert err.value.chain in ("vbuf1", "vbuf2")


def test_overloaded_relay_names_chain():
    with pytest.raises(SaturatedRelayError, match="virtual buffer"):
        fixed_point(ProtocolParams(0.5, 0.5, 0.1, 0.1, 0.1))


def test_tighter_tolerance_is_stable():
    a = metrics(fixed_point(WORKING, tol=1e-8))
    b = metrics(fixed_point(WORKING, tol=1e-9))
    for key in ("S", "P", "D"):
        assert getattr(b, key) == pytest.approx(getattr(a, key), rel=1e-3)


def test_q1_reduction_tradeoff():
    rows = []
    for q1 in (0.75, 0.55, 0.45):
        rows.append(metrics(fixed_point(ProtocolParams.imbalanced(0.25, 2, 0.75, q1, 0.75))))
    assert all(b.D >= a.D for a, b in zip(rows, rows[1:]))
    assert all(b.P <= a.P for a, b in zip(rows, rows[1:]))
