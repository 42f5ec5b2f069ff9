import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relaync.exceptions import InstabilityError, SaturatedRelayError, ValidationError
from relaync.model import ArrivalRates, ProtocolParams, slot_outcomes
from relaync.simulator import SimConfig, simulate
from relaync.unsaturated import (ENDNODE1, ENDNODE2, VBUF1, VBUF2, UnsatChainSpec,
                                 analytic_nonnc_chain, build_unsat_chain, fixed_point_unsat,
                                 is_stable, metrics_unsat, stability_boundary)

FAMILY = ProtocolParams(0.5, 0.5, 0.7, 0.4, 0.4)
LAM = ArrivalRates(0.1, 0.1)


def _phase_index(values, m):
    idx = 0
    for v in values:
        idx = idx * m + v
    return idx


def test_spec_validation():
    with pytest.raises(ValidationError, match="unknown queue"):
        UnsatChainSpec("relay", 4, (1, 1, 1), FAMILY, LAM)
    with pytest.raises(ValidationError):
        UnsatChainSpec("vbuf1", 4, (1, 1, 1.5), FAMILY, LAM)
    with pytest.raises(ValidationError):
        UnsatChainSpec("vbuf1", 1, (1, 1, 1), FAMILY, LAM)


def test_transition_entry_in_block():
    p = ProtocolParams(0.5, 0.25, 0.75, 0.45, 0.35)
    m = 5
    b = build_unsat_chain(UnsatChainSpec("vbuf1", m, (1.0, 1.0, 1.0), p, ArrivalRates(0.1, 0.2)))
    # (l1, k2, l2) = (2, 3, 1) -> (2, 3, 2) with the level k1 = 0 unchanged
    src = _phase_index((2, 3, 1), m)
    dst = _phase_index((2, 3, 2), m)
    assert b.B00[src, dst] == pytest.approx(0.09, abs=1e-14)


@pytest.mark.parametrize("own", ["endnode1", "vbuf1", "vbuf2", "endnode2"])
def test_r_one_matches_exact_chain(own):
    m = 3
    own_i = ["endnode1", "vbuf1", "vbuf2", "endnode2"].index(own)
    b = build_unsat_chain(UnsatChainSpec(own, m, (1.0, 1.0, 1.0), FAMILY, LAM))
    blocks = {-1: b.A2, 0: b.A1, 1: b.A0}
    for values in itertools.product(range(m - 1), repeat=3):
        state = list(values)
        state.insert(own_i, 2)
        src = _phase_index(values, m)
        row = np.zeros((3, m ** 3))
        for o in slot_outcomes(tuple(state), FAMILY, LAM):
            dv = [x + d for i, (x, d) in enumerate(zip(state, o.delta)) if i != own_i]
            row[o.delta[own_i] + 1, _phase_index(dv, m)] += o.prob
        for d in (-1, 0, 1):
            assert np.allclose(blocks[d][src], row[d + 1], atol=1e-15, rtol=0)


unit = st.floats(0.0, 1.0)
lam = st.floats(0.0, 0.9)


@settings(max_examples=100, deadline=None)
@given(g1=unit, g2=unit, q=unit, q1=unit, q2=unit, lam1=lam, lam2=lam,
       r=st.tuples(unit, unit, unit), own=st.sampled_from(range(4)))
def test_blocks_row_stochastic(g1, g2, q, q1, q2, lam1, lam2, r, own):
    p = ProtocolParams(g1, g2, q, q1, q2)
    names = ["endnode1", "vbuf1", "vbuf2", "endnode2"]
    b = build_unsat_chain(UnsatChainSpec(names[own], 2, r, p, ArrivalRates(lam1, lam2)))
    assert np.allclose((b.B00 + b.B01).sum(1), 1.0, atol=1e-12, rtol=0)
    assert np.allclose((b.B10 + b.A1 + b.A0).sum(1), 1.0, atol=1e-12, rtol=0)


def test_zero_arrivals():
    res = fixed_point_unsat(FAMILY, ArrivalRates(0.0, 0.0))
    assert res.converged and res.r == (1.0, 1.0, 1.0, 1.0)
    m = metrics_unsat(res)
    assert m.S == 0 and m.P == 0 and m.N_R == 0


def test_symmetry():
    res = fixed_point_unsat(FAMILY, LAM)
    assert res.converged
    assert res.r[ENDNODE1] == pytest.approx(res.r[ENDNODE2], abs=1e-7)
    assert res.r[VBUF1] == pytest.approx(res.r[VBUF2], abs=1e-7)


def test_light_traffic():
    m = metrics_unsat(fixed_point_unsat(FAMILY, ArrivalRates(1e-4, 1e-4)))
    assert m.S < 1e-3 and m.P < 1e-3
    assert np.isfinite(m.D) and m.D > 0


@pytest.mark.parametrize("arr", [(0.1, 0.1), (0.05, 0.2), (0.2, 0.03)])
def test_flow_conservation(arr):
    m = metrics_unsat(fixed_point_unsat(FAMILY, ArrivalRates(*arr)))
    assert m.S == pytest.approx(sum(arr), rel=0.02)


def test_tighter_tolerance_is_stable():
    a = metrics_unsat(fixed_point_unsat(FAMILY, LAM, tol=1e-8))
    b = metrics_unsat(fixed_point_unsat(FAMILY, LAM, tol=1e-9))
    for key in ("S", "P", "D"):
        assert getattr(b, key) == pytest.approx(getattr(a, key), rel=1e-3)


def _sim(params, arrivals, horizon=3_000_000):
    return simulate(SimConfig(params, arrivals, horizon=horizon, seed=11))


def test_family_point_vs_simulator():
    a = metrics_unsat(fixed_point_unsat(FAMILY, LAM, m=4))
    s = _sim(FAMILY, LAM)
    for key in ("S", "P", "D"):
        assert getattr(a, key) == pytest.approx(getattr(s, key), rel=0.03)


def test_nonnc_vs_simulator():
    res = analytic_nonnc_chain(FAMILY, LAM, m=4)
    assert res.params.mode.value == "nonnc"
    a = metrics_unsat(res)
    s = _sim(res.params, LAM)
    for key in ("S", "P", "D"):
        assert getattr(a, key) == pytest.approx(getattr(s, key), rel=0.03)


@pytest.mark.parametrize("lam_", [0.03, 0.06, 0.09])
def test_coding_saves_power(lam_):
    arr = ArrivalRates(lam_, lam_)
    nonnc = metrics_unsat(analytic_nonnc_chain(FAMILY, arr))
    for q1 in (0.4, 0.7):
        nc = metrics_unsat(fixed_point_unsat(ProtocolParams(0.5, 0.5, 0.7, q1, q1), arr))
        assert nc.P <= nonnc.P


def test_unstable_point_reported():
    ok, sat, res = is_stable(FAMILY, ArrivalRates(0.3, 0.3), m=4)
    assert not ok and set(sat) & {ENDNODE1, ENDNODE2}
    with pytest.raises(InstabilityError):
        metrics_unsat(res)


def test_stable_point():
    ok, sat, _ = is_stable(FAMILY, ArrivalRates(0.05, 0.05), m=4)
    assert ok and sat == ()


def test_boundary_coarse():
    b = stability_boundary(FAMILY, m=4, lam1_range=(0.05, 0.25), step=0.1, lam2_step=0.01)
    lam1 = [a for a, _ in b.points]
    lam2 = [x for _, x in b.points]
    assert lam1 == pytest.approx([0.05, 0.15, 0.25])
    assert all(y2 <= y1 for y1, y2 in zip(lam2, lam2[1:]))
    # symmetric family: (a, b) on the frontier gives (b, a) within a grid step
    assert b.lam2_at(0.15) == pytest.approx(0.14, abs=0.011)
    for lam1_, lam2_ in b.points:
        assert is_stable(FAMILY, ArrivalRates(lam1_, lam2_), m=4)[0]
        assert not is_stable(FAMILY, ArrivalRates(lam1_, lam2_ + 0.01), m=4)[0]


def test_relay_saturating_first_is_rejected():
    weak = ProtocolParams(0.5, 0.5, 0.12, 0.12, 0.12)
    with pytest.raises(SaturatedRelayError, match="relay saturates first"):
        stability_boundary(weak, m=3, lam1_range=(0.05, 0.05), step=0.1, lam2_step=0.02)
