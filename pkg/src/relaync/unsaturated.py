"""Four coupled distributed chains for unsaturated end nodes.

State coordinates are ``(l1, k1, k2, l2)``. Chain ``c`` keeps coordinate
``c`` exact as its level and clips the other three at ``m - 1`` (``m**3``
phases). ``r[c] = P(x_c = m-1 | x_c >= m-1)`` is produced by chain ``c`` and
consumed by the other three.

A chain that turns out unstable is treated as a saturated queue by the
others (``r = 0``: once beyond the cap it never comes back), which is what
the boundary tracer needs to keep iterating past the stability edge.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import qbd
from ._chains import chain_template
from .exceptions import InstabilityError, SaturatedRelayError, ValidationError
from .model import ArrivalRates, Mode, ProtocolParams
from .saturated import FixedPointResult, Metrics, _delay, conditional_probability

__all__ = [
    "ENDNODE1", "VBUF1", "VBUF2", "ENDNODE2", "QUEUE_NAMES",
    "UnsatChainSpec",
    "StabilityBoundary",
    "build_unsat_chain",
    "fixed_point_unsat",
    "metrics_unsat",
    "analytic_nonnc_chain",
    "is_stable",
    "stability_boundary",
]

logger = logging.getLogger(__name__)

ENDNODE1, VBUF1, VBUF2, ENDNODE2 = range(4)
QUEUE_NAMES = ("endnode1", "vbuf1", "vbuf2", "endnode2")


def _queue_index(name) -> int:
    if isinstance(name, (int, np.integer)):
        if 0 <= name < 4:
            return int(name)
    elif name in QUEUE_NAMES:
        return QUEUE_NAMES.index(name)
    raise ValidationError(f"unknown queue {name!r}; expected one of {QUEUE_NAMES}")


@dataclass(frozen=True)
class UnsatChainSpec:
    own_buffer: str
    m: int
    r_others: Tuple[float, float, float]
    params: ProtocolParams
    arrivals: ArrivalRates

    def __post_init__(self):
        _queue_index(self.own_buffer)
        if self.m < 2:
            raise ValidationError(f"invalid spec: m={self.m} must be >= 2")
        if len(self.r_others) != 3 or any(not 0.0 <= r <= 1.0 for r in self.r_others):
            raise ValidationError("invalid spec: need three conditional probabilities in [0,1]")


@dataclass
class StabilityBoundary:
    points: List[Tuple[float, float]]
    m: int
    epsilon: float
    step: float
    mode: Mode
    params: ProtocolParams
    binding: List[str] = field(default_factory=list)
    lam2_step: Optional[float] = None

    def frontier(self) -> dict:
        return {round(a, 10): b for a, b in self.points}

    def lam2_at(self, lam1: float) -> Optional[float]:
        return self.frontier().get(round(lam1, 10))


def build_unsat_chain(spec: UnsatChainSpec) -> qbd.QbdBlocks:
    """Blocks of one distributed chain; ``r_others`` follow coordinate order."""
    own = _queue_index(spec.own_buffer)
    return chain_template(spec.params, spec.arrivals, spec.m, own).assemble(spec.r_others)


def _others(r: Sequence[float], own: int):
    return [r[c] for c in range(4) if c != own]


def fixed_point_unsat(params: ProtocolParams, arrivals: ArrivalRates, m: int = 4,
                      tol: float = 1e-8, max_iter: int = 500, r_init=0.5,
                      method: str = "logred", qbd_tol: float = 1e-12) -> FixedPointResult:
    """Round-robin updates over (end node 1, vbuf 1, vbuf 2, end node 2).

    ``r_init`` may be a scalar or four values (warm start). Unstable chains are
    reported in ``result.unstable`` rather than raised.
    """
    if m < 2:
        raise ValidationError(f"m={m} must be >= 2")
    templates = [chain_template(params, arrivals, m, c) for c in range(4)]
    r = [float(r_init)] * 4 if np.isscalar(r_init) else [float(x) for x in r_init]
    sols: List[Optional[qbd.QbdSolution]] = [None] * 4
    unstable = [False] * 4
    history = []
    delta = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        delta = 0.0
        for c in range(4):
            blocks = templates[c].assemble(_others(r, c))
            try:
                sols[c] = qbd.solve(blocks, tol=qbd_tol, method=method)
                new = conditional_probability(sols[c], m)
                unstable[c] = False
            except InstabilityError:
                sols[c] = None
                new = 0.0
                unstable[c] = True
            delta = max(delta, abs(new - r[c]))
            r[c] = new
        history.append(delta)
        if delta < tol:
            break
    converged = delta < tol
    if not converged:
        logger.warning("unsaturated fixed point did not converge (delta=%.3g after %d iterations)",
                       delta, it)
    return FixedPointResult(r=tuple(r), solutions=tuple(sols), iterations=it, converged=converged,
                            final_delta=float(delta), params=params, m=m, arrivals=arrivals,
                            history=history,
                            unstable=tuple(c for c in range(4) if unstable[c]))


def analytic_nonnc_chain(params: ProtocolParams, arrivals: ArrivalRates, m: int = 4,
                         **kwargs) -> FixedPointResult:
    """Same pipeline with the relay never combining packets (single ``q``)."""
    nonnc = ProtocolParams(params.g1, params.g2, params.q, mode=Mode.NONNC)
    return fixed_point_unsat(nonnc, arrivals, m, **kwargs)


def metrics_unsat(result: FixedPointResult, coeffs=None) -> Metrics:
    """Relay metrics from the virtual-buffer chains.

    Attempts and deliveries are averaged per state from the slot semantics,
    because with unsaturated end nodes the success probabilities depend on
    whether the end nodes are empty. ``coeffs`` is accepted for signature
    symmetry with the saturated path and ignored.
    """
    if result.arrivals is None:
        raise ValidationError("metrics_unsat needs a four-chain result")
    if result.unstable:
        names = ", ".join(QUEUE_NAMES[c] for c in result.unstable)
        raise InstabilityError(f"unstable queue(s): {names}; no steady-state metrics",
                               chain=names)
    tmpl = chain_template(result.params, result.arrivals, result.m, VBUF1)
    sol = result.solutions[VBUF1]
    pi0, tail = sol.pi0, qbd.tail_mass(sol, 1)
    S = float(pi0 @ tmpl.succ[0] + tail @ tmpl.succ[1])
    P = float(pi0 @ tmpl.tx[0] + tail @ tmpl.tx[1])
    k2_nonempty = tmpl.phase_values[:, 1] > 0
    split = (float(pi0[~k2_nonempty].sum()), float(tail[~k2_nonempty].sum()),
             float(pi0[k2_nonempty].sum()), float(tail[k2_nonempty].sum()))
    N1 = qbd.expected_level(result.solutions[VBUF1])
    N2 = qbd.expected_level(result.solutions[VBUF2])
    L1 = qbd.expected_level(result.solutions[ENDNODE1])
    L2 = qbd.expected_level(result.solutions[ENDNODE2])
    N = N1 + N2
    return Metrics(S=S, P=P, N_R=N, D=_delay(N, S), occupancy_split=split,
                   provenance="analytic",
                   extra={"N1": N1, "N2": N2, "L1": L1, "L2": L2, "r": result.r,
                          "converged": result.converged, "iterations": result.iterations})


def _verdict(result: FixedPointResult, epsilon: float) -> Tuple[bool, Tuple[int, ...]]:
    saturated = tuple(c for c in range(4) if c in result.unstable or result.r[c] < epsilon)
    return (not saturated, saturated)


def is_stable(params, arrivals, m=6, epsilon=1e-3, tol=1e-6, max_iter=200, r_init=0.5):
    """``(stable, saturated queue indices, result)`` at one arrival-rate pair.

    A queue counts as saturated when its chain is not positive recurrent or
    its conditional probability has dropped below ``epsilon``.
    """
    res = fixed_point_unsat(params, arrivals, m, tol=tol, max_iter=max_iter, r_init=r_init)
    stable, sat = _verdict(res, epsilon)
    return stable, sat, res


def _grid(value, step):
    return round(value / step) * step


def _trace_one(params, lam1, m, epsilon, lam2_step, hint, tol, r_hint):
    """Largest stable ``lam2`` (multiple of ``lam2_step``) for one ``lam1``.

    Returns ``(lam2 or None, binding queues, r warm start)``; ``None`` when
    even ``lam2 = 0`` is unstable.
    """
    cache = {}
    r_warm = [r_hint]

    def check(j):
        if j not in cache:
            lam2 = j * lam2_step
            if lam2 >= 1.0:
                cache[j] = (False, (ENDNODE2,))
            else:
                ok, sat, res = is_stable(params, ArrivalRates(lam1, lam2), m, epsilon, tol,
                                         r_init=r_warm[0])
                if res.converged:
                    r_warm[0] = [max(x, 1e-3) for x in res.r]
                cache[j] = (ok, sat)
        return cache[j]

    if not check(0)[0]:
        return None, check(0)[1], r_warm[0]
    # gallop from the hint to bracket the edge
    j = max(1, int(round(hint / lam2_step))) if hint else 1
    if check(j)[0]:
        lo, width = j, 1
        hi = None
        while hi is None:
            cand = lo + width
            if cand * lam2_step >= 1.0:
                hi = cand
                break
            if check(cand)[0]:
                lo = cand
                width *= 2
            else:
                hi = cand
    else:
        hi, width = j, 1
        lo = None
        while lo is None:
            cand = max(0, hi - width)
            if check(cand)[0]:
                lo = cand
            else:
                hi = cand
                width *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if check(mid)[0]:
            lo = mid
        else:
            hi = mid
    return lo * lam2_step, check(hi)[1], r_warm[0]


def stability_boundary(params: ProtocolParams, m: int = 6, lam1_range=(0.01, None),
                       step: float = 0.001, epsilon: float = 1e-3,
                       lam2_step: Optional[float] = None, tol: float = 1e-6,
                       n_jobs: int = 1) -> StabilityBoundary:
    """Trace the (lam1, lam2) frontier of the stability region.

    For every ``lam1`` on the grid the largest stable ``lam2`` is located by
    galloping plus bisection on the ``lam2_step`` grid. Tracing stops at the
    first ``lam1`` for which end node 1 is saturated even with ``lam2 = 0``.
    """
    lam2_step = step if lam2_step is None else lam2_step
    start, stop = lam1_range
    stop = 1.0 if stop is None else stop
    n_points = int(math.floor((stop - start) / step + 1e-9)) + 1
    grid = [round(start + i * step, 12) for i in range(n_points)]
    points, binding = [], []

    def record(lam1, lam2, sat):
        names = [QUEUE_NAMES[c] for c in sat]
        if sat and all(c in (VBUF1, VBUF2) for c in sat):
            raise SaturatedRelayError(
                f"relay saturates first at lam1={lam1:.4f}, lam2~{lam2:.4f} ({', '.join(names)}); "
                "raise q, q1, q2 relative to g1, g2")
        points.append((lam1, lam2))
        binding.append("+".join(names))

    if n_jobs == 1:
        hint, r_hint = None, 0.5
        for lam1 in grid:
            lam2, sat, r_hint = _trace_one(params, lam1, m, epsilon, lam2_step, hint, tol, r_hint)
            if lam2 is None or lam2 <= 0.0:
                break
            record(lam1, lam2, sat)
            hint = lam2
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(
            delayed(_trace_one)(params, lam1, m, epsilon, lam2_step, None, tol, 0.5)
            for lam1 in grid)
        for lam1, (lam2, sat, _) in zip(grid, results):
            if lam2 is None or lam2 <= 0.0:
                break
            record(lam1, lam2, sat)
    if not points:
        raise InstabilityError(f"no stable point at lam1={start}; end node 1 saturates immediately")
    lam2s = [b for _, b in points]
    if any(b2 > b1 + 1e-12 for b1, b2 in zip(lam2s, lam2s[1:])):
        logger.warning("frontier lam2 is not nonincreasing in lam1 (mode=%s)", params.mode.value)
    return StabilityBoundary(points=points, m=m, epsilon=epsilon, step=step, mode=params.mode,
                             params=params, binding=binding, lam2_step=lam2_step)
