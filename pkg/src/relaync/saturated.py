"""Relay analysis with saturated end nodes.

Two distributed chains are solved alternately: chain 1 tracks virtual buffer 1
exactly and buffer 2 clipped at ``m - 1``; chain 2 the reverse. They are
coupled through ``r_i = P(k_i = m-1 | k_i >= m-1)``, each computed from the
chain that tracks ``k_i`` exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import qbd
from ._chains import ChainTemplate, chain_template
from .exceptions import (InstabilityError, SaturatedRelayError, UndefinedDelayError,
                         UnsupportedModeError, ValidationError)
from .model import ArrivalRates, CoefficientSet, Mode, ProtocolParams, coefficients

__all__ = [
    "DistributedChainSpec",
    "FixedPointResult",
    "Metrics",
    "build_distributed_chain",
    "conditional_probability",
    "fixed_point",
    "metrics",
]

logger = logging.getLogger(__name__)

VBUF1, VBUF2 = 0, 1


@dataclass(frozen=True)
class DistributedChainSpec:
    """Chain tracking ``own_buffer`` (0 or 1) with the other buffer clipped."""

    own_buffer: int
    m: int
    r_other: float
    params: ProtocolParams

    def __post_init__(self):
        if self.own_buffer not in (VBUF1, VBUF2):
            raise ValidationError("own_buffer must be 0 (virtual buffer 1) or 1 (virtual buffer 2)")
        if self.m < 2:
            raise ValidationError(f"invalid spec: m={self.m} must be >= 2")
        if not 0.0 <= self.r_other <= 1.0:
            raise ValidationError(f"invalid spec: r_other={self.r_other} outside [0,1]")

    @property
    def coefficients(self) -> CoefficientSet:
        return coefficients(self.params)


@dataclass
class FixedPointResult:
    """Converged coupling probabilities and the per-chain QBD solutions.

    ``r[i]`` belongs to the buffer tracked exactly by ``solutions[i]``.
    """

    r: Tuple[float, ...]
    solutions: Tuple[qbd.QbdSolution, ...]
    iterations: int
    converged: bool
    final_delta: float
    params: ProtocolParams
    m: int
    arrivals: Optional[ArrivalRates] = None
    history: List[float] = field(default_factory=list)
    unstable: Tuple[int, ...] = ()

    @property
    def r1(self) -> float:
        return self.r[0]

    @property
    def r2(self) -> float:
        return self.r[1]

    @property
    def sol1(self):
        return self.solutions[0]

    @property
    def sol2(self):
        return self.solutions[1]


@dataclass(frozen=True)
class Metrics:
    S: float
    P: float
    N_R: float
    D: float
    occupancy_split: Tuple[float, float, float, float]
    provenance: str = "analytic"
    extra: dict = field(default_factory=dict, compare=False)

    def as_dict(self) -> dict:
        return {"S": self.S, "P": self.P, "N_R": self.N_R, "D": self.D}


def build_distributed_chain(spec: DistributedChainSpec) -> qbd.QbdBlocks:
    tmpl = chain_template(spec.params, None, spec.m, spec.own_buffer)
    return tmpl.assemble([spec.r_other])


def conditional_probability(sol: qbd.QbdSolution, m: int) -> float:
    """``P(level = m-1 | level >= m-1)``; 1 when that tail carries no mass."""
    if m < 2:
        raise ValidationError("m must be >= 2")
    v = sol.pi1 @ np.linalg.matrix_power(sol.R, m - 2)
    s = v.sum()
    if not s > 1e-300:
        return 1.0
    v = v / s
    tail = float(v @ sol.fundamental.sum(1))
    if not tail > 0:
        return 1.0
    return float(min(1.0, max(0.0, 1.0 / tail)))


def phase_masses(sol: qbd.QbdSolution) -> Tuple[np.ndarray, np.ndarray]:
    """(level-0 phase masses, phase masses summed over levels >= 1)."""
    return sol.pi0, qbd.tail_mass(sol, 1)


def _idle_solution(tmpl: ChainTemplate) -> qbd.QbdSolution:
    """Chain that never leaves the all-empty state it starts in."""
    n = tmpl.phase_count
    pi0 = np.zeros(n)
    pi0[0] = 1.0
    return qbd.QbdSolution(pi0=pi0, pi1=np.zeros(n), R=np.zeros((n, n)), residual=0.0,
                           iterations=0)


def _solve_chain(tmpl: ChainTemplate, r, tol, method) -> qbd.QbdSolution:
    blocks = tmpl.assemble(r)
    return qbd.solve(blocks, tol=tol, method=method)


def fixed_point(params: ProtocolParams, m: int = 4, tol: float = 1e-8, max_iter: int = 500,
                r_init: float = 0.5, qbd_tol: float = 1e-12, method: str = "linear"
                ) -> FixedPointResult:
    """Alternate the two chains until ``r1`` and ``r2`` stop moving."""
    if params.mode is not Mode.NC:
        raise UnsupportedModeError("saturated analysis is defined for coded (NC) mode only")
    if m < 2:
        raise ValidationError(f"m={m} must be >= 2")
    t1 = chain_template(params, None, m, VBUF1)
    t2 = chain_template(params, None, m, VBUF2)
    if params.g1 == 0 and params.g2 == 0:
        # nothing ever reaches the relay: started empty, it stays empty
        return FixedPointResult(r=(1.0, 1.0), solutions=(_idle_solution(t1), _idle_solution(t2)),
                                iterations=0, converged=True, final_delta=0.0, params=params,
                                m=m)
    r1 = r2 = float(r_init)
    history = []
    sol1 = sol2 = None
    delta = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        try:
            sol1 = _solve_chain(t1, [r2], qbd_tol, method)
        except InstabilityError as exc:
            raise SaturatedRelayError(f"virtual buffer 1 chain is unstable: {exc}",
                                      R=exc.R, spectral_radius=exc.spectral_radius,
                                      chain="vbuf1") from exc
        r1_new = conditional_probability(sol1, m)
        try:
            sol2 = _solve_chain(t2, [r1_new], qbd_tol, method)
        except InstabilityError as exc:
            raise SaturatedRelayError(f"virtual buffer 2 chain is unstable: {exc}",
                                      R=exc.R, spectral_radius=exc.spectral_radius,
                                      chain="vbuf2") from exc
        r2_new = conditional_probability(sol2, m)
        delta = max(abs(r1_new - r1), abs(r2_new - r2))
        history.append(delta)
        r1, r2 = r1_new, r2_new
        if delta < tol:
            break
    converged = delta < tol
    if not converged:
        logger.warning("saturated fixed point did not converge (delta=%.3g after %d iterations)",
                       delta, it)
    return FixedPointResult(r=(r1, r2), solutions=(sol1, sol2), iterations=it,
                            converged=converged, final_delta=float(delta), params=params, m=m,
                            history=history)


def occupancy_split(result: FixedPointResult) -> Tuple[float, float, float, float]:
    """(both empty, only 1, only 2, both nonempty) read from chain 1."""
    pi0, tail = phase_masses(result.sol1)
    return (float(pi0[0]), float(tail[0]), float(pi0[1:].sum()), float(tail[1:].sum()))


def occupancy_split_from_chain2(result: FixedPointResult) -> Tuple[float, float, float, float]:
    pi0, tail = phase_masses(result.sol2)
    return (float(pi0[0]), float(pi0[1:].sum()), float(tail[0]), float(tail[1:].sum()))


def _delay(N, S):
    if S > 0:
        return N / S
    if N > 0:
        raise UndefinedDelayError("throughput is zero while the relay holds packets")
    return 0.0


def metrics(result: FixedPointResult, coeffs: Optional[CoefficientSet] = None) -> Metrics:
    if coeffs is None:
        coeffs = coefficients(result.params)
    p = result.params
    empty, only1, only2, both = occupancy_split(result)
    P = only1 * p.q1 + only2 * p.q2 + both * p.q
    S = only1 * coeffs.mu11 + only2 * coeffs.mu22 + both * (coeffs.mu1 + coeffs.mu2 + 2 * coeffs.mu)
    N1 = qbd.expected_level(result.sol1)
    N2 = qbd.expected_level(result.sol2)
    N = N1 + N2
    return Metrics(S=S, P=P, N_R=N, D=_delay(N, S), occupancy_split=(empty, only1, only2, both),
                   provenance="analytic",
                   extra={"N1": N1, "N2": N2, "r1": result.r1, "r2": result.r2,
                          "converged": result.converged, "iterations": result.iterations})
