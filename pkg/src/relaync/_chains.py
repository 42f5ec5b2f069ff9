"""Block assembly for distributed chains with clipped phase coordinates.

A distributed chain keeps one buffer exact (the level) and views each other
buffer through ``min(x, m - 1)``. When a clipped coordinate sits at ``m - 1``
and an outcome decrements it, the true value was either exactly ``m - 1``
(probability ``r``, move to ``m - 2``) or larger (probability ``1 - r``, stay).
Increments at ``m - 1`` stay at ``m - 1``.

Outcome enumeration is independent of the ``r`` values, so it happens once
per ``(params, arrivals, m, own)`` and every fixed-point iterate only
re-weights a flat list of transitions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np

from .exceptions import ValidationError
from .model import ArrivalRates, ProtocolParams, slot_outcomes
from .qbd import QbdBlocks

_NONE, _KEEP_R, _KEEP_1MR = 0, 1, 2


@dataclass(frozen=True)
class ChainTemplate:
    m: int
    own: int
    clipped: Tuple[int, ...]
    # transitions: (level class, from phase, own delta, to phase, prob, factor codes)
    cls: np.ndarray
    src: np.ndarray
    dlev: np.ndarray
    dst: np.ndarray
    prob: np.ndarray
    codes: np.ndarray
    # expected relay attempts / deliveries per (class, phase)
    tx: np.ndarray
    succ: np.ndarray
    # clipped coordinate values per phase, shape (phases, len(clipped))
    phase_values: np.ndarray

    @property
    def phase_count(self) -> int:
        return self.phase_values.shape[0]

    def assemble(self, r: Sequence[float]) -> QbdBlocks:
        r = np.asarray(r, dtype=float)
        if r.shape != (len(self.clipped),):
            raise ValidationError(f"expected {len(self.clipped)} conditional probabilities")
        if np.any(r < 0) or np.any(r > 1):
            raise ValidationError("conditional probabilities must lie in [0,1]")
        w = self.prob.copy()
        for j in range(len(self.clipped)):
            c = self.codes[:, j]
            w = np.where(c == _KEEP_R, w * r[j], np.where(c == _KEEP_1MR, w * (1.0 - r[j]), w))
        n = self.phase_count
        flat = np.zeros(5 * n * n)
        # slot: 0 B00, 1 B01, 2 A2(=B10), 3 A1, 4 A0
        slot = np.where(self.cls == 0, self.dlev, 3 + self.dlev)
        np.add.at(flat, slot * n * n + self.src * n + self.dst, w)
        B00, B01, A2, A1, A0 = flat.reshape(5, n, n)
        return QbdBlocks(B00=B00, B01=B01, B10=A2.copy(), A0=A0, A1=A1, A2=A2)


def _state(own: int, level: int, clipped: Tuple[int, ...], values, dims: int):
    coords = [0] * dims
    coords[own] = level
    for c, v in zip(clipped, values):
        coords[c] = v
    return coords


@lru_cache(maxsize=256)
def chain_template(params: ProtocolParams, arrivals: Optional[ArrivalRates], m: int,
                   own: int) -> ChainTemplate:
    if m < 2:
        raise ValidationError(f"phase cap m={m} must be >= 2")
    dims = 2 if arrivals is None else 4
    if not 0 <= own < dims:
        raise ValidationError(f"own coordinate {own} out of range for {dims}-coordinate state")
    clipped = tuple(c for c in range(dims) if c != own)
    phases = list(itertools.product(range(m), repeat=len(clipped)))
    index = {p: i for i, p in enumerate(phases)}
    n = len(phases)
    rows = []
    tx = np.zeros((2, n))
    succ = np.zeros((2, n))
    for level in (0, 1):
        for src, values in enumerate(phases):
            coords = _state(own, level, clipped, values, dims)
            for out in slot_outcomes(coords, params, arrivals):
                tx[level, src] += out.prob * out.tx_count
                succ[level, src] += out.prob * out.success_count
                dlev = out.delta[own]
                # per clipped coordinate: list of (new value, factor code)
                options = []
                for c, v in zip(clipped, values):
                    d = out.delta[c]
                    if d < 0 and v == m - 1:
                        options.append(((v - 1, _KEEP_R), (v, _KEEP_1MR)))
                    elif d > 0 and v == m - 1:
                        options.append(((v, _NONE),))
                    else:
                        options.append(((v + d, _NONE),))
                for combo in itertools.product(*options):
                    dst = index[tuple(v for v, _ in combo)]
                    rows.append((level, src, dlev, dst, out.prob, tuple(code for _, code in combo)))
    cls, src, dlev, dst, prob, codes = zip(*rows)
    return ChainTemplate(
        m=m, own=own, clipped=clipped,
        cls=np.array(cls), src=np.array(src), dlev=np.array(dlev), dst=np.array(dst),
        prob=np.array(prob), codes=np.array(codes, dtype=np.int8).reshape(len(rows), -1),
        tx=tx, succ=succ, phase_values=np.array(phases, dtype=int).reshape(n, -1),
    )
