"""Per-slot protocol semantics of the slotted-ALOHA two-way relay.

Everything downstream (distributed chains, the truncated oracle and the
simulator tests) derives its transition probabilities from
:func:`slot_outcomes`, so the protocol rules live in exactly one place.

Coordinate order of a state is ``(k1, k2)`` when the end nodes are saturated
and ``(l1, k1, k2, l2)`` otherwise, where ``l_i`` is the backlog of end node
``i`` and ``k_i`` the occupancy of relay virtual buffer ``i`` (packets that
came from end node ``i``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional, Sequence, Tuple, Union

from .exceptions import UnsupportedModeError, ValidationError

__all__ = [
    "Mode",
    "ProtocolParams",
    "ArrivalRates",
    "CoefficientSet",
    "NetworkState",
    "SlotOutcome",
    "validate_params",
    "coefficients",
    "slot_outcomes",
]


class Mode(str, enum.Enum):
    NC = "nc"
    NONNC = "nonnc"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower().replace("-", "").replace("_", "")
        for mode in cls:
            if mode.value == text:
                return mode
        raise ValidationError(f"unknown mode {value!r}; expected 'nc' or 'nonnc'")


def _check_unit(name: str, value: float, upper_open: bool = False) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a number, got {value!r}") from None
    if upper_open:
        if not (0.0 <= value < 1.0):
            raise ValidationError(f"{name} out of [0,1)")
    elif not (0.0 <= value <= 1.0):
        raise ValidationError(f"{name} out of [0,1]")
    return value


@dataclass(frozen=True)
class ProtocolParams:
    """Transmission probabilities of the three nodes.

    ``q`` is used when both virtual buffers hold packets, ``q1``/``q2`` when
    only virtual buffer 1 (resp. 2) does. Leaving ``q1``/``q2`` unset means
    "same as ``q``"; in non-coded mode they must equal ``q``.
    """

    g1: float
    g2: float
    q: float
    q1: Optional[float] = None
    q2: Optional[float] = None
    mode: Mode = Mode.NC

    def __post_init__(self):
        mode = Mode.parse(self.mode)
        object.__setattr__(self, "mode", mode)
        for name in ("g1", "g2", "q"):
            object.__setattr__(self, name, _check_unit(name, getattr(self, name)))
        for name in ("q1", "q2"):
            value = getattr(self, name)
            value = self.q if value is None else _check_unit(name, value)
            if mode is Mode.NONNC and value != self.q:
                raise ValidationError(
                    f"{name}={value} differs from q={self.q}; non-coded mode uses a single q"
                )
            object.__setattr__(self, name, value)

    @classmethod
    def imbalanced(cls, g2: float, k: float, q: float, q1=None, q2=None, mode=Mode.NC):
        """Build parameters with ``g1 = k * g2``."""
        return cls(g1=k * g2, g2=g2, q=q, q1=q1, q2=q2, mode=mode)

    @property
    def g(self) -> Tuple[float, float]:
        return (self.g1, self.g2)

    def as_dict(self) -> dict:
        return {"mode": self.mode.value, "g1": self.g1, "g2": self.g2,
                "q": self.q, "q1": self.q1, "q2": self.q2}


@dataclass(frozen=True)
class ArrivalRates:
    """Bernoulli per-slot arrival probabilities at the two end nodes."""

    lam1: float
    lam2: float

    def __post_init__(self):
        object.__setattr__(self, "lam1", _check_unit("lam1", self.lam1, upper_open=True))
        object.__setattr__(self, "lam2", _check_unit("lam2", self.lam2, upper_open=True))


@dataclass(frozen=True)
class CoefficientSet:
    """Relay-chain transition coefficients for coded operation.

    ``lam_b*`` are receptions while both virtual buffers are nonempty,
    ``lam_r{i}{j}`` receptions into buffer ``i`` while only buffer ``j`` is
    nonempty and ``lam_e*`` receptions while both are empty.
    """

    mu: float
    mu1: float
    mu2: float
    mu11: float
    mu22: float
    lam_b1: float
    lam_b2: float
    lam_r11: float
    lam_r12: float
    lam_r21: float
    lam_r22: float
    lam_e1: float
    lam_e2: float


@dataclass(frozen=True)
class NetworkState:
    k1: int
    k2: int
    l1: Optional[int] = None
    l2: Optional[int] = None

    def __post_init__(self):
        for name in ("k1", "k2", "l1", "l2"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValidationError(f"invalid state: {name}={value} is negative")
        if (self.l1 is None) != (self.l2 is None):
            raise ValidationError("invalid state: give both end-node occupancies or neither")

    @property
    def saturated(self) -> bool:
        return self.l1 is None

    def as_tuple(self) -> Tuple[int, ...]:
        if self.saturated:
            return (self.k1, self.k2)
        return (self.l1, self.k1, self.k2, self.l2)


class SlotOutcome(NamedTuple):
    delta: Tuple[int, ...]
    prob: float
    tx_count: int
    success_count: int


def validate_params(params, arrivals=None):
    """Check ranges and normalise non-coded parameters.

    Accepts either dataclass instances or plain mappings and returns a
    ``(ProtocolParams, ArrivalRates | None)`` pair.
    """
    if isinstance(params, dict):
        params = ProtocolParams(**params)
    elif isinstance(params, ProtocolParams):
        # re-run the checks: instances built via object.__setattr__ could bypass them
        params = ProtocolParams(params.g1, params.g2, params.q, params.q1, params.q2, params.mode)
    else:
        raise ValidationError(f"cannot interpret {type(params).__name__} as ProtocolParams")
    if arrivals is not None:
        if isinstance(arrivals, dict):
            arrivals = ArrivalRates(**arrivals)
        elif isinstance(arrivals, ArrivalRates):
            arrivals = ArrivalRates(arrivals.lam1, arrivals.lam2)
        else:
            lam1, lam2 = arrivals
            arrivals = ArrivalRates(lam1, lam2)
    return params, arrivals


def coefficients(params: ProtocolParams) -> CoefficientSet:
    if params.mode is not Mode.NC:
        raise UnsupportedModeError("relay-chain coefficients are defined for coded (NC) mode only")
    g1, g2, q, q1, q2 = params.g1, params.g2, params.q, params.q1, params.q2
    return CoefficientSet(
        mu=q * (1 - g1) * (1 - g2),
        mu1=q * g1 * (1 - g2),
        mu2=q * g2 * (1 - g1),
        mu11=q1 * (1 - g2),
        mu22=q2 * (1 - g1),
        lam_b1=g1 * (1 - q) * (1 - g2),
        lam_b2=g2 * (1 - q) * (1 - g1),
        lam_r11=g1 * (1 - q1) * (1 - g2),
        lam_r12=g1 * (1 - q2) * (1 - g2),
        lam_r21=g2 * (1 - q1) * (1 - g1),
        lam_r22=g2 * (1 - q2) * (1 - g1),
        lam_e1=g1 * (1 - g2),
        lam_e2=g2 * (1 - g1),
    )


def relay_attempt_probability(params: ProtocolParams, has1: bool, has2: bool) -> float:
    if has1 and has2:
        return params.q
    if has1:
        return params.q1
    if has2:
        return params.q2
    return 0.0


def _bernoulli(p: float):
    return ((False, 1.0 - p), (True, p))


@lru_cache(maxsize=4096)
def _pattern_outcomes(pattern: Tuple[bool, ...], params: ProtocolParams,
                      arrivals: Optional[ArrivalRates]) -> Tuple[SlotOutcome, ...]:
    """Outcome distribution given only which coordinates are nonempty.

    The per-slot dynamics never look past emptiness, so every state with the
    same pattern shares one distribution.
    """
    saturated = arrivals is None
    if saturated:
        has1, has2 = pattern
        busy1 = busy2 = True
    else:
        busy1, has1, has2, busy2 = pattern

    p_relay = relay_attempt_probability(params, has1, has2)
    coded_choice = (has1 and has2)
    acc = {}

    for a1, pa1 in _bernoulli(params.g1 if busy1 else 0.0):
        for a2, pa2 in _bernoulli(params.g2 if busy2 else 0.0):
            for ar, par in _bernoulli(p_relay):
                base = pa1 * pa2 * par
                if base == 0.0:
                    continue
                if ar and coded_choice and params.mode is Mode.NONNC:
                    branches = (((True, False), 0.5), ((False, True), 0.5))
                elif ar:
                    branches = (((has1, has2), 1.0),)
                else:
                    branches = (((False, False), 1.0),)
                for (send1, send2), pb in branches:
                    # vbuf1 packets are addressed to end node 2 and vice versa
                    dk1 = -1 if (send1 and not a2) else 0
                    dk2 = -1 if (send2 and not a1) else 0
                    rx1 = a1 and not a2 and not ar
                    rx2 = a2 and not a1 and not ar
                    dk1 += int(rx1)
                    dk2 += int(rx2)
                    tx = int(ar)
                    succ = int(dk1 < 0) + int(dk2 < 0)
                    if saturated:
                        key = ((dk1, dk2), tx, succ)
                        acc[key] = acc.get(key, 0.0) + base * pb
                        continue
                    dl1 = -int(rx1)
                    dl2 = -int(rx2)
                    # late arrival: admitted after this slot's departures
                    for n1, pn1 in _bernoulli(arrivals.lam1):
                        for n2, pn2 in _bernoulli(arrivals.lam2):
                            p = base * pb * pn1 * pn2
                            if p == 0.0:
                                continue
                            key = ((dl1 + n1, dk1, dk2, dl2 + n2), tx, succ)
                            acc[key] = acc.get(key, 0.0) + p
    return tuple(SlotOutcome(delta, p, tx, succ) for (delta, tx, succ), p in acc.items())


def _as_coords(state) -> Tuple[int, ...]:
    if isinstance(state, NetworkState):
        return state.as_tuple()
    coords = tuple(int(c) for c in state)
    if any(c < 0 for c in coords):
        raise ValidationError(f"invalid state {coords}: negative occupancy")
    return coords


def slot_outcomes(state: Union[NetworkState, Sequence[int]], params: ProtocolParams,
                  arrivals: Optional[ArrivalRates] = None) -> Tuple[SlotOutcome, ...]:
    """Complete distribution of what can happen during one slot.

    Outcomes sharing the same ``(delta, tx_count, success_count)`` are merged
    and zero-probability outcomes are dropped.
    """
    coords = _as_coords(state)
    expected = 2 if arrivals is None else 4
    if len(coords) != expected:
        raise ValidationError(
            f"invalid state {coords}: expected {expected} coordinates "
            f"({'saturated' if arrivals is None else 'unsaturated'} mode)"
        )
    pattern = tuple(c > 0 for c in coords)
    return _pattern_outcomes(pattern, params, arrivals)
