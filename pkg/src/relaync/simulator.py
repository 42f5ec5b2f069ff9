"""Slot-level Monte Carlo simulation of the relay network.

Randomness comes from a numpy ``PCG64`` stream seeded with
``SeedSequence([seed, replication])``; each slot consumes a fixed row of
uniforms::

    col 0  end node 1 attempt        col 1  end node 2 attempt
    col 2  relay attempt             col 3  buffer choice (non-coded only)
    next   arrival at end node 1, arrival at end node 2 (unsaturated only)

so a given ``(config, seed, replication)`` reproduces bit-identical results.
The per-slot rules are the same ones :func:`relaync.model.slot_outcomes`
enumerates; ``tests/test_simulator.py`` checks the two against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from numba import njit
from scipy import stats

from .exceptions import ValidationError
from .model import ArrivalRates, Mode, ProtocolParams

__all__ = ["SimConfig", "SimMetrics", "simulate", "replicate", "drift_test", "DriftVerdict",
           "seed_sequence"]

# per-batch accumulator columns
(B_SLOTS, B_ATTEMPTS, B_DELIVERIES, B_OCC_RELAY, B_DELAY_SUM, B_DELAY_N,
 B_L1, B_K1, B_K2, B_L2) = range(10)
N_BATCH_COLS = 10

# whole-run counters
(C_ATTEMPTS, C_CODED, C_COLLISIONS, C_DELIV1, C_DELIV2, C_RECV1, C_RECV2,
 C_ARR1, C_ARR2) = range(9)
# measured slots and relay attempts split by which virtual buffers are nonempty
C_STATE_SLOTS = 9  # +0 only vbuf1, +1 only vbuf2, +2 both
C_STATE_ATTEMPTS = 12
N_COUNTERS = 15


@dataclass(frozen=True)
class SimConfig:
    params: ProtocolParams
    arrivals: Optional[ArrivalRates] = None
    horizon: int = 1_000_000
    warmup: Optional[int] = None
    seed: int = 0
    replications: int = 1
    batches: int = 50
    chunk: int = 1 << 18

    def __post_init__(self):
        if self.warmup is None:
            object.__setattr__(self, "warmup", self.horizon // 10)
        if not self.horizon > self.warmup >= 0:
            raise ValidationError("need horizon > warmup >= 0")
        if self.replications < 1:
            raise ValidationError("replications must be >= 1")
        if self.batches < 2 or self.batches > self.horizon - self.warmup:
            raise ValidationError("batches must be in [2, horizon - warmup]")

    @property
    def saturated(self) -> bool:
        return self.arrivals is None

    @property
    def measured_slots(self) -> int:
        return self.horizon - self.warmup


@dataclass
class SimMetrics:
    S: float
    P: float
    N_R: float
    D: float
    ci_S: float
    ci_P: float
    ci_N_R: float
    ci_D: float
    slots: int
    counters: dict
    occupancy: Tuple[float, float, float, float]
    drift: Tuple[float, float, float, float]
    final_state: Tuple[int, int, int, int]
    replications: List["SimMetrics"] = field(default_factory=list, repr=False)
    provenance: str = "sim"
    replication: int = 0

    @property
    def deliveries(self) -> int:
        return self.counters["deliveries"]

    def as_dict(self) -> dict:
        return {"S": self.S, "P": self.P, "N_R": self.N_R, "D": self.D}


def seed_sequence(seed: int, replication: int = 0) -> np.random.SeedSequence:
    """Documented stream derivation: replication ``r`` of base seed ``s``."""
    return np.random.SeedSequence([int(seed) & (2**64 - 1), int(replication)])


@njit(cache=True)
def _run_chunk(u, t0, warmup, batch_len, nb, g1, g2, q, q1, q2, lam1, lam2, saturated, nonnc,
               state, buf1, buf2, ring, batch, counters):
    # state = [l1, k1, k2, l2]; ring = [head1, head2] (count is k1/k2)
    cap1 = buf1.shape[0]
    cap2 = buf2.shape[0]
    col_arr = 4 if nonnc else 3
    for i in range(u.shape[0]):
        t = t0 + i
        l1 = state[0]
        k1 = state[1]
        k2 = state[2]
        l2 = state[3]
        measured = t >= warmup
        b = 0
        if measured:
            b = (t - warmup) // batch_len
            if b >= nb:
                b = nb - 1
            batch[b, B_SLOTS] += 1
            batch[b, B_OCC_RELAY] += k1 + k2
            batch[b, B_L1] += l1
            batch[b, B_K1] += k1
            batch[b, B_K2] += k2
            batch[b, B_L2] += l2
        a1 = (saturated or l1 > 0) and u[i, 0] < g1
        a2 = (saturated or l2 > 0) and u[i, 1] < g2
        if k1 > 0 and k2 > 0:
            pr = q
        elif k1 > 0:
            pr = q1
        elif k2 > 0:
            pr = q2
        else:
            pr = 0.0
        ar = u[i, 2] < pr
        if measured and pr > 0.0:
            which = 2 if (k1 > 0 and k2 > 0) else (0 if k1 > 0 else 1)
            counters[C_STATE_SLOTS + which] += 1
            if ar:
                counters[C_STATE_ATTEMPTS + which] += 1
        if a1 and a2:
            counters[C_COLLISIONS] += 1
        if ar:
            counters[C_ATTEMPTS] += 1
            if measured:
                batch[b, B_ATTEMPTS] += 1
            send1 = k1 > 0
            send2 = k2 > 0
            if send1 and send2:
                if nonnc:
                    if u[i, 3] < 0.5:
                        send2 = False
                    else:
                        send1 = False
                else:
                    counters[C_CODED] += 1
            # virtual buffer 1 holds packets for end node 2, and vice versa
            if send1 and not a2:
                h = ring[0]
                if measured:
                    batch[b, B_DELIVERIES] += 1
                    batch[b, B_DELAY_SUM] += t - buf1[h]
                    batch[b, B_DELAY_N] += 1
                ring[0] = (h + 1) % cap1
                k1 -= 1
                counters[C_DELIV1] += 1
            if send2 and not a1:
                h = ring[1]
                if measured:
                    batch[b, B_DELIVERIES] += 1
                    batch[b, B_DELAY_SUM] += t - buf2[h]
                    batch[b, B_DELAY_N] += 1
                ring[1] = (h + 1) % cap2
                k2 -= 1
                counters[C_DELIV2] += 1
        else:
            if a1 and not a2:
                buf1[(ring[0] + k1) % cap1] = t
                k1 += 1
                counters[C_RECV1] += 1
                if not saturated:
                    l1 -= 1
            elif a2 and not a1:
                buf2[(ring[1] + k2) % cap2] = t
                k2 += 1
                counters[C_RECV2] += 1
                if not saturated:
                    l2 -= 1
        if not saturated:
            if u[i, col_arr] < lam1:
                l1 += 1
                counters[C_ARR1] += 1
            if u[i, col_arr + 1] < lam2:
                l2 += 1
                counters[C_ARR2] += 1
        state[0] = l1
        state[1] = k1
        state[2] = k2
        state[3] = l2


def _grow(buf, head, count, need):
    if need <= buf.shape[0]:
        return buf, head
    new = np.zeros(max(need, 2 * buf.shape[0]), dtype=np.int64)
    idx = (head + np.arange(count)) % buf.shape[0]
    new[:count] = buf[idx]
    return new, 0


def _half_width(values, weights=None):
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 2:
        return float("nan")
    return float(stats.t.ppf(0.975, n - 1) * values.std(ddof=1) / math.sqrt(n))


def _slopes(batch):
    slots = batch[:, B_SLOTS]
    ok = slots > 0
    if ok.sum() < 2:
        return (0.0, 0.0, 0.0, 0.0)
    mid = np.cumsum(slots) - slots / 2.0
    out = []
    for col in (B_L1, B_K1, B_K2, B_L2):
        y = batch[ok, col] / slots[ok]
        out.append(float(np.polyfit(mid[ok], y, 1)[0]))
    return tuple(out)


def simulate(cfg: SimConfig, replication: int = 0) -> SimMetrics:
    """One replication; confidence intervals come from batch means."""
    p = cfg.params
    nonnc = p.mode is Mode.NONNC
    ncols = 3 + int(nonnc) + (0 if cfg.saturated else 2)
    lam1 = lam2 = 0.0
    if not cfg.saturated:
        lam1, lam2 = cfg.arrivals.lam1, cfg.arrivals.lam2
    rng = np.random.Generator(np.random.PCG64(seed_sequence(cfg.seed, replication)))
    nb = cfg.batches
    batch_len = cfg.measured_slots // nb
    batch = np.zeros((nb, N_BATCH_COLS), dtype=np.int64)
    counters = np.zeros(N_COUNTERS, dtype=np.int64)
    state = np.zeros(4, dtype=np.int64)
    ring = np.zeros(2, dtype=np.int64)
    buf1 = np.zeros(1024, dtype=np.int64)
    buf2 = np.zeros(1024, dtype=np.int64)
    t = 0
    while t < cfg.horizon:
        n = min(cfg.chunk, cfg.horizon - t)
        buf1, ring[0] = _grow(buf1, ring[0], state[1], state[1] + n)
        buf2, ring[1] = _grow(buf2, ring[1], state[2], state[2] + n)
        u = rng.random((n, ncols))
        _run_chunk(u, t, cfg.warmup, batch_len, nb, p.g1, p.g2, p.q, p.q1, p.q2, lam1, lam2,
                   cfg.saturated, nonnc, state, buf1, buf2, ring, batch, counters)
        t += n

    measured = cfg.measured_slots
    tot = batch.sum(0)
    S = tot[B_DELIVERIES] / measured
    P = tot[B_ATTEMPTS] / measured
    N = tot[B_OCC_RELAY] / measured
    D = tot[B_DELAY_SUM] / tot[B_DELAY_N] if tot[B_DELAY_N] else float("nan")
    slots_b = batch[:, B_SLOTS].astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        d_b = batch[:, B_DELAY_SUM] / batch[:, B_DELAY_N]
    counters_d = {
        "slots": measured,
        "relay_attempts": int(counters[C_ATTEMPTS]),
        "coded_attempts": int(counters[C_CODED]),
        "uplink_collisions": int(counters[C_COLLISIONS]),
        "deliveries": int(tot[B_DELIVERIES]),
        "delivered1": int(counters[C_DELIV1]),
        "delivered2": int(counters[C_DELIV2]),
        "received1": int(counters[C_RECV1]),
        "received2": int(counters[C_RECV2]),
        "arrivals1": int(counters[C_ARR1]),
        "arrivals2": int(counters[C_ARR2]),
        "delay_sum": int(tot[B_DELAY_SUM]),
        "delay_count": int(tot[B_DELAY_N]),
    }
    for j, name in enumerate(("only1", "only2", "both")):
        counters_d[f"slots_{name}"] = int(counters[C_STATE_SLOTS + j])
        counters_d[f"attempts_{name}"] = int(counters[C_STATE_ATTEMPTS + j])
    occupancy = tuple(float(tot[c] / measured) for c in (B_L1, B_K1, B_K2, B_L2))
    return SimMetrics(
        S=float(S), P=float(P), N_R=float(N), D=float(D),
        ci_S=_half_width(batch[:, B_DELIVERIES] / slots_b),
        ci_P=_half_width(batch[:, B_ATTEMPTS] / slots_b),
        ci_N_R=_half_width(batch[:, B_OCC_RELAY] / slots_b),
        ci_D=_half_width(d_b[np.isfinite(d_b)]),
        slots=measured, counters=counters_d, occupancy=occupancy, drift=_slopes(batch),
        final_state=tuple(int(x) for x in state), replication=replication,
    )


def merge(reps: List[SimMetrics]) -> SimMetrics:
    """Pool replications; CIs are t-intervals over the per-replication estimates.

    Replications are sorted by index first, so the result does not depend on
    the order in which they finished.
    """
    reps = sorted(reps, key=lambda r: r.replication)
    slots = np.array([r.slots for r in reps], dtype=float)
    w = slots / slots.sum()
    counters = {k: sum(r.counters[k] for r in reps) for k in reps[0].counters}
    S = float(np.dot(w, [r.S for r in reps]))
    P = float(np.dot(w, [r.P for r in reps]))
    N = float(np.dot(w, [r.N_R for r in reps]))
    D = counters["delay_sum"] / counters["delay_count"] if counters["delay_count"] else float("nan")
    occ = tuple(float(np.dot(w, [r.occupancy[i] for r in reps])) for i in range(4))
    drift = tuple(float(np.mean([r.drift[i] for r in reps])) for i in range(4))
    return SimMetrics(
        S=S, P=P, N_R=N, D=float(D),
        ci_S=_half_width([r.S for r in reps]), ci_P=_half_width([r.P for r in reps]),
        ci_N_R=_half_width([r.N_R for r in reps]), ci_D=_half_width([r.D for r in reps]),
        slots=int(slots.sum()), counters=counters, occupancy=occ, drift=drift,
        final_state=reps[-1].final_state, replications=list(reps),
    )


def _run_all(cfg: SimConfig, n_jobs: int) -> List[SimMetrics]:
    if n_jobs == 1:
        return [simulate(cfg, r) for r in range(cfg.replications)]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs)(delayed(simulate)(cfg, r) for r in range(cfg.replications))


def replicate(cfg: SimConfig, n_jobs: int = 1) -> SimMetrics:
    """Run ``cfg.replications`` independent streams and merge them."""
    if cfg.replications < 2:
        raise ValidationError("replicate needs replications >= 2")
    return merge(_run_all(cfg, n_jobs))


@dataclass
class DriftVerdict:
    unstable: Tuple[bool, bool, bool, bool]
    slopes: List[Tuple[float, float, float, float]]
    threshold: float

    QUEUES = ("endnode1", "vbuf1", "vbuf2", "endnode2")

    @property
    def stable(self) -> bool:
        return not any(self.unstable)

    def as_dict(self) -> dict:
        return {name: ("unstable" if bad else "stable")
                for name, bad in zip(self.QUEUES, self.unstable)}


def drift_test(cfg: SimConfig, slope_threshold: float = 1e-5, n_jobs: int = 1) -> DriftVerdict:
    """Least-squares growth rate of every queue over the batch windows.

    A queue is unstable when its slope exceeds ``slope_threshold`` (packets per
    slot) in a majority of replications.
    """
    reps = _run_all(cfg, n_jobs)
    slopes = [r.drift for r in reps]
    votes = np.array([[s > slope_threshold for s in sl] for sl in slopes])
    unstable = tuple(bool(v) for v in votes.sum(0) * 2 > len(reps))
    return DriftVerdict(unstable=unstable, slopes=slopes, threshold=slope_threshold)
