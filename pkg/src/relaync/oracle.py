"""Exact reference solution of the full relay chain on a finite box.

Each coordinate is capped at ``N``; an increment at the cap is redirected to
the cap itself (reflecting boundary) so probability mass is conserved. The
stationary vector is found by a direct sparse solve over the states reachable
from the all-empty state.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import breadth_first_order

from .exceptions import RelayModelError, StateSpaceTooLargeError, ValidationError
from .model import ArrivalRates, ProtocolParams, slot_outcomes
from .saturated import Metrics, _delay

__all__ = ["TruncatedChain", "build_truncated", "solve_truncated", "oracle_metrics",
           "ReducibleChainError"]

DEFAULT_MAX_STATES = 2_000_000


class ReducibleChainError(RelayModelError):
    """The chain restricted to states reachable from empty has no unique equilibrium."""


@dataclass
class TruncatedChain:
    cap: int
    coords: np.ndarray  # (states, dims)
    P: sp.csr_matrix
    tx: np.ndarray
    succ: np.ndarray
    params: ProtocolParams
    arrivals: Optional[ArrivalRates]

    @property
    def saturated(self) -> bool:
        return self.arrivals is None

    @property
    def state_count(self) -> int:
        return self.coords.shape[0]

    def index(self, state) -> int:
        state = tuple(state)
        idx = 0
        for c in state:
            idx = idx * (self.cap + 1) + c
        return idx

    @property
    def k1(self) -> np.ndarray:
        return self.coords[:, 0] if self.saturated else self.coords[:, 1]

    @property
    def k2(self) -> np.ndarray:
        return self.coords[:, 1] if self.saturated else self.coords[:, 2]


def build_truncated(params: ProtocolParams, arrivals: Optional[ArrivalRates] = None,
                    cap: int = 40, max_states: int = DEFAULT_MAX_STATES) -> TruncatedChain:
    if cap < 1:
        raise ValidationError(f"cap N={cap} must be >= 1")
    dims = 2 if arrivals is None else 4
    count = (cap + 1) ** dims
    if count > max_states:
        raise StateSpaceTooLargeError(
            f"{count} states exceed the budget of {max_states}; use a smaller cap")
    grid = np.array(list(itertools.product(range(cap + 1), repeat=dims)), dtype=np.int64)
    weights = (cap + 1) ** np.arange(dims - 1, -1, -1)
    nonempty = grid > 0
    codes = nonempty @ (1 << np.arange(dims - 1, -1, -1))
    rows, cols, vals = [], [], []
    tx = np.zeros(count)
    succ = np.zeros(count)
    for code in np.unique(codes):
        members = np.nonzero(codes == code)[0]
        pattern = tuple(bool(b) for b in nonempty[members[0]])
        outcomes = slot_outcomes(tuple(int(b) for b in pattern), params, arrivals)
        base = grid[members]
        for out in outcomes:
            target = np.minimum(base + np.asarray(out.delta), cap)
            rows.append(members)
            cols.append(target @ weights)
            vals.append(np.full(members.size, out.prob))
            tx[members] += out.prob * out.tx_count
            succ[members] += out.prob * out.success_count
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(count, count))
    P.sum_duplicates()
    return TruncatedChain(cap=cap, coords=grid, P=P, tx=tx, succ=succ, params=params,
                          arrivals=arrivals)


DIRECT_SOLVE_LIMIT = 5000


def _solve_pinned(M, rhs):
    """Direct LU for small systems; ILU-preconditioned GMRES for the 4-D boxes.

    LU fill-in on the 4-coordinate lattice grows like ``N**9``, so beyond
    ``DIRECT_SOLVE_LIMIT`` unknowns the Krylov path is far cheaper. Both are
    checked against the same balance tolerance by the caller.
    """
    if M.shape[0] > DIRECT_SOLVE_LIMIT:
        try:
            ilu = spla.spilu(M, drop_tol=1e-5, fill_factor=20)
            pre = spla.LinearOperator(M.shape, ilu.solve)
            x, info = spla.gmres(M, rhs, rtol=1e-14, atol=0.0, restart=100, maxiter=2000, M=pre)
            if info == 0 and np.all(np.isfinite(x)):
                return x
        except RuntimeError:
            pass
    try:
        return spla.splu(M).solve(rhs)
    except RuntimeError as exc:
        raise ReducibleChainError(f"sparse factorisation failed: {exc}") from exc


def solve_truncated(chain: TruncatedChain, tol: float = 1e-10) -> np.ndarray:
    """Stationary vector on the full index set (zero on unreachable states)."""
    n = chain.state_count
    reach = np.sort(breadth_first_order(chain.P, 0, directed=True, return_predecessors=False))
    Q = chain.P[reach][:, reach]
    k = reach.size
    if k == 1:
        x = np.ones(1)
    else:
        # pin the empty state's unnormalised mass to 1 and drop its balance equation
        A = (Q.T - sp.identity(k, format="csr")).tocsc()
        rhs = -A[1:, 0].toarray().ravel()
        x = np.concatenate([[1.0], _solve_pinned(A[1:, 1:].tocsc(), rhs)])
    if not np.all(np.isfinite(x)):
        raise ReducibleChainError("stationary system is singular (several closed classes?)")
    if x.min() < -1e-9:
        raise ReducibleChainError(f"stationary solve returned negative mass {x.min():.3g}")
    x = np.clip(x, 0.0, None)
    x /= x.sum()
    err = np.max(np.abs(Q.T @ x - x))
    if err > tol:
        raise ReducibleChainError(f"global balance defect {err:.3g} exceeds {tol:.1g}")
    pi = np.zeros(n)
    pi[reach] = x
    return pi


def oracle_metrics(chain: TruncatedChain, pi: np.ndarray) -> Metrics:
    k1, k2 = chain.k1, chain.k2
    S = float(pi @ chain.succ)
    P = float(pi @ chain.tx)
    N = float(pi @ (k1 + k2))
    split = (float(pi[(k1 == 0) & (k2 == 0)].sum()), float(pi[(k1 > 0) & (k2 == 0)].sum()),
             float(pi[(k1 == 0) & (k2 > 0)].sum()), float(pi[(k1 > 0) & (k2 > 0)].sum()))
    extra = {"N1": float(pi @ k1), "N2": float(pi @ k2), "cap": chain.cap,
             "cap_mass": float(pi[(chain.coords == chain.cap).any(1)].sum())}
    if not chain.saturated:
        extra["L1"] = float(pi @ chain.coords[:, 0])
        extra["L2"] = float(pi @ chain.coords[:, 3])
    return Metrics(S=S, P=P, N_R=N, D=_delay(N, S), occupancy_split=split, provenance="oracle",
                   extra=extra)


def oracle(params: ProtocolParams, arrivals: Optional[ArrivalRates] = None, cap: int = 40,
           max_states: int = DEFAULT_MAX_STATES) -> Metrics:
    chain = build_truncated(params, arrivals, cap, max_states)
    return oracle_metrics(chain, solve_truncated(chain))
