"""Matrix-geometric solution of discrete-time quasi-birth-death chains.

Block convention (rows = from, columns = to)::

    level 0 : [B00 | B01 |  0  | ...]
    level 1 : [B10 | A1  | A0  | ...]
    level l : [ .. | A2  | A1  | A0 ]

``A0`` moves one level up, ``A2`` one level down. The stationary vector is
``pi_l = pi_1 R^(l-1)`` for ``l >= 1`` with ``R`` the minimal nonnegative
solution of ``R = A0 + R A1 + R^2 A2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import DegenerateBlocksError, InstabilityError, ValidationError

__all__ = [
    "QbdBlocks",
    "QbdSolution",
    "solve_rate_matrix",
    "stationary",
    "solve",
    "tail_mass",
    "expected_level",
    "spectral_radius",
    "drift",
]

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12


def _as_matrix(x, name):
    a = np.atleast_2d(np.asarray(x, dtype=float))
    if a.ndim != 2:
        raise ValidationError(f"{name} must be a matrix")
    return a


@dataclass(frozen=True)
class QbdBlocks:
    B00: np.ndarray
    B01: np.ndarray
    B10: np.ndarray
    A0: np.ndarray
    A1: np.ndarray
    A2: np.ndarray

    def __post_init__(self):
        for name in ("B00", "B01", "B10", "A0", "A1", "A2"):
            object.__setattr__(self, name, _as_matrix(getattr(self, name), name))
        n0, n = self.boundary_phase_count, self.phase_count
        shapes = {"B00": (n0, n0), "B01": (n0, n), "B10": (n, n0),
                  "A0": (n, n), "A1": (n, n), "A2": (n, n)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                got = getattr(self, name).shape
                raise ValidationError(f"{name} has shape {got}, expected {shape}")

    @classmethod
    def homogeneous(cls, B1, A0, A1, A2):
        """Blocks where the boundary reuses ``A0``/``A2`` (only ``B00`` differs)."""
        A0 = _as_matrix(A0, "A0")
        A2 = _as_matrix(A2, "A2")
        return cls(B00=B1, B01=A0, B10=A2, A0=A0, A1=A1, A2=A2)

    @property
    def phase_count(self) -> int:
        return self.A1.shape[0]

    @property
    def boundary_phase_count(self) -> int:
        return self.B00.shape[0]

    def check(self, tol: float = ROW_SUM_TOL) -> None:
        """Raise :class:`DegenerateBlocksError` unless the blocks are stochastic."""
        for name in ("B00", "B01", "B10", "A0", "A1", "A2"):
            m = getattr(self, name)
            if m.size and (m.min() < -tol or m.max() > 1 + tol):
                raise DegenerateBlocksError(f"{name} has entries outside [0,1]")
        rows = {
            "[B00|B01]": self.B00.sum(1) + self.B01.sum(1),
            "[B10|A1|A0]": self.B10.sum(1) + self.A1.sum(1) + self.A0.sum(1),
            "[A2|A1|A0]": self.A2.sum(1) + self.A1.sum(1) + self.A0.sum(1),
        }
        for name, sums in rows.items():
            err = np.max(np.abs(sums - 1.0)) if sums.size else 0.0
            if err > tol:
                raise DegenerateBlocksError(f"row sums of {name} deviate from 1 by {err:.3g}")


@dataclass
class QbdSolution:
    pi0: np.ndarray
    pi1: np.ndarray
    R: np.ndarray
    residual: float
    iterations: int
    _N: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def fundamental(self) -> np.ndarray:
        """``(I - R)^-1``, cached."""
        if self._N is None:
            self._N = np.linalg.inv(np.eye(self.R.shape[0]) - self.R)
        return self._N

    def level(self, L: int) -> np.ndarray:
        """Stationary vector of level ``L``."""
        if L == 0:
            return self.pi0
        return self.pi1 @ np.linalg.matrix_power(self.R, L - 1)

    def level_masses(self, upto: int) -> np.ndarray:
        out = np.empty(upto + 1)
        out[0] = self.pi0.sum()
        v = self.pi1
        for L in range(1, upto + 1):
            out[L] = v.sum()
            v = v @ self.R
        return out

    @property
    def total_mass(self) -> float:
        return float(self.pi0.sum() + (self.pi1 @ self.fundamental).sum())


def spectral_radius(R, tol: float = 1e-10, max_iter: int = 500) -> float:
    """Perron root of a square nonnegative matrix.

    Power iteration with Collatz-Wielandt bounds as the stopping test; when
    the bounds do not pinch within ``max_iter`` steps (reducible or periodic
    matrices) a dense eigensolver decides.
    """
    R = np.asarray(R, dtype=float)
    n = R.shape[0]
    if n == 0 or not np.any(R):
        return 0.0
    x = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        y = R @ x
        s = y.sum()
        if s == 0.0:
            break
        y /= s
        support = y > 1e-200
        z = R @ y
        ratio = z[support] / y[support]
        lo, hi = ratio.min(), ratio.max()
        if hi - lo < tol * max(1.0, hi):
            return float(0.5 * (lo + hi))
        x = y
    return float(np.max(np.abs(np.linalg.eigvals(R))))


def _stationary_of_stochastic(P: np.ndarray) -> Optional[np.ndarray]:
    n = P.shape[0]
    M = (P - np.eye(n)).T
    M[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        x = np.linalg.solve(M, b)
    except np.linalg.LinAlgError:
        return None
    if x.min() < -1e-9 or np.max(np.abs(x @ P - x)) > 1e-9:
        return None
    return np.clip(x, 0.0, None)


def drift(blocks: QbdBlocks):
    """Mean up- and down-rate of the level process under the phase equilibrium.

    Returns ``(up, down)`` or ``None`` when ``A0 + A1 + A2`` does not have a
    unique stationary vector (then the drift condition is inconclusive).
    """
    A = blocks.A0 + blocks.A1 + blocks.A2
    p = _stationary_of_stochastic(A)
    if p is None:
        return None
    return float(p @ blocks.A0.sum(1)), float(p @ blocks.A2.sum(1))


def _check_drift(blocks: QbdBlocks) -> None:
    d = drift(blocks)
    if d is not None:
        up, down = d
        if up >= down - 1e-15 and up > 0:
            raise InstabilityError(
                f"chain is not positive recurrent: upward drift {up:.6g} >= downward {down:.6g}",
                spectral_radius=1.0,
            )


def _solve_linear(blocks, tol, max_iter):
    n = blocks.phase_count
    A0, A2 = blocks.A0, blocks.A2
    try:
        inv = np.linalg.inv(np.eye(n) - blocks.A1)
    except np.linalg.LinAlgError:
        raise DegenerateBlocksError("I - A1 is singular") from None
    A0inv = A0 @ inv
    A2inv = A2 @ inv
    R = np.zeros((n, n))
    prev = np.inf
    for it in range(1, max_iter + 1):
        R_new = A0inv + (R @ R) @ A2inv
        diff = np.max(np.abs(R_new - R))
        if np.any(R_new < R - 1e-13):
            raise DegenerateBlocksError("linear progression iterates are not monotone")
        R = R_new
        # linear convergence: remaining error ~ diff * c / (1 - c)
        c = diff / prev if prev > 0 else 0.0
        prev = diff
        if diff < tol and (c >= 1.0 or diff * c / (1.0 - c) < tol):
            return R, it
        if it % 1000 == 0 and spectral_radius(R) >= 1.0:
            break
    rho = spectral_radius(R)
    raise InstabilityError(
        f"rate matrix did not converge in {max_iter} iterations (sp(R)={rho:.6f})",
        R=R, spectral_radius=rho,
    )


def _solve_logred(blocks, tol, max_iter):
    n = blocks.phase_count
    I = np.eye(n)
    try:
        inv = np.linalg.inv(I - blocks.A1)
    except np.linalg.LinAlgError:
        raise DegenerateBlocksError("I - A1 is singular") from None
    H = inv @ blocks.A0
    L = inv @ blocks.A2
    G = L.copy()
    T = H.copy()
    for it in range(1, max_iter + 1):
        U = H @ L + L @ H
        try:
            W = np.linalg.inv(I - U)
        except np.linalg.LinAlgError:
            raise DegenerateBlocksError("logarithmic reduction hit a singular step") from None
        H = W @ (H @ H)
        L = W @ (L @ L)
        inc = T @ L
        G = G + inc
        T = T @ H
        if np.max(np.abs(inc)) < tol and np.max(np.abs(T)) < 1.0:
            break
    else:
        it = max_iter
    try:
        R = blocks.A0 @ np.linalg.inv(I - blocks.A1 - blocks.A0 @ G)
    except np.linalg.LinAlgError:
        raise DegenerateBlocksError("I - A1 - A0 G is singular") from None
    return np.clip(R, 0.0, None), it


def solve_rate_matrix(blocks: QbdBlocks, tol: float = 1e-10, max_iter: int = 100_000,
                      method: str = "linear"):
    """Minimal nonnegative solution of ``R = A0 + R A1 + R^2 A2``.

    ``method="linear"`` runs the linear-progression iteration
    ``R <- (A0 + R^2 A2)(I - A1)^-1`` from ``R = 0``; ``"logred"`` uses
    logarithmic reduction on ``G`` and maps it to ``R`` (same fixed point,
    quadratic convergence, used for large phase counts).

    Returns ``(R, iterations)``. Raises :class:`InstabilityError` when the
    chain is not positive recurrent.
    """
    if not np.any(blocks.A0):
        return np.zeros_like(blocks.A1), 0
    _check_drift(blocks)
    if method == "linear":
        R, it = _solve_linear(blocks, tol, max_iter)
    elif method == "logred":
        R, it = _solve_logred(blocks, tol, min(max_iter, 200))
    else:
        raise ValueError(f"unknown method {method!r}")
    rho = spectral_radius(R)
    if rho >= 1.0 - 1e-12:
        raise InstabilityError(f"sp(R) = {rho:.12f} >= 1", R=R, spectral_radius=rho)
    return R, it


def fixed_point_residual(blocks: QbdBlocks, R: np.ndarray) -> float:
    return float(np.max(np.abs(blocks.A0 + R @ blocks.A1 + R @ R @ blocks.A2 - R)))


def stationary(blocks: QbdBlocks, R: np.ndarray, iterations: int = 0,
               rho: Optional[float] = None) -> QbdSolution:
    """Boundary solve plus normalisation; returns the full matrix-geometric solution."""
    R = np.asarray(R, dtype=float)
    n0, n = blocks.boundary_phase_count, blocks.phase_count
    if rho is None:
        rho = spectral_radius(R)
    if rho >= 1.0:
        raise InstabilityError(f"sp(R) = {rho:.6g} >= 1; no stationary distribution", R=R,
                               spectral_radius=rho)
    I = np.eye(n)
    N = np.linalg.inv(I - R)
    M = np.zeros((n0 + n, n0 + n))
    M[:n0, :n0] = blocks.B00 - np.eye(n0)
    M[:n0, n0:] = blocks.B01
    M[n0:, :n0] = blocks.B10
    M[n0:, n0:] = blocks.A1 - I + R @ blocks.A2
    # x M = 0 with one column swapped for the normalisation condition
    norm = np.concatenate([np.ones(n0), N.sum(1)])
    # swap out the column with the least information about the null vector
    col = int(np.argmin(np.abs(M).sum(0)))
    Mt = M.copy()
    Mt[:, col] = norm
    rhs = np.zeros(n0 + n)
    rhs[col] = 1.0
    try:
        x = np.linalg.solve(Mt.T, rhs)
    except np.linalg.LinAlgError:
        raise DegenerateBlocksError("boundary system is singular") from None
    if x.min() < -1e-9:
        raise DegenerateBlocksError(f"boundary solve produced negative mass {x.min():.3g}")
    x = np.clip(x, 0.0, None)
    x /= x[:n0].sum() + x[n0:] @ norm[n0:]
    balance = float(np.max(np.abs(x @ M)))
    if not np.isfinite(balance) or balance > 1e-8:
        raise DegenerateBlocksError(
            f"boundary system is rank deficient (balance defect {balance:.3g})")
    residual = max(fixed_point_residual(blocks, R), balance)
    return QbdSolution(pi0=x[:n0], pi1=x[n0:], R=R, residual=residual,
                       iterations=iterations, _N=N)


def solve(blocks: QbdBlocks, tol: float = 1e-10, max_iter: int = 100_000,
          method: str = "linear") -> QbdSolution:
    R, it = solve_rate_matrix(blocks, tol=tol, max_iter=max_iter, method=method)
    # solve_rate_matrix already rejected sp(R) >= 1
    return stationary(blocks, R, iterations=it, rho=0.0)


def tail_mass(sol: QbdSolution, from_level: int) -> np.ndarray:
    """Per-phase mass of levels ``>= from_level``."""
    if from_level < 0:
        raise ValidationError("from_level must be >= 0")
    tail1 = sol.pi1 @ sol.fundamental
    if from_level == 0:
        if sol.pi0.shape != tail1.shape:
            raise ValidationError("level 0 has its own phase count; cannot add phase-wise")
        return sol.pi0 + tail1
    if from_level == 1:
        return tail1
    return sol.pi1 @ np.linalg.matrix_power(sol.R, from_level - 1) @ sol.fundamental


def expected_level(sol: QbdSolution) -> float:
    N = sol.fundamental
    return float(sol.pi1 @ N @ N.sum(1))
