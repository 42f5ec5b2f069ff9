"""scikit-learn style wrappers around the analytic, oracle and simulation paths.

Rows of ``X`` are operating points. Five columns ``(g1, g2, q, q1, q2)`` mean
saturated end nodes; seven columns append ``(lam1, lam2)``. ``transform``
returns one row ``(S, P, N_R, D)`` per operating point.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import InstabilityError, UndefinedDelayError, ValidationError
from .model import ArrivalRates, Mode, ProtocolParams
from .oracle import oracle
from .saturated import fixed_point, metrics
from .simulator import SimConfig, replicate, simulate
from .unsaturated import fixed_point_unsat, metrics_unsat, stability_boundary

__all__ = [
    "PARAM_COLUMNS",
    "METRIC_COLUMNS",
    "check_operating_points",
    "RelayAnalyzer",
    "TruncatedOracle",
    "RelaySimulator",
    "StabilityRegion",
]

PARAM_COLUMNS = ("g1", "g2", "q", "q1", "q2", "lam1", "lam2")
METRIC_COLUMNS = ("S", "P", "N_R", "D")


def check_operating_points(X, mode="nc"
                           ) -> List[Tuple[ProtocolParams, Optional[ArrivalRates]]]:
    """Validate a 2-D array of operating points and turn rows into model objects."""
    mode = Mode.parse(mode)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] not in (5, 7):
        raise ValidationError(
            f"expected shape (n, 5) or (n, 7) with columns {PARAM_COLUMNS}, got {X.shape}")
    if X.shape[0] == 0:
        raise ValidationError("no operating points given")
    if not np.all(np.isfinite(X)):
        raise ValidationError("operating points contain NaN or inf")
    rows = []
    for x in X:
        g1, g2, q, q1, q2 = x[:5]
        if mode is Mode.NONNC:
            q1 = q2 = q
        p = ProtocolParams(g1, g2, q, q1, q2, mode)
        a = ArrivalRates(x[5], x[6]) if X.shape[1] == 7 else None
        rows.append((p, a))
    return rows


class _MetricsTransformer(TransformerMixin, BaseEstimator):
    def _evaluate(self, p, a):
        raise NotImplementedError

    def _table(self, X):
        rows = check_operating_points(X, self.mode)
        out = np.full((len(rows), 4), np.nan)
        details = []
        for i, (p, a) in enumerate(rows):
            try:
                m = self._evaluate(p, a)
            except (InstabilityError, UndefinedDelayError) as exc:
                details.append(exc)
                continue
            out[i] = [m.S, m.P, m.N_R, m.D]
            details.append(m)
        return out, details

    def fit(self, X, y=None):
        self.metrics_, self.details_ = self._table(X)
        self.n_features_in_ = np.atleast_2d(np.asarray(X, dtype=float)).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "metrics_")
        return self._table(X)[0]

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X).metrics_

    def get_feature_names_out(self, input_features=None):
        return np.array(METRIC_COLUMNS, dtype=object)


class RelayAnalyzer(_MetricsTransformer):
    """Distributed-chain analysis; unstable rows come back as NaN."""

    def __init__(self, m=4, tol=1e-8, max_iter=500, r_init=0.5, mode="nc"):
        self.m = m
        self.tol = tol
        self.max_iter = max_iter
        self.r_init = r_init
        self.mode = mode

    def _evaluate(self, p, a):
        if a is None:
            return metrics(fixed_point(p, self.m, self.tol, self.max_iter, self.r_init))
        res = fixed_point_unsat(p, a, self.m, self.tol, self.max_iter, self.r_init)
        return metrics_unsat(res)


class TruncatedOracle(_MetricsTransformer):
    """Exact chain on a box of side ``cap + 1`` (reflecting at the cap)."""

    def __init__(self, cap=40, mode="nc"):
        self.cap = cap
        self.mode = mode

    def _evaluate(self, p, a):
        return oracle(p, a, cap=self.cap)


class RelaySimulator(_MetricsTransformer):
    """Slot-level simulation; ``ci_`` holds the 95% half-widths after ``fit``."""

    def __init__(self, horizon=1_000_000, warmup=None, seed=0, replications=1, mode="nc",
                 n_jobs=1):
        self.horizon = horizon
        self.warmup = warmup
        self.seed = seed
        self.replications = replications
        self.mode = mode
        self.n_jobs = n_jobs

    def _evaluate(self, p, a):
        cfg = SimConfig(p, a, horizon=self.horizon, warmup=self.warmup, seed=self.seed,
                        replications=self.replications)
        return replicate(cfg, self.n_jobs) if self.replications > 1 else simulate(cfg)

    def fit(self, X, y=None):
        super().fit(X)
        self.ci_ = np.array([[d.ci_S, d.ci_P, d.ci_N_R, d.ci_D] if hasattr(d, "ci_S")
                             else [np.nan] * 4 for d in self.details_])
        return self


class StabilityRegion(BaseEstimator):
    """Frontier of the stability region; ``predict`` labels arrival pairs.

    ``fit`` takes a single saturated operating point ``(g1, g2, q, q1, q2)``.
    A pair ``(lam1, lam2)`` is predicted stable when ``lam1`` lies on the traced
    range and ``lam2`` does not exceed the frontier interpolated linearly.
    """

    def __init__(self, m=6, step=0.001, lam2_step=None, epsilon=1e-3, lam1_start=0.01,
                 mode="nc", n_jobs=1):
        self.m = m
        self.step = step
        self.lam2_step = lam2_step
        self.epsilon = epsilon
        self.lam1_start = lam1_start
        self.mode = mode
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        rows = check_operating_points(X, self.mode)
        if len(rows) != 1 or rows[0][1] is not None:
            raise ValidationError("StabilityRegion.fit expects one row (g1, g2, q, q1, q2)")
        self.boundary_ = stability_boundary(
            rows[0][0], m=self.m, lam1_range=(self.lam1_start, None), step=self.step,
            epsilon=self.epsilon, lam2_step=self.lam2_step, n_jobs=self.n_jobs)
        self.frontier_ = np.array(self.boundary_.points)
        self.n_features_in_ = 5
        return self

    def predict(self, L):
        check_is_fitted(self, "frontier_")
        L = np.atleast_2d(np.asarray(L, dtype=float))
        if L.shape[1] != 2:
            raise ValidationError("predict expects rows (lam1, lam2)")
        a, b = self.frontier_[:, 0], self.frontier_[:, 1]
        inside = (L[:, 0] >= 0) & (L[:, 0] <= a[-1]) & (L[:, 1] >= 0)
        limit = np.interp(L[:, 0], a, b)
        return inside & (L[:, 1] <= limit + 1e-12)
