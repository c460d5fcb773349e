"""Combine per-imputation fits of the outcome model.

Point estimate: mean of the M per-imputation estimates.  Variance: mean
within-imputation variance plus (1 + 1/M) times the between-imputation
sample variance.  Degrees of freedom follow the classical large-sample
formula (M - 1)(1 + W / ((1 + 1/M) B))^2; when B = 0 the interval falls
back to normal quantiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, t as t_dist

from .fitters import FitError
from .formula import ModelFormula
from .substantive import substantive_estimates

__all__ = ["PooledEstimate", "PoolError", "fit_each", "pool"]


class PoolError(RuntimeError):
    """Pooling cannot proceed (too few imputations, failed fits)."""

    def __init__(self, message, failed_indices=()):
        super().__init__(message)
        self.failed_indices = tuple(failed_indices)


@dataclass(frozen=True)
class PooledEstimate:
    terms: tuple[str, ...]
    point: np.ndarray
    within_var: np.ndarray
    between_var: np.ndarray
    total_var: np.ndarray
    df: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    level: float
    m: int

    def to_csv_text(self) -> str:
        lines = ["term,estimate,std_error,df,ci_low,ci_high"]
        se = np.sqrt(self.total_var)
        for i, term in enumerate(self.terms):
            cells = (self.point[i], se[i], self.df[i], self.ci_low[i], self.ci_high[i])
            lines.append(term + "," + ",".join(repr(float(c)) for c in cells))
        return "\n".join(lines) + "\n"


def fit_each(result, family: str, formula: ModelFormula):
    """Outcome-model MLE and squared standard errors on each imputed dataset.

    `result` is an ImputationResult or any iterable of completed datasets.
    All fits must succeed; failures abort pooling and name the failing
    imputations (1-based).
    """
    datasets = getattr(result, "datasets", result)
    estimates, variances, failed = [], [], []
    for index, d in enumerate(datasets, start=1):
        try:
            est, var = substantive_estimates(family, formula, d)
            estimates.append(est)
            variances.append(var)
        except FitError:
            failed.append(index)
    if failed:
        raise PoolError(f"substantive fit failed for imputations {failed}", failed)
    return np.asarray(estimates), np.asarray(variances)


def pool(estimates, variances, level: float = 0.95, terms=None) -> PooledEstimate:
    """Apply the combining rules to per-imputation estimates and variances."""
    estimates = np.asarray(estimates, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if estimates.shape != variances.shape or estimates.ndim != 2:
        raise PoolError("estimates and variances must be equal-shape (M, k) arrays")
    m = estimates.shape[0]
    if m < 2:
        raise PoolError("pooling needs at least 2 imputations")
    if terms is not None and len(terms) != estimates.shape[1]:
        raise PoolError("label count does not match coefficient count")
    point = estimates.mean(axis=0)
    within = variances.mean(axis=0)
    between = estimates.var(axis=0, ddof=1)
    total = within + (1.0 + 1.0 / m) * between

    with np.errstate(divide="ignore", over="ignore"):
        ratio = within / ((1.0 + 1.0 / m) * between)
        df = (m - 1) * (1.0 + ratio) ** 2  # inf as B -> 0 is the intended limit

    half = np.empty_like(point)
    zero_b = between == 0.0
    alpha = 0.5 * (1.0 + level)
    half[zero_b] = norm.ppf(alpha) * np.sqrt(total[zero_b])
    half[~zero_b] = t_dist.ppf(alpha, df[~zero_b]) * np.sqrt(total[~zero_b])
    labels = tuple(terms) if terms is not None else tuple(f"b{i}" for i in range(point.size))
    return PooledEstimate(
        terms=labels,
        point=point,
        within_var=within,
        between_var=between,
        total_var=total,
        df=df,
        ci_low=point - half,
        ci_high=point + half,
        level=level,
        m=m,
    )
