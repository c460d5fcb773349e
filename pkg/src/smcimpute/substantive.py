"""Outcome-model families: acceptance ratios, bounds, and posterior draws.

The rejection sampler that imputes a covariate draws candidates from the
covariate's conditional model and accepts with probability equal to the
outcome density at the candidate divided by its upper bound over the
candidate.  Each family below supplies that ratio:

  normal linear   exp(-(y - g)^2 / (2 sigma2))                bound 1/sqrt(2 pi sigma2)
  discrete (0/1)  P(Y = y | g)                                bound 1 (a probability)
  hazards, D=0    exp(-H0(t) e^g)                             survival probability
  hazards, D=1    exp(1 + g - H0(t) e^g) H0(t)                density over its maximum,
                                                              attained where H0(t) e^g = 1

with g the linear predictor at the candidate.  All ratios are available in
log form for exact enumeration of binary covariates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_expit

from .fitters import (
    FitError,
    StepCumHazard,
    draw_cox_posterior,
    draw_glm_posterior,
    draw_linear_posterior,
    fit_cox,
    fit_linear,
    fit_logistic,
)
from .formula import FormulaError, ModelFormula, design_matrix, response_arrays

__all__ = [
    "FAMILIES",
    "SubstantiveParams",
    "acceptance_ratio_normal",
    "acceptance_ratio_discrete",
    "acceptance_ratio_cox_censored",
    "acceptance_ratio_cox_event",
    "log_ratio_normal",
    "log_ratio_discrete",
    "log_ratio_cox",
    "draw_substantive_posterior",
    "fit_substantive",
    "substantive_estimates",
]

FAMILIES = ("normal_linear", "logistic", "cox")

_EVENT_RATIO_SLACK = 1e-12


@dataclass(frozen=True)
class SubstantiveParams:
    """Outcome-model parameters: coefficients plus family extras."""

    family: str
    beta: np.ndarray
    sigma2: float | None = None  # normal_linear
    baseline: StepCumHazard | None = None  # cox

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "normal_linear":
            if self.sigma2 is None or self.sigma2 < 0:
                raise ValueError("normal_linear needs sigma2 >= 0")
        if self.family == "cox" and self.baseline is None:
            raise ValueError("cox needs a baseline cumulative hazard")


# -- log ratios (vectorized over g) -----------------------------------------

def log_ratio_normal(y, g, sigma2):
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    resid = np.asarray(y, dtype=float) - np.asarray(g, dtype=float)
    return -(resid * resid) / (2.0 * sigma2)


def log_ratio_discrete(y, g):
    y = np.asarray(y, dtype=float)
    g = np.asarray(g, dtype=float)
    return y * log_expit(g) + (1.0 - y) * log_expit(-g)


def log_ratio_cox(cumhaz, event, g):
    """Log acceptance ratio for proportional hazards, both event statuses.

    Requires cumhaz > 0 wherever event == 1: an observed event at zero
    cumulative hazard is inconsistent with the model.
    """
    cumhaz = np.asarray(cumhaz, dtype=float)
    event = np.asarray(event, dtype=float)
    g = np.asarray(g, dtype=float)
    if np.any((event == 1.0) & (cumhaz <= 0.0)):
        raise ValueError("event at zero cumulative hazard")
    with np.errstate(over="ignore"):
        heg = cumhaz * np.exp(g)
    censored_part = -heg
    with np.errstate(divide="ignore"):
        event_part = 1.0 + g - heg + np.log(np.where(cumhaz > 0, cumhaz, 1.0))
    return np.where(event == 1.0, event_part, censored_part)


# -- spec-level single-observation ratios ------------------------------------

def _linear_predictor(design_row, beta):
    return float(np.asarray(design_row, dtype=float) @ np.asarray(beta, dtype=float))


def acceptance_ratio_normal(y, design_row, params: SubstantiveParams) -> float:
    g = _linear_predictor(design_row, params.beta)
    return float(np.exp(log_ratio_normal(y, g, params.sigma2)))


def acceptance_ratio_discrete(y, design_row, params: SubstantiveParams) -> float:
    if y not in (0, 1):
        raise ValueError("discrete outcome must be 0 or 1")
    g = _linear_predictor(design_row, params.beta)
    return float(np.exp(log_ratio_discrete(y, g)))


def acceptance_ratio_cox_censored(t, design_row, params: SubstantiveParams) -> float:
    g = _linear_predictor(design_row, params.beta)
    cumhaz = float(params.baseline(t))
    return float(np.exp(log_ratio_cox(cumhaz, 0.0, g)))


def acceptance_ratio_cox_event(t, design_row, params: SubstantiveParams) -> float:
    g = _linear_predictor(design_row, params.beta)
    cumhaz = float(params.baseline(t))
    if cumhaz <= 0.0:
        raise ValueError("event observed at zero cumulative hazard")
    value = float(np.exp(log_ratio_cox(cumhaz, 1.0, g)))
    assert value <= 1.0 + _EVENT_RATIO_SLACK
    return value


# -- fitting and posterior draws ---------------------------------------------

def fit_substantive(family: str, formula: ModelFormula, d, beta0=None):
    """MLE of the outcome model on a completed dataset."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if (family == "cox") != formula.is_survival:
        raise FormulaError("formula response does not match the outcome family")
    X = design_matrix(formula, d)
    if family == "normal_linear":
        return fit_linear(X, response_arrays(formula, d))
    if family == "logistic":
        fit = fit_logistic(X, response_arrays(formula, d), beta0=beta0)
        if not fit.converged:
            raise FitError("logistic substantive fit did not converge")
        return fit
    time, event = response_arrays(formula, d)
    return fit_cox(X, time, event, beta0=beta0)


def draw_substantive_posterior(family: str, formula: ModelFormula, d, rng) -> SubstantiveParams:
    """Fit the outcome model to completed data and draw once from its posterior."""
    fit = fit_substantive(family, formula, d)
    if family == "normal_linear":
        beta, sigma2 = draw_linear_posterior(fit, rng)
        return SubstantiveParams(family=family, beta=beta, sigma2=sigma2)
    if family == "logistic":
        return SubstantiveParams(family=family, beta=draw_glm_posterior(fit, rng))
    X = design_matrix(formula, d)
    time, event = response_arrays(formula, d)
    beta, baseline = draw_cox_posterior(fit, X, time, event, rng)
    return SubstantiveParams(family=family, beta=beta, baseline=baseline)


def substantive_estimates(family: str, formula: ModelFormula, d):
    """(estimate vector, squared-standard-error vector) of one completed-data fit."""
    fit = fit_substantive(family, formula, d)
    return fit.beta.copy(), fit.coef_variances().copy()
