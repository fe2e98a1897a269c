"""Estimators of the average treatment effect on the treated.

The ``*_effect`` kernels take plain arrays (optionally stacked along leading
axes, with a 0/1 ``mask`` marking which units are in the sample) so the
bootstrap can evaluate thousands of replicates at once. The ``estimate_*``
functions wrap them around fitted models and a :class:`Dataset`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .basis import BasisSpec
from .data import Dataset
from .errors import (ConfigurationError, DegenerateWeightsError, InsufficientDataError,
                     SingularFitError, ValidationError)
from .propensity import PropensityFit
from .series import SeriesFit, fit_ols, predict

log = logging.getLogger(__name__)

ESTIMATORS = ("reg", "wt", "mix", "dr")
Z95 = 1.96


def reg_effect(y, z, mu0, mask=None):
    m = 1.0 if mask is None else mask
    return np.sum(m * z * (y - mu0), axis=-1) / np.sum(m * z, axis=-1)


def att_weights(z, e):
    """1 for treated, ``e / (1 - e)`` for controls."""
    return np.where(z == 1, 1.0, e / (1.0 - e))


def wt_effect(y, z, e, mask=None):
    m = 1.0 if mask is None else mask
    w = m * att_weights(z, e)
    return (np.sum(y * z * w, axis=-1) / np.sum(z * w, axis=-1)
            - np.sum(y * (1 - z) * w, axis=-1) / np.sum((1 - z) * w, axis=-1))


def dr_effect(y, z, e, mu0, mask=None):
    m = 1.0 if mask is None else mask
    n1 = np.sum(m * z, axis=-1)
    aug = (y * (1 - z) * e + mu0 * (z - e)) / (1.0 - e)
    return np.sum(m * y * z, axis=-1) / n1 - np.sum(m * aug, axis=-1) / n1


@dataclass(frozen=True)
class AttWeights:
    weights: np.ndarray

    @classmethod
    def from_scores(cls, treatment, scores) -> "AttWeights":
        with np.errstate(divide="ignore", invalid="ignore"):
            w = att_weights(np.asarray(treatment), np.asarray(scores, dtype=float))
        if not np.all(np.isfinite(w)):
            raise DegenerateWeightsError("non-finite ATT weight")
        return cls(w)


@dataclass(frozen=True)
class MatchConfig:
    m: int = 6
    metric_scales: Optional[np.ndarray] = None
    with_replacement: bool = True

    def __post_init__(self):
        if self.m < 1:
            raise ConfigurationError("number of matches m must be at least 1")
        if not self.with_replacement:
            raise ConfigurationError("only matching with replacement is supported")
        if self.metric_scales is not None and np.any(np.asarray(self.metric_scales) <= 0):
            raise ConfigurationError("metric scales (variances) must be positive")


@dataclass(frozen=True)
class EstimateResult:
    estimator: str
    tau_hat: float
    std_error: Optional[float] = None
    n_treated: int = 0
    n_control: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def ci_95(self):
        if self.std_error is None:
            return None
        return (self.tau_hat - Z95 * self.std_error, self.tau_hat + Z95 * self.std_error)

    def with_se(self, std_error: float, **meta) -> "EstimateResult":
        if not std_error >= 0:
            raise ValueError(f"standard error must be non-negative, got {std_error}")
        return replace(self, std_error=float(std_error), meta={**self.meta, **meta})

    def to_dict(self) -> dict:
        ci = self.ci_95
        return {
            "estimator": self.estimator,
            "tau_hat": self.tau_hat,
            "std_error": self.std_error,
            "ci_95": None if ci is None else list(ci),
            "n_treated": self.n_treated,
            "n_control": self.n_control,
            "meta": self.meta,
        }

    def table_row(self, aot: float) -> str:
        """``estimator | PATT | (SE) | PATT/AOT``."""
        se = "" if self.std_error is None else f"({self.std_error:.4g})"
        return f"{self.estimator:<5} {self.tau_hat:>10.4g} {se:>10} {self.tau_hat / aot:>8.3f}"


def format_table(results, aot: float) -> str:
    lines = [f"AOT {aot:.4g}", f"{'est':<5} {'PATT':>10} {'SE':>10} {'PATT/AOT':>8}"]
    lines += [r.table_row(aot) for r in results]
    return "\n".join(lines)


def _check_fit0(d: Dataset, fit0: SeriesFit):
    if fit0.group not in (0, None):
        raise ValidationError("the outcome model must be fitted on the control arm")
    if d.n_treated == 0:
        raise ValidationError("no treated units")


def estimate_reg(d: Dataset, fit0: SeriesFit) -> EstimateResult:
    """Mean over the treated of ``Y_i - mu0_hat(X_i)``. No standard error."""
    _check_fit0(d, fit0)
    z = d.treatment.astype(float)
    tau = float(reg_effect(d.outcome, z, predict(fit0, d)))
    return EstimateResult("reg", tau, None, d.n_treated, d.n_control,
                          {"outcome_l": fit0.spec.l})


def estimate_wt(d: Dataset, ps: PropensityFit) -> EstimateResult:
    """Normalized ATT-weighting estimator. No standard error."""
    z = d.treatment.astype(float)
    e = ps.predict(d)
    w = AttWeights.from_scores(z, e).weights
    if not np.sum((1 - z) * w) > 0:
        raise DegenerateWeightsError("all control weights are zero")
    tau = float(wt_effect(d.outcome, z, e))
    return EstimateResult("wt", tau, None, d.n_treated, d.n_control,
                          {"propensity_l": ps.spec.l})


def estimate_dr(d: Dataset, fit0: SeriesFit, ps: PropensityFit) -> EstimateResult:
    """Doubly robust combination of outcome regression and ATT weighting."""
    _check_fit0(d, fit0)
    z = d.treatment.astype(float)
    e = ps.predict(d)
    w = AttWeights.from_scores(z, e).weights
    if not np.sum((1 - z) * w) > 0:
        raise DegenerateWeightsError("all control weights are zero")
    tau = float(dr_effect(d.outcome, z, e, predict(fit0, d)))
    return EstimateResult("dr", tau, None, d.n_treated, d.n_control,
                          {"outcome_l": fit0.spec.l, "propensity_l": ps.spec.l})


# -- matching ---------------------------------------------------------------


@dataclass(frozen=True)
class MatchResult:
    """``matches[i]`` holds dataset positions of the controls matched to the
    ``i``-th treated unit (``treated[i]``)."""

    treated: np.ndarray
    matches: tuple
    scales: np.ndarray

    def reuse_counts(self, n: int) -> np.ndarray:
        """Number of times each unit is used as a match (0 for treated)."""
        counts = np.zeros(n)
        for mi in self.matches:
            counts[mi] += 1
        return counts

    def reuse_weights(self, n: int) -> np.ndarray:
        """``sum_i 1{j in M_i} / |M_i|``; equals ``K_j / m`` without ties."""
        k = np.zeros(n)
        for mi in self.matches:
            k[mi] += 1.0 / len(mi)
        return k

    def multiplicity_weights(self, d: Dataset) -> np.ndarray:
        """Balance weights: 1 for treated, reuse count for controls."""
        return np.where(d.treatment == 1, 1.0, self.reuse_counts(d.n_units))


def metric_scales(d: Dataset) -> np.ndarray:
    v = d.covariates.var(axis=0, ddof=1)
    return np.where(v > 0, v, 1.0)


def _nearest_with_ties(query, pool, m, exclude_self=False, block=1024):
    """For each query row, pool positions within the m-th smallest distance."""
    out = []
    pool_sq = np.einsum("ij,ij->i", pool, pool)
    for start in range(0, query.shape[0], block):
        q = query[start:start + block]
        d2 = (np.einsum("ij,ij->i", q, q)[:, None] + pool_sq[None, :] - 2.0 * q @ pool.T)
        # exact differences for the candidate set; the expansion above only ranks
        d2 = np.maximum(d2, 0.0)
        if exclude_self:
            d2[np.arange(q.shape[0]), np.arange(start, start + q.shape[0])] = np.inf
        kth = np.partition(d2, m - 1, axis=1)[:, m - 1]
        for r in range(q.shape[0]):
            cand = np.flatnonzero(d2[r] <= kth[r] * (1 + 1e-6) + 1e-12)
            exact = np.sum((pool[cand] - q[r]) ** 2, axis=1)
            if exclude_self:
                exact[cand == start + r] = np.inf
            cut = np.partition(exact, m - 1)[m - 1]
            tol = 1e-12 * max(cut, 1e-300)
            out.append(np.sort(cand[exact <= cut + tol]))
    return out


def match_controls(d: Dataset, cfg: MatchConfig) -> MatchResult:
    """Nearest-neighbour matching of treated units to controls, with replacement.

    Distance is ``sqrt(x' S x)`` with ``S = diag(1 / variance)``; controls tied
    with the ``m``-th nearest are all included.
    """
    scales = metric_scales(d) if cfg.metric_scales is None else np.asarray(cfg.metric_scales, float)
    if scales.shape != (d.h + d.s,):
        raise ConfigurationError("one metric scale per covariate is required")
    if d.n_control < cfg.m:
        raise ConfigurationError(f"{d.n_control} controls cannot supply m={cfg.m} matches")
    X = d.covariates / np.sqrt(scales)
    treated = np.flatnonzero(d.treatment == 1)
    controls = np.flatnonzero(d.treatment == 0)
    local = _nearest_with_ties(X[treated], X[controls], cfg.m)
    return MatchResult(treated, tuple(controls[ix] for ix in local), scales)


def _control_variances(d: Dataset, scales, J=2):
    """Conditional outcome variance of each control from its J nearest controls."""
    controls = np.flatnonzero(d.treatment == 0)
    X = d.covariates[controls] / np.sqrt(scales)
    y = d.outcome[controls]
    sig = np.zeros(d.n_units)
    near = _nearest_with_ties(X, X, min(J, len(controls) - 1), exclude_self=True)
    for r, ix in enumerate(near):
        j = len(ix)
        sig[controls[r]] = j / (j + 1.0) * (y[r] - y[ix].mean()) ** 2
    return sig


def estimate_mix(d: Dataset, cfg: MatchConfig = MatchConfig(), regression_l: int = 1,
                 match: Optional[MatchResult] = None) -> EstimateResult:
    """Matching with series-regression bias correction.

    The correction regression is fit once on the distinct matched controls.
    The standard error is the matching variance estimator for the treated
    effect (population version), with control conditional variances from
    two-neighbour within-arm matching.
    """
    match = match_controls(d, cfg) if match is None else match
    used = np.unique(np.concatenate(match.matches))
    meta = {"m": cfg.m, "outcome_l": regression_l, "n_matched_controls": int(used.size)}
    spec = BasisSpec.for_dataset(d, regression_l)
    try:
        fit = fit_ols(d.take(used), spec)
    except (SingularFitError, InsufficientDataError) as exc:
        if regression_l == 1:
            raise
        log.warning("mix: correction regression failed at l=%d (%s); using l=1",
                    regression_l, exc)
        meta["warning"] = f"correction regression fell back to l=1: {exc}"
        meta["outcome_l"] = 1
        fit = fit_ols(d.take(used), spec.with_l(1))
    mu = predict(fit, d)
    y = d.outcome
    y0_hat = np.array([np.mean(y[mi] + mu[i] - mu[mi])
                       for i, mi in zip(match.treated, match.matches)])
    effects = y[match.treated] - y0_hat
    tau = float(effects.mean())

    n1 = match.treated.size
    k = match.reuse_weights(d.n_units)
    c = np.zeros(d.n_units)
    for mi in match.matches:
        c[mi] += 1.0 / len(mi) ** 2
    sig = _control_variances(d, match.scales)
    var = (np.sum((effects - tau) ** 2) + np.sum((k ** 2 - c) * sig)) / n1 ** 2
    return EstimateResult("mix", tau, float(np.sqrt(max(var, 0.0))), d.n_treated, d.n_control,
                          {**meta, "se_method": "matching variance"})
