"""Stratified bootstrap standard errors for the reg, wt and dr estimators.

Each replicate resamples treated units from the treated and controls from the
controls, then reruns the whole pipeline at fixed orders: propensity fit,
optional trimming, control-arm outcome fit, estimator. Replicates are
evaluated in stacked batches; replicate ``r`` always draws from its own
child seed, so results do not depend on batching or evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .basis import BasisSpec, continuous_scales, power_design
from .data import Dataset
from .errors import ConfigurationError, NumericalError
from .estimators import (EstimateResult, dr_effect, estimate_dr, estimate_reg, estimate_wt,
                         reg_effect, wt_effect)
from .propensity import clamp_scores, fit_logit, irls, trim_extreme
from .series import fit_ols, ols_solve

DEFAULT_B = 1000
UNRELIABLE_FRACTION = 0.05


@dataclass(frozen=True)
class Pipeline:
    """Estimator identity plus the (already selected) model orders."""

    estimator: str
    outcome_l: Optional[int] = None
    propensity_l: Optional[int] = None
    trim_threshold: Optional[float] = None

    def __post_init__(self):
        if self.estimator == "mix":
            raise ConfigurationError(
                "the bootstrap is not valid for matching with a fixed number of matches"
            )
        if self.estimator not in ("reg", "wt", "dr"):
            raise ConfigurationError(f"unknown estimator {self.estimator!r}")
        if self.estimator in ("reg", "dr") and self.outcome_l is None:
            raise ConfigurationError(f"{self.estimator} needs an outcome order")
        if self.needs_propensity and self.propensity_l is None:
            raise ConfigurationError(f"{self.estimator} needs a propensity order")
        if self.trim_threshold is not None and not 0.5 < self.trim_threshold < 1:
            raise ConfigurationError("trim threshold must lie in (0.5, 1)")

    @property
    def needs_propensity(self) -> bool:
        return self.estimator in ("wt", "dr") or self.trim_threshold is not None

    @property
    def needs_outcome(self) -> bool:
        return self.estimator in ("reg", "dr")


@dataclass(frozen=True)
class PipelineRun:
    result: EstimateResult
    data: Dataset
    discarded: tuple


def run_pipeline(d: Dataset, p: Pipeline) -> PipelineRun:
    """Point estimate for one pipeline on one dataset (no standard error)."""
    ps = None
    discarded = ()
    if p.needs_propensity:
        ps = fit_logit(d, BasisSpec.for_dataset(d, p.propensity_l))
    if p.trim_threshold is not None:
        d, dropped = trim_extreme(d, ps, p.trim_threshold)
        discarded = tuple(dropped)
    fit0 = None
    if p.needs_outcome:
        fit0 = fit_ols(d.take(d.treatment == 0), BasisSpec.for_dataset(d, p.outcome_l))
    if p.estimator == "reg":
        res = estimate_reg(d, fit0)
    elif p.estimator == "wt":
        res = estimate_wt(d, ps)
    else:
        res = estimate_dr(d, fit0, ps)
    meta = dict(res.meta)
    if p.trim_threshold is not None:
        meta.update(trim_threshold=p.trim_threshold, n_trimmed=len(discarded))
    if ps is not None and ps.separation:
        meta["propensity_warning"] = ps.warnings[0]
    res = EstimateResult(res.estimator, res.tau_hat, None, res.n_treated, res.n_control, meta)
    return PipelineRun(res, d, discarded)


@dataclass(frozen=True)
class BootstrapResult:
    std_error: float
    replicates: np.ndarray
    n_failed: int

    @property
    def unreliable(self) -> bool:
        return self.n_failed > UNRELIABLE_FRACTION * self.replicates.size


def resample_indices(d: Dataset, seeds) -> np.ndarray:
    """One stratified resample per seed: treated draws first, then controls."""
    treated = np.flatnonzero(d.treatment == 1)
    controls = np.flatnonzero(d.treatment == 0)
    out = np.empty((len(seeds), d.n_units), dtype=np.intp)
    for r, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        out[r, :treated.size] = treated[rng.integers(0, treated.size, treated.size)]
        out[r, treated.size:] = controls[rng.integers(0, controls.size, controls.size)]
    return out


def replicate_estimates(d: Dataset, pipelines: Sequence[Pipeline], idx: np.ndarray) -> np.ndarray:
    """Evaluate every pipeline on every resample in ``idx`` (rows of indices).

    Returns an array ``(len(pipelines), len(idx))``; failed replicates are NaN.
    Requires ``idx`` rows laid out treated-first as in :func:`resample_indices`.
    """
    C, n = idx.shape
    n1 = d.n_treated
    scaling = continuous_scales(d.covariates_continuous)
    y = d.outcome[idx]
    z = d.treatment[idx].astype(float)
    xd = d.covariates_discrete[idx]
    xc = d.covariates_continuous[idx]
    designs, scores, masks, mus = {}, {}, {}, {}

    def design(l):
        if l not in designs:
            designs[l] = power_design(xd, xc, l, scaling)
        return designs[l]

    def score(l):
        if l not in scores:
            D = design(l)
            res = irls(D, z)
            e = clamp_scores(expit((D @ res.beta[..., None])[..., 0]))
            e[~(res.converged | res.separated)] = np.nan
            scores[l] = e
        return scores[l]

    def mask(p):
        if p.trim_threshold is None:
            return None
        key = (p.propensity_l, p.trim_threshold)
        if key not in masks:
            e = score(p.propensity_l)
            m = (e <= p.trim_threshold).astype(float)
            bad = np.isnan(e).any(axis=1) | (m[:, :n1].sum(1) == 0) | (m[:, n1:].sum(1) == 0)
            m[bad] = np.nan
            masks[key] = m
        return masks[key]

    def mu0(p):
        key = (p.outcome_l, p.propensity_l if p.trim_threshold is not None else None,
               p.trim_threshold)
        if key not in mus:
            D = design(p.outcome_l)
            m = mask(p)
            D0, y0 = D[:, n1:, :], y[:, n1:]
            if m is not None:
                m0 = np.nan_to_num(m[:, n1:])
                D0, y0 = D0 * m0[..., None], y0 * m0
            beta, _ = ols_solve(D0, y0)
            if m is not None:
                beta[np.isnan(m).any(axis=1)] = np.nan
                beta[np.nan_to_num(m[:, n1:]).sum(1) <= D.shape[-1]] = np.nan
            mus[key] = (D @ beta[..., None])[..., 0]
        return mus[key]

    out = np.empty((len(pipelines), C))
    with np.errstate(invalid="ignore", divide="ignore"):
        for j, p in enumerate(pipelines):
            m = mask(p)
            if p.estimator == "reg":
                tau = reg_effect(y, z, mu0(p), m)
            elif p.estimator == "wt":
                tau = wt_effect(y, z, score(p.propensity_l), m)
            else:
                tau = dr_effect(y, z, score(p.propensity_l), mu0(p), m)
            out[j] = np.where(np.isfinite(tau), tau, np.nan)
    return out


def bootstrap_many(d: Dataset, pipelines: Sequence[Pipeline], b: int = DEFAULT_B,
                   seed=None, chunk: int = 100) -> dict:
    """Bootstrap several pipelines on shared resamples.

    Returns ``{pipeline: BootstrapResult}``; the standard error is the sample
    SD of the successful replicate estimates.
    """
    if b < 2:
        raise ConfigurationError("at least two bootstrap replicates are required")
    pipelines = list(dict.fromkeys(pipelines))
    if isinstance(seed, np.random.SeedSequence):
        # a fresh copy, so repeated calls with one sequence draw the same children
        root = np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    else:
        root = np.random.SeedSequence(seed)
    seeds = root.spawn(b)
    est = np.empty((len(pipelines), b))
    for start in range(0, b, chunk):
        idx = resample_indices(d, seeds[start:start + chunk])
        est[:, start:start + idx.shape[0]] = replicate_estimates(d, pipelines, idx)
    out = {}
    for j, p in enumerate(pipelines):
        ok = np.isfinite(est[j])
        se = float(np.std(est[j, ok], ddof=1)) if ok.sum() >= 2 else float("nan")
        out[p] = BootstrapResult(se, est[j], int((~ok).sum()))
    return out


def bootstrap_se(d: Dataset, pipeline: Pipeline, b: int = DEFAULT_B, seed=None):
    """``(std_error, ci_95)`` for one pipeline; the interval is ``tau +/- 1.96 SE``."""
    res = estimate(d, pipeline, b, seed)
    return res.std_error, res.ci_95


def estimate(d: Dataset, pipeline: Pipeline, b: int = DEFAULT_B, seed=None) -> EstimateResult:
    """Point estimate with its bootstrap standard error."""
    run = run_pipeline(d, pipeline)
    boot = bootstrap_many(d, [pipeline], b, seed)[pipeline]
    if not np.isfinite(boot.std_error):
        raise NumericalError(f"bootstrap failed: {boot.n_failed} of {b} replicates failed")
    return run.result.with_se(
        boot.std_error,
        se_method="stratified bootstrap", bootstrap_b=b,
        bootstrap_failed=boot.n_failed, se_unreliable=boot.unreliable,
    )
