"""Series-logit propensity scores: IRLS fitting, order selection, trimming."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .basis import BasisSpec, build_design
from .data import Dataset
from .errors import (ConfigurationError, InsufficientDataError, NonConvergenceError,
                     TrimmingError, ValidationError)
from .series import DEFAULT_L_GRID, CvRow, CvTable, resolve_scaling, select_order

log = logging.getLogger(__name__)

SCORE_FLOOR = 1e-12
SEPARATION_BOUND = 30.0
DEFAULT_UNDERSMOOTH_L = 5
DEFAULT_TRIM = 0.99


def clamp_scores(p):
    return np.clip(p, SCORE_FLOOR, 1.0 - SCORE_FLOOR)


def _loglik(D, z, m, beta):
    eta = (D @ beta[..., None])[..., 0]
    return np.sum(m * (z * eta - np.logaddexp(0.0, eta)), axis=-1)


def _solve(H, g):
    try:
        return np.linalg.solve(H, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(g)
        for i in np.ndindex(g.shape[:-1]):
            out[i] = np.linalg.lstsq(H[i], g[i], rcond=None)[0]
        return out


@dataclass
class IrlsResult:
    beta: np.ndarray
    loglik: np.ndarray
    converged: np.ndarray
    separated: np.ndarray
    iterations: np.ndarray
    gradient_norm: np.ndarray


def irls(D, z, mask=None, start=None, max_iter=100, ll_tol=1e-10, grad_tol=1e-8) -> IrlsResult:
    """Newton/IRLS for the logit likelihood with step-halving.

    Works on stacked problems: ``D`` is ``(..., n, k)``, ``z`` and the optional
    0/1 ``mask`` are ``(..., n)``. Each problem stops on its own when the
    relative log-likelihood change drops below ``ll_tol``, the gradient of the
    mean log-likelihood has norm below ``grad_tol``, or the coefficients
    exceed the separation bound while the likelihood is still rising.
    """
    D = np.asarray(D, dtype=float)
    single = D.ndim == 2
    if single:
        D = D[None]
        z = np.asarray(z, dtype=float)[None]
        mask = None if mask is None else np.asarray(mask, dtype=float)[None]
        start = None if start is None else np.asarray(start, dtype=float)[None]
    B, n, k = D.shape
    z = np.asarray(z, dtype=float)
    m = np.ones((B, n)) if mask is None else np.asarray(mask, dtype=float)
    n_eff = m.sum(axis=1)
    beta = np.zeros((B, k)) if start is None else np.array(start, dtype=float)
    ll = _loglik(D, z, m, beta)
    converged = np.zeros(B, bool)
    separated = np.zeros(B, bool)
    iters = np.zeros(B, int)
    gnorm = np.full(B, np.inf)
    active = np.ones(B, bool)
    for _ in range(max_iter):
        a = np.flatnonzero(active)
        if a.size == 0:
            break
        Da, za, ma = D[a], z[a], m[a]
        p = expit((Da @ beta[a][..., None])[..., 0])
        r = ma * (za - p)
        grad = (r[:, None, :] @ Da)[:, 0, :]
        gnorm[a] = np.linalg.norm(grad, axis=1) / n_eff[a]
        done = gnorm[a] < grad_tol
        converged[a[done]] = True
        active[a[done]] = False
        keep = ~done
        a, Da, za, ma, p, grad = a[keep], Da[keep], za[keep], ma[keep], p[keep], grad[keep]
        if a.size == 0:
            break
        w = ma * p * (1.0 - p)
        H = np.swapaxes(Da * w[..., None], 1, 2) @ Da
        step = _solve(H, grad)
        t = np.ones(a.size)
        cand = beta[a] + step
        ll_new = _loglik(Da, za, ma, cand)
        ll_old = ll[a]
        for _ in range(40):
            worse = ~(ll_new >= ll_old - 1e-12 * np.abs(ll_old))
            if not worse.any():
                break
            t[worse] *= 0.5
            cand[worse] = beta[a[worse]] + t[worse, None] * step[worse]
            ll_new[worse] = _loglik(Da[worse], za[worse], ma[worse], cand[worse])
        worse = ~(ll_new >= ll_old - 1e-12 * np.abs(ll_old))
        cand[worse] = beta[a[worse]]
        ll_new[worse] = ll_old[worse]
        iters[a] += 1
        beta[a] = cand
        ll[a] = ll_new
        rel = np.abs(ll_new - ll_old) / np.maximum(np.abs(ll_old), 1e-300)
        sep = (np.max(np.abs(cand), axis=1) > SEPARATION_BOUND) & (ll_new > ll_old)
        conv = (rel < ll_tol) & ~sep
        converged[a[conv]] = True
        separated[a[sep]] = True
        active[a[conv | sep]] = False
    out = IrlsResult(beta, ll, converged, separated, iters, gnorm)
    if single:
        out = IrlsResult(*(np.asarray(v)[0] for v in
                           (beta, ll, converged, separated, iters, gnorm)))
    return out


@dataclass(frozen=True, eq=False)
class PropensityFit:
    """Fitted series-logit model; scores are clamped to ``[1e-12, 1 - 1e-12]``."""

    spec: BasisSpec
    coefficients: np.ndarray
    scores: np.ndarray
    converged: bool
    iterations: int
    scaling: Optional[np.ndarray]
    separation: bool = False
    loglik: float = float("nan")
    gradient_norm: float = float("nan")
    warnings: tuple = ()

    def linear_predictor(self, d: Dataset) -> np.ndarray:
        if d.h != self.spec.h or d.s != self.spec.s:
            raise ConfigurationError("dataset covariates do not match the propensity basis")
        return build_design(d, self.spec, self.scaling).values @ self.coefficients

    def predict(self, d: Dataset) -> np.ndarray:
        return clamp_scores(expit(self.linear_predictor(d)))


def fit_logit(d: Dataset, spec: BasisSpec, scaling="sd", max_iter: int = 100) -> PropensityFit:
    """Maximum-likelihood series logit of treatment on ``P_k(X)``.

    Quasi-complete separation does not raise: the fit stops, is flagged and
    carries a warning. Running out of iterations otherwise raises
    :class:`NonConvergenceError` with the last iterate attached.
    """
    if d.n_treated == 0 or d.n_control == 0:
        raise ValidationError("propensity fitting needs both treatment arms")
    sc = resolve_scaling(d, scaling)
    D = build_design(d, spec, sc).values
    if d.n_units <= spec.k:
        raise InsufficientDataError(f"{d.n_units} units cannot support k={spec.k}")
    res = irls(D, d.treatment.astype(float), max_iter=max_iter)
    warn = ()
    if res.separated:
        msg = f"quasi-complete separation at l={spec.l}: coefficients diverging"
        log.warning(msg)
        warn = (msg,)
    elif not res.converged:
        raise NonConvergenceError(
            f"IRLS did not converge in {max_iter} iterations at l={spec.l}",
            coefficients=res.beta, iterations=int(res.iterations),
        )
    scores = clamp_scores(expit(D @ res.beta))
    scores.setflags(write=False)
    return PropensityFit(spec, res.beta, scores, bool(res.converged), int(res.iterations), sc,
                         bool(res.separated), float(res.loglik), float(res.gradient_norm), warn)


def loocv_mse_ps(d: Dataset, l_grid=DEFAULT_L_GRID, exact: bool = False,
                 scaling="sd") -> CvTable:
    """Leave-one-out MSE of ``Z - e_(-i)`` for each propensity order.

    By default ``e_(-i)`` comes from one Newton step away from the full-sample
    fit: ``eta_(-i) = eta_i - q_ii (Z_i - e_i) / (1 - h_ii)`` with
    ``q_ii = x_i' H^-1 x_i`` and ``h_ii = e_i (1 - e_i) q_ii``. ``exact=True``
    refits the model ``n`` times instead.
    """
    sc = resolve_scaling(d, scaling)
    z = d.treatment.astype(float)
    rows = []
    for l in l_grid:
        spec = BasisSpec.for_dataset(d, l)
        try:
            fit = fit_logit(d, spec, sc)
        except (NonConvergenceError, InsufficientDataError) as exc:
            log.warning("loocv_ps: skipping l=%d: %s", l, exc)
            rows.append(CvRow(l, float("nan"), f"skipped: {exc}"))
            continue
        D = build_design(d, spec, sc).values
        if exact:
            pred = _exact_loo_scores(D, z, fit.coefficients)
        else:
            eta = D @ fit.coefficients
            p = expit(eta)
            w = p * (1.0 - p)
            H = D.T @ (D * w[:, None])
            q = np.einsum("ij,ji->i", D, np.linalg.pinv(H) @ D.T)
            lev = w * q
            pred = expit(eta - q * (z - p) / np.maximum(1.0 - lev, 1e-12))
        mse = float(np.mean((z - clamp_scores(pred)) ** 2))
        rows.append(CvRow(l, mse, "separation" if fit.separation else ""))
    return CvTable(tuple(rows), select_order(rows))


def _exact_loo_scores(D, z, beta):
    n = D.shape[0]
    pred = np.empty(n)
    keep = np.ones(n, bool)
    for i in range(n):
        keep[i] = False
        res = irls(D[keep], z[keep], start=beta)
        keep[i] = True
        pred[i] = expit(D[i] @ res.beta)
    return pred


def undersmooth(spec_selected: BasisSpec, target_l: int = DEFAULT_UNDERSMOOTH_L) -> BasisSpec:
    """Raise the maximum power to ``target_l`` (never lower it)."""
    if target_l < spec_selected.l:
        raise ConfigurationError(
            f"undersmoothing target l={target_l} is below the selected l={spec_selected.l}"
        )
    return spec_selected.with_l(target_l)


def trim_extreme(d: Dataset, fit: PropensityFit, threshold: float = DEFAULT_TRIM):
    """Drop units whose estimated score exceeds ``threshold``.

    Returns the trimmed dataset and the list of discarded unit ids.
    """
    if not 0.5 < threshold < 1.0:
        raise ConfigurationError(f"trim threshold must lie in (0.5, 1), got {threshold}")
    scores = fit.predict(d)
    drop = scores > threshold
    if not drop.any():
        return d, []
    kept = d.take(~drop)
    if kept.n_treated == 0 or kept.n_control == 0:
        raise TrimmingError(f"trimming at {threshold} would empty a treatment arm")
    return kept, [str(u) for u in d.unit_ids[drop]]


def score_histogram(d: Dataset, scores, bins: int = 20) -> list:
    """Per-arm counts over equal-width bins on ``[0, 1]``.

    Rows are ``(bin_left, bin_right, count_treated, count_control)``.
    """
    edges = np.linspace(0.0, 1.0, bins + 1)
    scores = np.asarray(scores)
    t = d.treatment == 1
    ct, _ = np.histogram(scores[t], bins=edges)
    cc, _ = np.histogram(scores[~t], bins=edges)
    return [(float(edges[i]), float(edges[i + 1]), int(ct[i]), int(cc[i])) for i in range(bins)]


def write_histogram_csv(rows, path, comment: Optional[str] = None):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count_treated", "count_control"])
        w.writerows(rows)
