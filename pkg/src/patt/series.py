"""Least-squares series regression and leave-one-out order selection."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .basis import BasisSpec, build_design, continuous_scales
from .data import Dataset
from .errors import (ConfigurationError, DegenerateLeverageError, InsufficientDataError,
                     NumericalError, SingularFitError)

log = logging.getLogger(__name__)

DEFAULT_L_GRID = (1, 2, 3, 4, 5)
MAX_CONDITION = 1e12
LEVERAGE_LIMIT = 1.0 - 1e-10


def resolve_scaling(d: Dataset, scaling):
    if isinstance(scaling, str):
        if scaling != "sd":
            raise ConfigurationError(f"unknown scaling mode {scaling!r}")
        return continuous_scales(d.covariates_continuous)
    return None if scaling is None else np.asarray(scaling, dtype=float)


def ols_solve(D, y):
    """QR least squares with stacked-problem support.

    ``D`` is ``(..., n, k)`` and ``y`` is ``(..., n)``. Returns coefficients
    ``(..., k)`` and the 2-norm condition number of each design.
    """
    Q, R = np.linalg.qr(D)
    qty = np.einsum("...nk,...n->...k", Q, y)
    cond = np.linalg.cond(R)
    ok = np.isfinite(cond) & (cond < MAX_CONDITION)
    if np.ndim(cond) == 0:
        if not ok:
            return np.full(D.shape[-1], np.nan), cond
        return np.linalg.solve(R, qty[..., None])[..., 0], cond
    beta = np.full(qty.shape, np.nan)
    if ok.any():
        beta[ok] = np.linalg.solve(R[ok], qty[ok][..., None])[..., 0]
    return beta, cond


@dataclass(frozen=True, eq=False)
class SeriesFit:
    """OLS fit of the outcome on a power-series basis.

    Coefficients and ``robust_vcov`` live in the scaled basis recorded in
    ``scaling``; :func:`predict` reapplies it.
    """

    spec: BasisSpec
    coefficients: np.ndarray
    group: Optional[int]
    robust_vcov: np.ndarray
    residuals: np.ndarray
    scaling: Optional[np.ndarray]
    fitted: np.ndarray
    condition_number: float = float("nan")
    vcov_type: str = "hc0"


def fit_ols(d_z: Dataset, spec: BasisSpec, scaling="sd", vcov: str = "hc0") -> SeriesFit:
    """Regress the outcome of ``d_z`` on ``P_k(X)``.

    ``scaling="sd"`` divides each continuous covariate by its sample SD in
    ``d_z``; pass an explicit array to share a basis across fits, or ``None``
    for raw monomials. ``vcov`` picks the robust sandwich: ``"hc0"`` uses the
    squared residuals, ``"hc3"`` inflates each by ``1 / (1 - h_ii)^2``, which
    matters when high powers give some units large leverage.
    """
    if vcov not in ("hc0", "hc3"):
        raise ConfigurationError(f"unknown covariance type {vcov!r}")
    sc = resolve_scaling(d_z, scaling)
    D = build_design(d_z, spec, sc).values
    n, k = D.shape
    if n <= k:
        raise InsufficientDataError(f"{n} units cannot support k={k} terms (l={spec.l})")
    y = d_z.outcome
    Q, R = np.linalg.qr(D)
    cond = float(np.linalg.cond(R))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularFitError(
            f"design is numerically rank deficient at l={spec.l} (condition {cond:.3g})", l=spec.l
        )
    beta = np.linalg.solve(R, Q.T @ y)
    fitted = D @ beta
    resid = y - fitted
    rinv = np.linalg.inv(R)
    bread = rinv @ rinv.T
    u2 = resid ** 2
    if vcov == "hc3":
        lev = np.einsum("ij,ij->i", Q, Q)
        if np.any(lev >= LEVERAGE_LIMIT):
            raise DegenerateLeverageError(f"leverage reaches 1 at l={spec.l}; HC3 undefined")
        u2 = u2 / (1.0 - lev) ** 2
    meat = (D * u2[:, None]).T @ D
    cov = bread @ meat @ bread
    cov = 0.5 * (cov + cov.T)
    z = d_z.treatment
    group = int(z[0]) if z.min() == z.max() else None
    return SeriesFit(spec, beta, group, cov, resid, sc, fitted, cond, vcov_type=vcov)


def predict(fit: SeriesFit, d: Dataset) -> np.ndarray:
    """``D_new @ beta`` using the basis scaling captured at fit time."""
    if d.h != fit.spec.h or d.s != fit.spec.s:
        raise ConfigurationError(
            f"fit expects h={fit.spec.h}, s={fit.spec.s}; dataset has h={d.h}, s={d.s}"
        )
    return build_design(d, fit.spec, fit.scaling).values @ fit.coefficients


@dataclass(frozen=True)
class CvRow:
    l: int
    mse: float
    note: str = ""


@dataclass(frozen=True)
class CvTable:
    rows: tuple
    selected_l: int
    notes: tuple = field(default=())

    def mse(self, l: int) -> float:
        for r in self.rows:
            if r.l == l:
                return r.mse
        raise KeyError(l)

    def to_csv(self, path, comment: Optional[str] = None):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["l", "mse", "selected", "note"])
            for r in self.rows:
                w.writerow([r.l, repr(r.mse), int(r.l == self.selected_l), r.note])


def select_order(rows: Sequence[CvRow]) -> int:
    """Minimum-MSE order; ties go to the smaller ``l``."""
    valid = [r for r in rows if np.isfinite(r.mse)]
    if not valid:
        raise NumericalError("every order in the grid failed; nothing to select")
    best = min(r.mse for r in valid)
    return min(r.l for r in valid if r.mse == best)


def loocv_mse(d_z: Dataset, l_grid=DEFAULT_L_GRID, scaling="sd") -> CvTable:
    """Leave-one-out prediction MSE of the series OLS fit for each ``l``.

    Uses the exact deletion identity ``e_(-i) = e_i / (1 - h_ii)``. Orders
    that cannot be fit (too few units, singular design, leverage at 1) are
    kept in the table with ``mse = nan`` and a note.
    """
    sc = resolve_scaling(d_z, scaling)
    rows = []
    for l in l_grid:
        spec = BasisSpec.for_dataset(d_z, l)
        try:
            rows.append(CvRow(l, _loocv_one(d_z, spec, sc)))
        except (InsufficientDataError, SingularFitError, DegenerateLeverageError) as exc:
            log.warning("loocv: skipping l=%d: %s", l, exc)
            rows.append(CvRow(l, float("nan"), f"skipped: {exc}"))
    return CvTable(tuple(rows), select_order(rows))


def _loocv_one(d_z: Dataset, spec: BasisSpec, scaling) -> float:
    D = build_design(d_z, spec, scaling).values
    n, k = D.shape
    if n <= k + 1:
        raise InsufficientDataError(f"{n} units cannot support leave-one-out at k={k}")
    Q, R = np.linalg.qr(D)
    cond = np.linalg.cond(R)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularFitError(f"singular design at l={spec.l}", l=spec.l)
    lev = np.einsum("ij,ij->i", Q, Q)
    if np.any(lev >= LEVERAGE_LIMIT):
        raise DegenerateLeverageError(f"leverage reaches 1 at l={spec.l}")
    resid = d_z.outcome - Q @ (Q.T @ d_z.outcome)
    return float(np.mean((resid / (1.0 - lev)) ** 2))
