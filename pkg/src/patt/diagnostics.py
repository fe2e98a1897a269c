"""Covariate balance and the lagged-outcome unconfoundedness test."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import gammaincc

from .basis import BasisSpec, continuous_scales
from .data import Dataset
from .errors import ConfigurationError, ValidationError
from .estimators import AttWeights
from .series import DEFAULT_L_GRID, fit_ols, loocv_mse


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    asd_unweighted: float
    asd_adjusted: Optional[float]
    constant: bool = False


@dataclass(frozen=True)
class BalanceReport:
    rows: tuple
    method: str

    def asd(self, covariate: str, adjusted: bool = True) -> float:
        for r in self.rows:
            if r.covariate == covariate:
                return r.asd_adjusted if adjusted and r.asd_adjusted is not None else r.asd_unweighted
        raise KeyError(covariate)

    def long_rows(self):
        """``(covariate, method, asd)`` records, raw rows included once."""
        out = [(r.covariate, "raw", r.asd_unweighted) for r in self.rows]
        if self.method != "raw":
            out += [(r.covariate, self.method, r.asd_adjusted) for r in self.rows]
        return out


def _asd(x, z, w, s2_1, s2_0, n1, n0):
    t = z == 1
    diff = abs(np.sum(x[t] * w[t]) / np.sum(w[t]) - np.sum(x[~t] * w[~t]) / np.sum(w[~t]))
    den = np.sqrt(s2_1 / n1 + s2_0 / n0)
    if den == 0:
        return 0.0, True
    return float(diff / den), False


def balance_asd(d: Dataset, weights=None) -> BalanceReport:
    """Absolute standardized difference for every covariate column.

    ``weights`` may be ``None`` (raw comparison), an :class:`AttWeights`, or a
    per-unit array of match multiplicities (1 for treated, reuse count for
    controls). Variances in the denominator always come from the unweighted
    arms, so the raw ASD is the two-sample (Welch) t statistic.
    """
    if weights is None:
        method, w = "raw", None
    elif isinstance(weights, AttWeights):
        method, w = "att_weights", np.asarray(weights.weights, dtype=float)
    else:
        method, w = "matched", np.asarray(weights, dtype=float)
    if w is not None and w.shape != (d.n_units,):
        raise ConfigurationError(f"{w.shape[0]} weights for {d.n_units} units")
    z = d.treatment
    t = z == 1
    n1, n0 = int(t.sum()), int((~t).sum())
    if n1 < 2 or n0 < 2:
        raise ValidationError("balance needs at least two units per arm")
    X = d.covariates
    ones = np.ones(d.n_units)
    rows = []
    for j, name in enumerate(d.covariate_names):
        x = X[:, j]
        s1, s0 = x[t].var(ddof=1), x[~t].var(ddof=1)
        raw, const = _asd(x, z, ones, s1, s0, n1, n0)
        adj = None
        if w is not None:
            adj, _ = _asd(x, z, w, s1, s0, n1, n0)
        rows.append(BalanceRow(name, raw, adj, const))
    return BalanceReport(tuple(rows), method)


def write_balance_csv(reports, path, comment: Optional[str] = None):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["covariate", "method", "asd_unweighted", "asd_adjusted", "constant"])
        for rep in reports:
            for r in rep.rows:
                w.writerow([r.covariate, rep.method, repr(r.asd_unweighted),
                            "" if r.asd_adjusted is None else repr(r.asd_adjusted), int(r.constant)])


def write_balance_long_csv(reports, path, comment: Optional[str] = None):
    """Box-plot-ready ``covariate, method, asd`` rows."""
    seen = set()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["covariate", "method", "asd"])
        for rep in reports:
            for cov, method, asd in rep.long_rows():
                if (cov, method) not in seen:
                    seen.add((cov, method))
                    w.writerow([cov, method, repr(asd)])


def chi2_sf(q: float, dof: int) -> float:
    """Upper tail of chi-square(dof), via the regularized upper incomplete gamma."""
    if dof <= 0:
        return 1.0
    return float(gammaincc(dof / 2.0, max(q, 0.0) / 2.0))


@dataclass(frozen=True, eq=False)
class UnconfoundednessTest:
    q_stat: float
    dof: int
    p_value: float
    l_used: int
    xi_1: np.ndarray
    xi_0: np.ndarray
    s_k: np.ndarray
    cv_l: tuple = ()
    rank_deficient: bool = False

    def to_dict(self) -> dict:
        return {"l": self.l_used, "k": self.dof, "Q": self.q_stat, "p_value": self.p_value,
                "cv_l_treated": self.cv_l[0] if self.cv_l else None,
                "cv_l_control": self.cv_l[1] if self.cv_l else None,
                "rank_deficient": self.rank_deficient}

    def to_json(self, path, **extra):
        Path(path).write_text(json.dumps({**extra, **self.to_dict()}, indent=2) + "\n")


def unconfoundedness_q_test(d: Dataset, l_override: Optional[int] = None,
                            l_grid=DEFAULT_L_GRID, scaling="sd", rank_tol: float = 1e-10,
                            vcov: str = "hc3") -> UnconfoundednessTest:
    """Wald test that the lagged-outcome series coefficients agree across arms.

    Each arm regresses the lagged outcome on the remaining covariates at a
    common order: the larger of the two arms' LOOCV choices unless
    ``l_override`` is given. Both arms share one basis scaling (full-sample
    SDs) so their coefficients are comparable. ``S_k`` is the sum of the two
    robust covariance matrices, HC3 by default: with HC0 the test over-rejects
    once high powers create units with leverage near 1. A singular ``S_k`` is pseudo-inverted and the
    degrees of freedom drop to its numerical rank. Exact fits in both arms
    leave ``S_k`` at rounding level, which counts as rank zero (Q = 0).
    """
    if d.lagged_outcome is None:
        raise ConfigurationError("the Q-test needs a lagged outcome column")
    pseudo = d.replace(outcome=d.lagged_outcome, lagged_outcome=None)
    sc = continuous_scales(d.covariates_continuous) if scaling == "sd" else scaling
    treated = pseudo.take(pseudo.treatment == 1)
    control = pseudo.take(pseudo.treatment == 0)
    if l_override is not None:
        l, cv_l = l_override, ()
    else:
        cv_l = (loocv_mse(treated, l_grid, sc).selected_l, loocv_mse(control, l_grid, sc).selected_l)
        l = max(cv_l)
    spec = BasisSpec.for_dataset(d, l)
    f1 = fit_ols(treated, spec, sc, vcov)
    f0 = fit_ols(control, spec, sc, vcov)
    diff = f1.coefficients - f0.coefficients
    S = f1.robust_vcov + f0.robust_vcov
    u, sv, vt = np.linalg.svd(S)
    # directions whose standard error is below the resolution of the
    # coefficients themselves carry only rounding noise
    scale = max(np.abs(f1.coefficients).max(), np.abs(f0.coefficients).max(), 1e-300)
    keep = (sv > rank_tol * sv[0]) & (sv > (1e-10 * scale) ** 2)
    rank = int(keep.sum())
    proj = u[:, keep].T @ diff
    q = float(np.sum(proj ** 2 / sv[keep]))
    return UnconfoundednessTest(q, rank, chi2_sf(q, rank), l, f1.coefficients, f0.coefficients,
                                S, cv_l, rank < spec.k)
