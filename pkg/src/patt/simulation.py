"""Simulation design with a binary and a continuous covariate, and a Monte
Carlo harness reporting bias, RMSE and 95% coverage per estimator."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .basis import BasisSpec
from .bootstrap import DEFAULT_B, Pipeline, bootstrap_many, run_pipeline
from .data import Dataset
from .errors import ConfigurationError, PattError
from .estimators import MatchConfig, estimate_mix
from .propensity import DEFAULT_UNDERSMOOTH_L, loocv_mse_ps, undersmooth
from .series import DEFAULT_L_GRID, loocv_mse

log = logging.getLogger(__name__)

SCENARIOS = ("semiparametric", "linear", "dr-ps-misspec", "dr-po-misspec")
TABLE_ROWS = (
    ("reg", "reg", "semiparametric", "linear"),
    ("wt", "wt", "semiparametric", "linear"),
    ("mix", "mix", "semiparametric", "linear"),
    ("dr", "dr", "semiparametric", "linear"),
    ("dr (p.s.)", "dr", "dr-ps-misspec", None),
    ("dr (p.o.)", "dr", "dr-po-misspec", None),
)


@dataclass(frozen=True)
class DgpConfig:
    """X1 ~ Bernoulli(p_x1); X2 | X1 normal; logit e = a + b X1 + c X2^2;
    Y(z) = cubic-free quadratic in X2 plus X1 shift plus a shared noise term."""

    n_units: int = 1000
    p_x1: float = 0.25
    x2_means: tuple = (80.0, 20.0)
    x2_sd: float = 20.0
    ps_coeffs: tuple = (-2.0, 1.0, 0.0004)
    y0_coeffs: tuple = (-0.1, 0.1, 0.043, -0.00022)
    y1_coeffs: tuple = (0.0, 0.1, 0.043, -0.00012)
    noise_sd: float = 0.15
    seed: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.p_x1 < 1:
            raise ConfigurationError("p_x1 must lie in (0, 1)")
        if self.x2_sd <= 0 or self.noise_sd <= 0:
            raise ConfigurationError("standard deviations must be positive")
        if self.n_units < 2:
            raise ConfigurationError("n_units must be at least 2")

    def propensity(self, x1, x2):
        a, b, c = self.ps_coeffs
        return expit(a + b * x1 + c * x2 ** 2)

    def mu0(self, x1, x2):
        a, b, c, q = self.y0_coeffs
        return a + b * x1 + c * x2 + q * x2 ** 2

    def mu1(self, x1, x2):
        a, b, c, q = self.y1_coeffs
        return a + b * x1 + c * x2 + q * x2 ** 2


@dataclass(frozen=True, eq=False)
class SimulatedSample:
    data: Dataset
    y0: np.ndarray
    y1: np.ndarray
    propensity: np.ndarray

    def infeasible_patt(self) -> float:
        t = self.data.treatment == 1
        return float(np.mean(self.y1[t] - self.y0[t]))


def _covariates(cfg: DgpConfig, rng, n):
    x1 = (rng.random(n) < cfg.p_x1).astype(float)
    mean = np.where(x1 == 1, cfg.x2_means[0], cfg.x2_means[1])
    x2 = mean + cfg.x2_sd * rng.standard_normal(n)
    return x1, x2


def draw(cfg: DgpConfig, rng=None) -> SimulatedSample:
    """One sample with both potential outcomes retained."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n = cfg.n_units
    while True:
        x1, x2 = _covariates(cfg, rng, n)
        e = cfg.propensity(x1, x2)
        z = (rng.random(n) < e).astype(np.int8)
        eps = cfg.noise_sd * rng.standard_normal(n)
        if 0 < z.sum() < n:
            break
    y0 = cfg.mu0(x1, x2) + eps
    y1 = cfg.mu1(x1, x2) + eps
    d = Dataset(outcome=np.where(z == 1, y1, y0), treatment=z,
                covariates_discrete=x1[:, None], covariates_continuous=x2[:, None],
                discrete_names=("X1",), continuous_names=("X2",))
    return SimulatedSample(d, y0, y1, e)


def generate_sample(cfg: DgpConfig) -> Dataset:
    return draw(cfg).data


def true_patt(cfg: DgpConfig, n_oracle: int = 10 ** 7, chunk: int = 10 ** 6, seed=None) -> float:
    """Average noise-free effect ``mu1 - mu0`` over simulated treated units."""
    if n_oracle < 10 ** 5:
        raise ConfigurationError("n_oracle must be at least 1e5")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    total, count = 0.0, 0
    done = 0
    while done < n_oracle:
        m = min(chunk, n_oracle - done)
        x1, x2 = _covariates(cfg, rng, m)
        z = rng.random(m) < cfg.propensity(x1, x2)
        total += float(np.sum(cfg.mu1(x1[z], x2[z]) - cfg.mu0(x1[z], x2[z])))
        count += int(z.sum())
        done += m
    return total / count


# -- Monte Carlo ------------------------------------------------------------


@dataclass(frozen=True)
class McSettings:
    scenarios: tuple = SCENARIOS
    bootstrap_b: int = DEFAULT_B
    l_grid: tuple = DEFAULT_L_GRID
    undersmooth_l: int = DEFAULT_UNDERSMOOTH_L
    m: int = 6
    trim_threshold: Optional[float] = None


def _pipelines(scenario, l_out, l_ps, thr):
    if scenario == "semiparametric":
        return {"reg": Pipeline("reg", l_out, l_ps if thr else None, thr),
                "wt": Pipeline("wt", None, l_ps, thr),
                "dr": Pipeline("dr", l_out, l_ps, thr)}
    if scenario == "linear":
        return {"reg": Pipeline("reg", 1, 1 if thr else None, thr),
                "wt": Pipeline("wt", None, 1, thr),
                "dr": Pipeline("dr", 1, 1, thr)}
    if scenario == "dr-ps-misspec":
        return {"dr": Pipeline("dr", l_out, 1, thr)}
    if scenario == "dr-po-misspec":
        return {"dr": Pipeline("dr", 1, l_ps, thr)}
    raise ConfigurationError(f"unknown scenario {scenario!r}")


def run_replicate(cfg: DgpConfig, settings: McSettings, seq: np.random.SeedSequence) -> dict:
    """All scenario estimates for one simulated sample.

    Returns ``{(estimator, scenario): (tau_hat, std_error)}`` plus the
    selected orders under the key ``"orders"``.
    """
    data_seq, boot_seq = seq.spawn(2)
    sample = draw(cfg, np.random.default_rng(data_seq))
    d = sample.data
    l_out = loocv_mse(d.take(d.treatment == 0), settings.l_grid).selected_l
    l_sel = loocv_mse_ps(d, settings.l_grid).selected_l
    l_ps = undersmooth(BasisSpec.for_dataset(d, l_sel), max(settings.undersmooth_l, l_sel)).l
    thr = settings.trim_threshold
    plan = {(est, sc): p for sc in settings.scenarios
            for est, p in _pipelines(sc, l_out, l_ps, thr).items()}
    points = {key: run_pipeline(d, p) for key, p in plan.items()}
    boots = bootstrap_many(d, list(plan.values()), settings.bootstrap_b, boot_seq)
    out = {key: (points[key].result.tau_hat, boots[p].std_error) for key, p in plan.items()}
    mix_l = {"semiparametric": l_out, "linear": 1}
    for sc in settings.scenarios:
        if sc in mix_l:
            dd = points[("reg", sc)].data if thr else d
            res = estimate_mix(dd, MatchConfig(m=settings.m), mix_l[sc])
            out[("mix", sc)] = (res.tau_hat, res.std_error)
    out["orders"] = (l_out, l_sel, l_ps)
    return out


def _safe_replicate(args):
    cfg, settings, seq, r = args
    try:
        return r, run_replicate(cfg, settings, seq), None
    except (PattError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return r, None, f"{type(exc).__name__}: {exc}"


@dataclass(frozen=True)
class Cell:
    bias: float
    rmse: float
    coverage: float
    n: int


@dataclass
class SimulationReport:
    cells: dict
    replicates: int
    n_failed: int
    true_patt: float
    seed: Optional[int]
    estimates: dict = field(default_factory=dict, repr=False)
    orders: list = field(default_factory=list, repr=False)
    failures: list = field(default_factory=list, repr=False)

    def cell(self, estimator: str, scenario: str) -> Cell:
        return self.cells[(estimator, scenario)]

    def table_rows(self):
        rows = []
        for label, est, semi, lin in TABLE_ROWS:
            row = [label]
            for sc in (semi, lin):
                c = self.cells.get((est, sc)) if sc else None
                row += [None, None, None] if c is None else [c.bias, c.rmse, c.coverage]
            if any(v is not None for v in row[1:]):
                rows.append(row)
        return rows

    def to_csv(self, path, comment: Optional[str] = None):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["estimator", "semiparametric_bias", "semiparametric_rmse",
                        "semiparametric_coverage", "linear_bias", "linear_rmse", "linear_coverage"])
            for row in self.table_rows():
                w.writerow([row[0]] + ["" if v is None else f"{v:.6f}" for v in row[1:]])

    def to_dict(self) -> dict:
        return {
            "replicates": self.replicates,
            "n_failed": self.n_failed,
            "failure_rate": self.n_failed / self.replicates if self.replicates else 0.0,
            "true_patt": self.true_patt,
            "seed": self.seed,
            "cells": [{"estimator": e, "scenario": s, **asdict(c)}
                      for (e, s), c in sorted(self.cells.items())],
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def aggregate(estimates: dict, truth: float) -> dict:
    """``bias = |mean - truth|``, RMSE, and the share of intervals covering ``truth``."""
    cells = {}
    for key, vals in estimates.items():
        arr = np.asarray(vals, dtype=float)
        tau, se = arr[:, 0], arr[:, 1]
        ok = np.isfinite(tau) & np.isfinite(se)
        tau, se = tau[ok], se[ok]
        if tau.size == 0:
            continue
        err = tau - truth
        cover = np.abs(err) <= 1.96 * se
        cells[key] = Cell(float(abs(err.mean())), float(np.sqrt(np.mean(err ** 2))),
                          float(cover.mean()), int(tau.size))
    return cells


def run_monte_carlo(cfg: DgpConfig, replicates: int = 500,
                    scenarios: Sequence[str] = SCENARIOS,
                    settings: Optional[McSettings] = None, threads: int = 1,
                    truth: Optional[float] = None, n_oracle: int = 10 ** 7) -> SimulationReport:
    """Repeat draw-and-estimate ``replicates`` times and summarize.

    Replicate ``r`` uses child ``r`` of the master seed sequence, so the report
    is identical for any ``threads``. ``truth`` defaults to :func:`true_patt`
    evaluated with ``n_oracle`` draws.
    """
    if replicates < 2:
        raise ConfigurationError("at least two replicates are required")
    bad = set(scenarios) - set(SCENARIOS)
    if bad:
        raise ConfigurationError(f"unknown scenarios {sorted(bad)}")
    settings = settings or McSettings()
    settings = McSettings(**{**asdict(settings), "scenarios": tuple(scenarios)})
    master = np.random.SeedSequence(cfg.seed)
    if truth is None:
        truth = true_patt(cfg, n_oracle, seed=np.random.default_rng(master.spawn(1)[0]))
    seqs = np.random.SeedSequence(master.entropy, spawn_key=(1,)).spawn(replicates)
    jobs = [(cfg, settings, seqs[r], r) for r in range(replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_safe_replicate, jobs, chunksize=max(1, replicates // (4 * threads))))
    else:
        results = [_safe_replicate(j) for j in jobs]
    results.sort(key=lambda t: t[0])
    estimates, orders, failures = {}, [], []
    for r, out, err in results:
        if out is None:
            log.warning("replicate %d failed: %s", r, err)
            failures.append((r, err))
            continue
        orders.append(out.pop("orders"))
        for key, val in out.items():
            estimates.setdefault(key, []).append(val)
    cells = aggregate(estimates, truth)
    return SimulationReport(cells, replicates, len(failures), float(truth), cfg.seed,
                            {k: np.asarray(v) for k, v in estimates.items()}, orders, failures)
