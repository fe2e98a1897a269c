import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit

from patt.errors import ConfigurationError
from patt.simulation import (DgpConfig, McSettings, aggregate, draw, generate_sample,
                             run_monte_carlo, true_patt)


def quadrature_patt(cfg):
    """E[mu1 - mu0 | Z = 1] by integrating over the X2 mixture."""
    num = den = 0.0
    for x1, px in ((1.0, cfg.p_x1), (0.0, 1 - cfg.p_x1)):
        mean = cfg.x2_means[0] if x1 else cfg.x2_means[1]
        dens = stats.norm(mean, cfg.x2_sd).pdf
        lo, hi = mean - 12 * cfg.x2_sd, mean + 12 * cfg.x2_sd
        e = lambda x: cfg.propensity(x1, x)
        tau = lambda x: cfg.mu1(x1, x) - cfg.mu0(x1, x)
        num += px * integrate.quad(lambda x: e(x) * tau(x) * dens(x), lo, hi, epsabs=1e-12)[0]
        den += px * integrate.quad(lambda x: e(x) * dens(x), lo, hi, epsabs=1e-12)[0]
    return num / den


def test_surfaces_at_quoted_point():
    cfg = DgpConfig()
    assert cfg.mu0(0.0, 20.0) == pytest.approx(0.672, abs=1e-12)
    assert cfg.mu1(0.0, 20.0) == pytest.approx(0.812, abs=1e-12)


@pytest.mark.parametrize("x1,x2,expected", [(0.0, 20.0, expit(-1.84)), (1.0, 80.0, expit(1.56))])
def test_score_at_quoted_points(x1, x2, expected):
    assert DgpConfig().propensity(x1, x2) == pytest.approx(expected, abs=1e-15)


def test_bernoulli_share():
    d = generate_sample(DgpConfig(n_units=10 ** 6, seed=4))
    assert abs(d.covariates_discrete.mean() - 0.25) < 0.002


def test_x2_conditional_moments():
    s = draw(DgpConfig(n_units=200_000, seed=8))
    x1 = s.data.covariates_discrete[:, 0] == 1
    x2 = s.data.covariates_continuous[:, 0]
    assert x2[x1].mean() == pytest.approx(80, abs=0.3)
    assert x2[~x1].std() == pytest.approx(20, abs=0.3)


def test_observed_outcome_is_the_realized_potential_outcome():
    s = draw(DgpConfig(seed=3))
    z = s.data.treatment
    np.testing.assert_array_equal(s.data.outcome, np.where(z == 1, s.y1, s.y0))


def test_truth_matches_quadrature():
    cfg = DgpConfig(seed=12)
    assert true_patt(cfg, n_oracle=4 * 10 ** 6) == pytest.approx(quadrature_patt(cfg), abs=0.002)


def test_identical_surfaces_give_zero_truth():
    cfg = DgpConfig(y1_coeffs=DgpConfig().y0_coeffs, seed=1)
    assert true_patt(cfg, n_oracle=10 ** 5) == 0.0


def test_constant_score_gives_unconditional_effect():
    cfg = DgpConfig(ps_coeffs=(-1.0, 0.0, 0.0), seed=2)
    # with no selection the treated are a random subsample
    assert quadrature_patt(cfg) == pytest.approx(
        0.1 + 1e-4 * (0.25 * (80 ** 2 + 400) + 0.75 * (20 ** 2 + 400)), abs=1e-9)
    assert true_patt(cfg, n_oracle=4 * 10 ** 6) == pytest.approx(quadrature_patt(cfg), abs=0.002)


def test_infeasible_estimator_approaches_truth():
    cfg = DgpConfig(n_units=400_000, seed=5)
    assert draw(cfg).infeasible_patt() == pytest.approx(quadrature_patt(cfg), abs=0.005)


def test_oracle_size_floor():
    with pytest.raises(ConfigurationError):
        true_patt(DgpConfig(), n_oracle=1000)


@pytest.mark.parametrize("kwargs", [dict(p_x1=1.0), dict(x2_sd=0.0), dict(noise_sd=-1.0)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        DgpConfig(**kwargs)


SMALL = McSettings(bootstrap_b=20)


def test_two_replicate_smoke():
    rep = run_monte_carlo(DgpConfig(seed=1), 2, settings=SMALL, truth=0.6)
    assert rep.replicates == 2 and rep.n_failed == 0 and rep.true_patt == 0.6
    labels = [r[0] for r in rep.table_rows()]
    assert labels == ["reg", "wt", "mix", "dr", "dr (p.s.)", "dr (p.o.)"]
    for c in rep.cells.values():
        assert c.rmse ** 2 >= c.bias ** 2 - 1e-15
        assert 0 <= c.coverage <= 1 and c.n == 2


def test_report_is_reproducible_across_worker_counts(tmp_path):
    cfg = DgpConfig(n_units=400, seed=9)
    a = run_monte_carlo(cfg, 3, ["semiparametric", "dr-po-misspec"], SMALL, 1, truth=0.6)
    b = run_monte_carlo(cfg, 3, ["semiparametric", "dr-po-misspec"], SMALL, 2, truth=0.6)
    assert a.to_dict() == b.to_dict()
    for k in a.estimates:
        np.testing.assert_array_equal(a.estimates[k], b.estimates[k])
    a.to_csv(tmp_path / "a.csv", "seed=9")
    b.to_csv(tmp_path / "b.csv", "seed=9")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_unknown_scenario():
    with pytest.raises(ConfigurationError):
        run_monte_carlo(DgpConfig(seed=1), 2, ["quadratic"], SMALL, truth=0.6)


def test_aggregate_by_hand():
    cells = aggregate({("dr", "linear"): [(1.0, 0.1), (1.4, 0.1), (np.nan, 0.1)]}, truth=1.1)
    c = cells[("dr", "linear")]
    assert c.n == 2
    assert c.bias == pytest.approx(0.1)
    assert c.rmse == pytest.approx(np.sqrt((0.01 + 0.09) / 2))
    assert c.coverage == 0.5
