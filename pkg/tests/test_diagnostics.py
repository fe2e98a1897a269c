import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from patt.data import Dataset
from patt.diagnostics import (balance_asd, chi2_sf, unconfoundedness_q_test, write_balance_csv,
                              write_balance_long_csv)
from patt.errors import ConfigurationError
from patt.estimators import AttWeights, MatchConfig, match_controls
from patt.simulation import DgpConfig, generate_sample

from conftest import make_dataset


def with_lag(d, rng, shift=0.0):
    """Lagged outcome from one common surface; ``shift`` is added for the treated."""
    x1 = d.covariates_discrete[:, 0]
    x2 = d.covariates_continuous[:, 0] / 20
    lag = 1 + 0.5 * x1 + x2 - 0.2 * x2 ** 2 + rng.normal(scale=0.5 + 0.1 * np.abs(x2), size=d.n_units)
    return d.replace(lagged_outcome=lag + shift * np.std(lag) * d.treatment)


def test_raw_asd_is_welch_statistic(small_data):
    rep = balance_asd(small_data)
    t = small_data.treatment == 1
    for j, name in enumerate(small_data.covariate_names):
        x = small_data.covariates[:, j]
        welch = stats.ttest_ind(x[t], x[~t], equal_var=False).statistic
        assert rep.asd(name, adjusted=False) == pytest.approx(abs(welch), rel=1e-12)
    assert rep.method == "raw"


def test_identical_arms_have_zero_asd():
    d = make_dataset(n=50)
    both = Dataset(np.r_[d.outcome, d.outcome], np.r_[np.ones(50, int), np.zeros(50, int)],
                   np.r_[d.covariates_discrete, d.covariates_discrete],
                   np.r_[d.covariates_continuous, d.covariates_continuous])
    rep = balance_asd(both, np.ones(100))
    assert all(r.asd_unweighted == 0 and r.asd_adjusted == 0 for r in rep.rows)


def test_constant_covariate_is_flagged():
    d = make_dataset(n=40)
    d = d.replace(covariates_discrete=np.ones((40, 1)))
    row = balance_asd(d).rows[0]
    assert row.constant and row.asd_unweighted == 0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10 ** 6), a=st.floats(-50, 50), b=st.floats(-20, 20).filter(lambda v: abs(v) > 0.05))
def test_asd_affine_invariance(seed, a, b):
    d = make_dataset(n=80, seed=seed)
    w = np.random.default_rng(seed).random(80) + 0.1
    base = balance_asd(d, w).rows[-1]
    moved = balance_asd(d.replace(covariates_continuous=a + b * d.covariates_continuous), w).rows[-1]
    assert moved.asd_unweighted == pytest.approx(base.asd_unweighted, abs=1e-8)
    assert moved.asd_adjusted == pytest.approx(base.asd_adjusted, abs=1e-8)


def test_weight_length_checked(small_data):
    with pytest.raises(ConfigurationError):
        balance_asd(small_data, np.ones(3))


def test_matched_mode_and_csv_outputs(tmp_path, dgp_draw):
    match = match_controls(dgp_draw, MatchConfig())
    reps = [balance_asd(dgp_draw),
            balance_asd(dgp_draw, AttWeights.from_scores(dgp_draw.treatment,
                                                         np.full(dgp_draw.n_units, 0.3))),
            balance_asd(dgp_draw, match.multiplicity_weights(dgp_draw))]
    assert [r.method for r in reps] == ["raw", "att_weights", "matched"]
    assert reps[2].asd("X2") < reps[0].asd("X2", adjusted=False)
    write_balance_csv(reps, tmp_path / "b.csv", "seed=1")
    write_balance_long_csv(reps, tmp_path / "l.csv", "seed=1")
    rows = list(csv.reader(open(tmp_path / "l.csv")))
    assert rows[0] == ["# seed=1"]
    assert rows[1] == ["covariate", "method", "asd"]
    assert len(rows) == 2 + 2 * 3   # raw rows written once


@pytest.mark.parametrize("dof", [1, 4, 17])
def test_chi2_tail_matches_scipy(dof):
    for q in (0.0, 0.5, 3.0, 20.0, 80.0):
        assert chi2_sf(q, dof) == pytest.approx(stats.chi2.sf(q, dof), rel=1e-12, abs=1e-300)


def test_p_value_decreases_in_q():
    qs = np.linspace(0, 50, 30)
    ps = [chi2_sf(q, 5) for q in qs]
    assert np.all(np.diff(ps) < 0)


def test_duplicated_arms_give_zero_q(dgp_draw):
    d = with_lag(dgp_draw, np.random.default_rng(0))
    ctrl = d.take(d.treatment == 0)
    n = ctrl.n_units
    dup = Dataset(np.r_[ctrl.outcome, ctrl.outcome], np.r_[np.ones(n, int), np.zeros(n, int)],
                  np.r_[ctrl.covariates_discrete, ctrl.covariates_discrete],
                  np.r_[ctrl.covariates_continuous, ctrl.covariates_continuous],
                  lagged_outcome=np.r_[ctrl.lagged_outcome, ctrl.lagged_outcome])
    test = unconfoundedness_q_test(dup)
    assert test.q_stat == 0.0 and test.p_value == 1.0
    np.testing.assert_array_equal(test.xi_1, test.xi_0)


def test_q_invariant_to_basis_scaling(dgp_draw):
    d = with_lag(dgp_draw, np.random.default_rng(1))
    a = unconfoundedness_q_test(d, l_override=3, scaling="sd")
    b = unconfoundedness_q_test(d, l_override=3, scaling=np.array([7.0]))
    assert a.q_stat == pytest.approx(b.q_stat, rel=1e-6)
    assert a.dof == b.dof == 1 + 1 + 3


def test_common_order_is_larger_cv_choice(dgp_draw):
    d = with_lag(dgp_draw, np.random.default_rng(2))
    test = unconfoundedness_q_test(d)
    assert test.l_used == max(test.cv_l)
    assert set(test.to_dict()) == {"l", "k", "Q", "p_value", "cv_l_treated", "cv_l_control",
                                   "rank_deficient"}


def test_exact_fit_gives_rank_zero():
    d = make_dataset(n=80)
    x = d.covariates_continuous[:, 0]
    d = d.replace(lagged_outcome=1 + x - x ** 2)
    test = unconfoundedness_q_test(d, l_override=2)
    assert test.rank_deficient and test.dof == 0
    assert test.q_stat == 0.0 and test.p_value == 1.0


def test_requires_lagged_outcome(small_data):
    with pytest.raises(ConfigurationError):
        unconfoundedness_q_test(small_data)


def test_power_against_treated_shift():
    rng = np.random.default_rng(7)
    rejections = 0
    for r in range(60):
        d = with_lag(generate_sample(DgpConfig(seed=900 + r)), rng, shift=1.0)
        rejections += unconfoundedness_q_test(d).p_value < 0.05
    assert rejections / 60 > 0.9
