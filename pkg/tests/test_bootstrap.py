import numpy as np
import pytest

from patt.bootstrap import (BootstrapResult, Pipeline, bootstrap_many, bootstrap_se, estimate,
                            replicate_estimates, resample_indices, run_pipeline)
from patt.data import Dataset
from patt.errors import ConfigurationError

from conftest import make_dataset

PIPES = [Pipeline("reg", 2), Pipeline("wt", None, 3), Pipeline("dr", 2, 3),
         Pipeline("dr", 1, 2, 0.9), Pipeline("reg", 2, 2, 0.9)]


def test_matching_has_no_bootstrap():
    with pytest.raises(ConfigurationError, match="not valid"):
        Pipeline("mix", 1)


@pytest.mark.parametrize("kwargs", [dict(estimator="reg"), dict(estimator="wt"),
                                    dict(estimator="dr", outcome_l=1),
                                    dict(estimator="wt", propensity_l=2, trim_threshold=0.4)])
def test_incomplete_pipelines(kwargs):
    with pytest.raises(ConfigurationError):
        Pipeline(**kwargs)


def test_resamples_are_stratified(small_data):
    idx = resample_indices(small_data, np.random.SeedSequence(0).spawn(5))
    n1 = small_data.n_treated
    assert np.all(small_data.treatment[idx[:, :n1]] == 1)
    assert np.all(small_data.treatment[idx[:, n1:]] == 0)


def test_batched_replicates_match_full_pipeline():
    d = make_dataset(n=250, seed=6)
    idx = resample_indices(d, np.random.SeedSequence(1).spawn(4))
    batched = replicate_estimates(d, PIPES, idx)
    for r in range(idx.shape[0]):
        boot = d.take(idx[r])
        for j, p in enumerate(PIPES):
            assert batched[j, r] == pytest.approx(run_pipeline(boot, p).result.tau_hat, abs=1e-7)


def test_chunking_and_pipeline_order_do_not_matter(small_data):
    a = bootstrap_many(small_data, PIPES, b=60, seed=3, chunk=7)
    b = bootstrap_many(small_data, PIPES[::-1], b=60, seed=3, chunk=100)
    for p in PIPES:
        np.testing.assert_array_equal(a[p].replicates, b[p].replicates)
        assert a[p].std_error == b[p].std_error


def test_seed_sequence_reuse_is_deterministic(small_data):
    seq = np.random.SeedSequence(42)
    a = bootstrap_many(small_data, PIPES[:1], b=20, seed=seq)
    b = bootstrap_many(small_data, PIPES[:1], b=20, seed=seq)
    np.testing.assert_array_equal(a[PIPES[0]].replicates, b[PIPES[0]].replicates)


def test_constant_outcome_has_zero_se(small_data):
    d = small_data.replace(outcome=np.full(small_data.n_units, 3.0))
    for p in PIPES[:3]:
        se, ci = bootstrap_se(d, p, b=50, seed=0)
        assert se == pytest.approx(0.0, abs=1e-10)
        assert ci[0] == pytest.approx(ci[1], abs=1e-9)


def test_estimate_carries_provenance(small_data):
    res = estimate(small_data, Pipeline("dr", 2, 3), b=40, seed=1)
    assert res.std_error > 0
    assert res.meta["se_method"] == "stratified bootstrap"
    assert res.meta["bootstrap_b"] == 40 and res.meta["bootstrap_failed"] == 0


def test_se_stabilizes_with_more_replicates(dgp_draw):
    p = Pipeline("dr", 2, 5)
    se_1k = bootstrap_many(dgp_draw, [p], b=1000, seed=10)[p].std_error
    se_4k = bootstrap_many(dgp_draw, [p], b=4000, seed=11)[p].std_error
    assert abs(se_1k - se_4k) / se_4k < 0.15


def test_unreliable_flag():
    reps = np.r_[np.zeros(94), np.full(6, np.nan)]
    assert BootstrapResult(1.0, reps, 6).unreliable
    assert not BootstrapResult(1.0, np.r_[np.zeros(95), np.full(5, np.nan)], 5).unreliable


def test_failed_replicates_are_counted():
    # three distinct control covariate values: l=3 is singular in every replicate
    rng = np.random.default_rng(0)
    n = 60
    z = np.r_[np.ones(20, int), np.zeros(40, int)]
    x = np.r_[rng.normal(size=20), np.tile([0.0, 1.0, 2.0], 14)[:40]][:, None]
    d = Dataset(rng.normal(size=n), z, np.zeros((n, 0)), x)
    res = bootstrap_many(d, [Pipeline("reg", 3)], b=30, seed=0)[Pipeline("reg", 3)]
    assert res.n_failed == 30 and np.isnan(res.std_error)


def test_trimming_an_outlier_reduces_weighting_variance(dgp_draw):
    d = dgp_draw
    with_outlier = Dataset(np.r_[d.outcome, d.outcome.mean()], np.r_[d.treatment, 0],
                           np.r_[d.covariates_discrete, [[1.0]]],
                           np.r_[d.covariates_continuous, [[200.0]]],
                           discrete_names=d.discrete_names, continuous_names=d.continuous_names)
    trimmed = Pipeline("wt", None, 2, 0.99)
    plain = Pipeline("wt", None, 2)
    assert str(d.n_units) in run_pipeline(with_outlier, trimmed).discarded
    out = bootstrap_many(with_outlier, [trimmed, plain], b=200, seed=5)
    assert out[trimmed].std_error < out[plain].std_error
