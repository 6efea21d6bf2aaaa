import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mpost.errors import BatchFailure, DegenerateDraws, InsufficientDraws
from mpost.stats import (CoverageResult, Scenario, coverage_experiment, credible_interval,
                         density_level, kde, kde2d, ks_two_sample, silverman_bandwidth)


def test_credible_interval_examples(rng):
    ci = credible_interval(np.linspace(0, 1, 101), 0.95)
    assert ci.lower == pytest.approx(0.025) and ci.upper == pytest.approx(0.975)
    c = credible_interval(np.full(10, 3.3))
    assert c.lower == c.upper == 3.3
    z = credible_interval(rng.standard_normal(10**6), 0.95)
    q = stats.norm.ppf(0.975)
    assert abs(z.lower + q) < 0.01 and abs(z.upper - q) < 0.01
    with pytest.raises(InsufficientDraws):
        credible_interval([1.0])
    with pytest.raises(ValueError):
        credible_interval([1.0, 2.0], 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=200))
def test_interval_monotone_in_level(x):
    a, b = credible_interval(x, 0.95), credible_interval(x, 0.99)
    assert b.lower <= a.lower <= a.upper <= b.upper


def test_kde_against_normal():
    # stratified normal sample: removes Monte Carlo noise (sd ~0.0035 at the
    # mode for B = 1e5), leaving the smoothing bias
    B = 10**5
    x = stats.norm.ppf((np.arange(B) + 0.5) / B)
    grid = np.linspace(-4, 4, 201)
    assert np.max(np.abs(kde(x, grid) - stats.norm.pdf(grid))) < 0.01


def test_kde_matches_scipy(rng):
    x = rng.standard_normal(3000)
    h = silverman_bandwidth(x)
    ref = stats.gaussian_kde(x, bw_method=h / x.std(ddof=1))
    grid = np.linspace(-4, 4, 101)
    assert np.allclose(kde(x, grid), ref(grid), rtol=1e-10, atol=1e-14)


def test_kde_integrates_to_one(rng):
    x = rng.exponential(size=5000)
    m, s = x.mean(), x.std()
    grid = np.linspace(m - 6 * s, m + 6 * s, 4001)
    assert abs(np.trapezoid(kde(x, grid), grid) - 1) < 0.01


def test_kde_two_point_symmetry():
    x = np.r_[np.zeros(50), np.ones(50)]
    grid = np.linspace(-1, 2, 301)
    d = kde(x, grid)
    assert np.allclose(d, d[::-1], atol=1e-10)
    assert d[100] > d[150] < d[200]   # modes at 0 and 1, dip at 0.5


def test_kde_errors():
    with pytest.raises(DegenerateDraws):
        kde(np.ones(20), [0.0])
    with pytest.raises(InsufficientDraws):
        kde(np.arange(5.0), [0.0])


def test_silverman_formula(rng):
    x = rng.standard_normal(1000)
    iqr = np.subtract(*np.quantile(x, [0.75, 0.25]))
    h = 0.9 * min(x.std(ddof=1), iqr / 1.34) * 1000 ** -0.2
    assert silverman_bandwidth(x) == pytest.approx(h)


def test_ks_examples(rng):
    a = rng.standard_normal(100)
    assert ks_two_sample(a, a) == 0
    assert ks_two_sample([0, 1], [2, 3]) == 1
    fails = 0
    for _ in range(20):
        d = ks_two_sample(rng.standard_normal(50_000), rng.standard_normal(50_000))
        fails += d >= 1.628 * np.sqrt(2 / 50_000)
    assert fails <= 2


def test_kde2d_level(rng):
    d = rng.standard_normal((4000, 2))
    g = np.linspace(-4, 4, 81)
    dens = kde2d(d, g, g)
    assert abs(dens.sum() * (g[1] - g[0]) ** 2 - 1) < 0.01
    lvl = density_level(d, 0.95)
    # for a standard bivariate normal the 95% region has density exp(-chi2_2(.95)/2)/(2 pi)
    assert lvl == pytest.approx(np.exp(-stats.chi2.ppf(0.95, 2) / 2) / (2 * np.pi), rel=0.15)


# ---- coverage -----------------------------------------------------------------------

def test_coverage_normal_known_variance():
    sc = Scenario("normal_mean", [0.3], 500, repeats=400, draws_B=1000, trunc_extra=100,
                  seed=5)
    res = coverage_experiment(sc)
    assert abs(res.coverage[0] - 0.95) <= 4 * np.sqrt(0.95 * 0.05 / 400)
    assert res.mean_length[0] == pytest.approx(2 * 1.96 / np.sqrt(500), rel=0.03)


def test_coverage_deterministic_and_thread_independent(tmp_path):
    sc = Scenario("exponential", [2.0], 30, repeats=20, draws_B=200, trunc_extra=30, seed=8)
    a = coverage_experiment(sc, threads=1)
    b = coverage_experiment(sc, threads=3)
    assert np.array_equal(a.table(), b.table())
    a.to_csv(tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "parameter,coverage,coverage_se,mean_length,length_se"
    assert lines[1].startswith("scale,")


def test_coverage_standard_errors():
    sc = Scenario("exponential", [1.0], 20, repeats=50, draws_B=100, trunc_extra=20, seed=1)
    r = coverage_experiment(sc)
    c = r.coverage[0]
    assert r.coverage_se[0] == pytest.approx(np.sqrt(c * (1 - c) / 50))
    L = r.per_repeat["length"][:, 0]
    assert r.length_se[0] == pytest.approx(L.std(ddof=1) / np.sqrt(50))


def test_coverage_fails_when_repeats_error():
    # with n = 1 every normal_meanvar estimate raises InsufficientData
    sc = Scenario("normal_meanvar", [0.0, 1.0], 1, repeats=10, draws_B=10, trunc_extra=5)
    with pytest.raises(BatchFailure):
        coverage_experiment(sc)


def test_scenario_dimension():
    theta = [0, 0, 0, 1, 1, 1, 0, 0, 0]
    assert Scenario("mvnormal", theta, 10).model().d == 3
    with pytest.raises(ValueError):
        Scenario("mvnormal", [0.0, 1.0, 1.0], 10).model()


def _ecdf_gap(a, b):
    pts = np.concatenate([a, b])
    fa = np.array([np.mean(a <= p) for p in pts])
    fb = np.array([np.mean(b <= p) for p in pts])
    return float(np.max(np.abs(fa - fb)))


@given(st.integers(0, 2**31), st.integers(2, 60), st.integers(2, 60))
@settings(max_examples=30, deadline=None)
def test_ks_matches_direct_ecdf_gap(seed, na, nb):
    r = np.random.default_rng(seed)
    a = np.round(r.standard_normal(na), 1)       # ties on purpose
    b = np.round(r.standard_normal(nb) + 0.3, 1)
    assert abs(ks_two_sample(a, b) - _ecdf_gap(a, b)) < 1e-12
