import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from mpost.errors import DomainError, SupportError
from mpost.models import (ExponentialScale, MomentBound, MultivariateNormal, NormalKnownVar,
                          NormalMeanVar, NormalVarianceOnly, StudentTLocation, make_family)

ALL = [ExponentialScale(), NormalKnownVar(2.0), NormalVarianceOnly(), StudentTLocation(5),
       NormalMeanVar(), MultivariateNormal(2), MultivariateNormal(3)]


# ---- score ----------------------------------------------------------------------

def test_score_examples():
    assert ExponentialScale().score(2.0, 2.0)[0] == 0.0
    assert NormalVarianceOnly().score(2.0, 3.0)[0] == pytest.approx(0.875)
    assert StudentTLocation(5).score(0.0, 0.0)[0] == 0.0


def test_score_errors():
    with pytest.raises(DomainError):
        ExponentialScale().score(-1.0, 1.0)
    with pytest.raises(SupportError):
        ExponentialScale().score(1.0, -0.5)
    with pytest.raises(DomainError):
        NormalVarianceOnly().score(0.0, 1.0)
    with pytest.raises(DomainError):
        NormalMeanVar().score([0.0, -1.0], 1.0)
    with pytest.raises(DomainError):
        MultivariateNormal(2).score([0, 0, 1, 1, 2.0], [0, 0])   # |s12| > 1


def _numeric_score(fam, theta, y, h=1e-6):
    g = np.zeros(fam.dim)
    for j in range(fam.dim):
        e = np.zeros(fam.dim)
        e[j] = h
        g[j] = (fam.log_density(theta + e, y) - fam.log_density(theta - e, y)) / (2 * h)
    return g


@pytest.mark.parametrize("fam,theta,y", [
    (ExponentialScale(), [1.7], 0.4),
    (NormalKnownVar(2.0), [0.3], -1.1),
    (NormalVarianceOnly(), [1.3], 0.9),
    (StudentTLocation(4), [0.5], 2.0),
    (NormalMeanVar(), [0.2, 1.5], -0.7),
    (MultivariateNormal(2), [-0.5, 1, 1, 0.5, 0.7], [0.3, 0.1]),
    (MultivariateNormal(3), [0, 1, 2, 2, 1, 3, 0.5, 0.2, -0.3], [0.3, 0.1, -1.0]),
])
def test_score_is_gradient_of_log_density(fam, theta, y):
    theta = np.array(theta, dtype=float)
    assert np.allclose(fam.score(theta, y), _numeric_score(fam, theta, y), rtol=1e-6,
                       atol=1e-7)


# ---- Fisher information ----------------------------------------------------------

def test_fisher_inverse_examples():
    assert NormalVarianceOnly().fisher_inverse(3.0)[0, 0] == pytest.approx(18.0)
    # oracle: 1 / quad E{s^2} under the exponential density, frozen
    assert ExponentialScale().fisher_inverse(2.0)[0, 0] == pytest.approx(3.9999999999999494,
                                                                        rel=1e-12)
    fi = MultivariateNormal(2).fisher_inverse([0, 0, 1, 1, 0.0])
    expect = np.zeros((5, 5))
    expect[:2, :2] = np.eye(2)
    expect[2:, 2:] = 2 * np.array([[1, 0, 0], [0, 1, 0], [0, 0, 0.5]])
    assert np.allclose(fi, expect)


def test_exponential_fisher_by_quadrature():
    for th in (0.5, 2.0, 7.0):
        info = integrate.quad(lambda y: (-1 / th + y / th**2) ** 2 * np.exp(-y / th) / th,
                              0, np.inf)[0]
        assert ExponentialScale().fisher(th)[0, 0] == pytest.approx(info, rel=1e-8)


def test_mvn_block_matches_paper_pattern():
    s1, s2, s12 = 1.3, 0.8, 0.4
    J = MultivariateNormal(2).fisher_inverse([0, 0, s1, s2, s12])[2:, 2:]
    expect = 2 * np.array([[s1**2, s12**2, s1 * s12],
                           [s12**2, s2**2, s2 * s12],
                           [s1 * s12, s2 * s12, (s1 * s2 + s12**2) / 2]])
    assert np.allclose(J, expect)


@pytest.mark.parametrize("fam", ALL, ids=lambda f: repr(f))
def test_fisher_inverse_symmetric_pd(fam):
    from mpost.diagnostics import default_grid
    for theta in default_grid(fam):
        M = fam.fisher_inverse(theta)
        assert np.allclose(M, M.T)
        assert np.linalg.eigvalsh(M)[0] > 0


# ---- natural gradient -------------------------------------------------------------

def test_natural_gradient_examples():
    assert ExponentialScale().natural_gradient(1.0, 2.0)[0] == 1.0
    assert StudentTLocation(5).natural_gradient(0.0, 1.0)[0] == pytest.approx(4 / 3)
    assert np.allclose(NormalMeanVar().natural_gradient([0, 1], 2.0), [2, 3])


@pytest.mark.parametrize("fam", ALL, ids=lambda f: repr(f))
def test_closed_form_matches_composition(fam, rng):
    from mpost.diagnostics import default_grid
    for theta in default_grid(fam):
        y = fam.simulate(np.broadcast_to(theta, (50, fam.dim)), rng)
        th = np.broadcast_to(theta, (50, fam.dim))
        a = fam.natural_gradient(th, y)
        b = fam.natural_gradient_composed(th, y)
        assert np.allclose(a, b, rtol=1e-10, atol=1e-10 * np.abs(a).max())


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 100), st.floats(0, 1e3))
def test_exponential_closed_form_property(theta, y):
    f = ExponentialScale()
    a, b = f.natural_gradient(theta, y), f.natural_gradient_composed(theta, y)
    assert np.allclose(a, b, rtol=1e-10, atol=1e-12 * max(theta, y))


@settings(max_examples=60, deadline=None)
@given(st.floats(-50, 50), st.floats(0.05, 20), st.floats(-50, 50))
def test_meanvar_closed_form_property(mu, s2, y):
    f = NormalMeanVar()
    a, b = f.natural_gradient([mu, s2], y), f.natural_gradient_composed([mu, s2], y)
    assert np.allclose(a, b, rtol=1e-10, atol=1e-10 * (1 + np.abs(a).max()))


@settings(max_examples=40, deadline=None)
@given(st.floats(1.1, 50), st.floats(-20, 20), st.floats(-20, 20))
def test_student_t_update_is_bounded(nu, theta, y):
    z = StudentTLocation(nu).natural_gradient(theta, y)[0]
    assert z**4 <= (nu + 3) ** 4 / (16 * nu**2) * (1 + 1e-12)


# ---- simulation --------------------------------------------------------------------

def test_simulation_moments(rng):
    m = ExponentialScale().draw(np.ones((10**6, 1)), rng)
    assert abs(m.mean() - 1) < 0.004
    v = NormalVarianceOnly().draw(np.full((10**6, 1), 2.0), rng)
    assert abs(v.var() - 2) < 0.02
    t = StudentTLocation(5).draw(np.full((10**6, 1), 3.0), rng)
    assert abs(np.median(t) - 3) < 0.01


def test_mvn_simulation_covariance(rng):
    fam = MultivariateNormal(2)
    theta = np.array([-0.5, 1, 1, 0.5, 0.7])
    y = fam.draw(np.broadcast_to(theta, (200_000, 5)), rng)
    assert np.allclose(y.mean(axis=0), theta[:2], atol=0.01)
    assert np.allclose(np.cov(y.T), [[1, 0.7], [0.7, 0.5]], atol=0.015)


def test_log_density_matches_scipy():
    assert ExponentialScale().log_density(2.0, 1.5) == pytest.approx(
        stats.expon(scale=2).logpdf(1.5))
    assert StudentTLocation(4).log_density(1.0, 2.5) == pytest.approx(
        stats.t(4, loc=1).logpdf(2.5))
    th = [-0.5, 1, 1, 0.5, 0.7]
    assert MultivariateNormal(2).log_density(th, [0.1, 0.2]) == pytest.approx(
        stats.multivariate_normal([-0.5, 1], [[1, 0.7], [0.7, 0.5]]).logpdf([0.1, 0.2]))


# ---- moment bounds -----------------------------------------------------------------

def test_moment_bound_constants():
    assert ExponentialScale().moment_bound() == MomentBound(0, 9, exact=True)
    assert NormalVarianceOnly().moment_bound() == MomentBound(0, 60, exact=True)
    b = StudentTLocation(5).moment_bound()
    assert b.B == pytest.approx(10.24) and b.C == 0 and not b.exact
    assert NormalKnownVar().moment_bound() is None
    assert MultivariateNormal(2).moment_bound() is None
    with pytest.raises(ValueError):
        MomentBound(0, 0)


def test_meanvar_bound_dominates_exact_moment():
    b = NormalMeanVar().moment_bound()
    for mu in (-3, 0, 2):
        for s2 in np.geomspace(1e-3, 1e3, 25):
            exact = 3 * s2**2 + 20 * s2**3 + 60 * s2**4
            assert exact <= b.value([mu, s2])


# ---- domain ------------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(0, 1e4), st.integers(2, 10**6))
def test_positive_families_stay_in_domain(theta, y, N):
    # one step is (1 - 1/N) theta + (positive)/N
    for fam, obs in ((ExponentialScale(), y), (NormalVarianceOnly(), np.sqrt(y))):
        new = theta + fam.natural_gradient(theta, obs)[0] / N
        assert new > 0


def test_registry():
    assert isinstance(make_family("mvnormal", d=3), MultivariateNormal)
    assert make_family("mvnormal", d=3).param_names == [
        "mu1", "mu2", "mu3", "s1", "s2", "s3", "s12", "s13", "s23"]
    with pytest.raises(ValueError):
        make_family("gamma")
    with pytest.raises(DomainError):
        StudentTLocation(1.0)
