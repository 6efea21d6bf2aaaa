import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from mpost.errors import BatchFailure, DomainError, NotPD
from mpost.models import ExponentialScale, MultivariateNormal, NormalKnownVar, NormalVarianceOnly
from mpost.regression import DesignMatrix, RobustTLinear
from mpost.resampler import (ChainState, ResampleConfig, batch_sample, hybrid_draw,
                             principal_sqrt, run_chains, step_chain, tail_weight)
from mpost.rng import ChainStreams

# r_N^2 = zeta(2, N + 1) from mpmath at 40 digits, frozen
ZETA = {1: 0.64493406684822643647, 10: 0.095166335681685746122,
        100: 0.0099501666633335713952, 1000: 0.00099950016666663333336,
        10**6: 9.9999950000016666667e-7}


# ---- tail weight ------------------------------------------------------------------

@pytest.mark.parametrize("N", sorted(ZETA))
def test_tail_weight_frozen_values(N):
    assert abs(tail_weight(N) - ZETA[N]) <= 1e-12 * max(1.0, ZETA[N]) + 1e-16


def test_tail_weight_examples():
    assert tail_weight(1) == pytest.approx(np.pi**2 / 6 - 1, abs=1e-12)
    assert 1 / 11 <= tail_weight(10) <= 1 / 10
    assert abs(10**6 * tail_weight(10**6) - 1) < 1e-3


def _partial_sum_oracle(N, terms=10**6):
    i = np.arange(N + terms, N, -1, dtype=float)
    s = np.sum(1 / (i * i))
    K = N + terms
    return s + 1 / (K + 1), s + 1 / K     # integral-test bracket on the rest


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10**7))
def test_tail_weight_against_independent_oracles(N):
    r = tail_weight(N)
    assert 1 / (N + 1) <= r <= 1 / N
    assert r == pytest.approx(float(special.polygamma(1, N + 1)), rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("N", [1, 7, 64, 500])
def test_tail_weight_partial_sum_bracket(N):
    lo, hi = _partial_sum_oracle(N)
    assert lo - 1e-15 <= tail_weight(N) <= hi + 1e-15


# ---- principal square root ----------------------------------------------------------

def test_principal_sqrt_examples():
    assert np.allclose(principal_sqrt(np.eye(3)), np.eye(3))
    assert np.allclose(principal_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))
    M = np.array([[2.0, 1.0], [1.0, 2.0]])
    S = principal_sqrt(M)
    assert np.allclose(S, S.T)
    assert np.allclose(S @ S, M, rtol=1e-10, atol=0)
    with pytest.raises(NotPD):
        principal_sqrt(np.array([[1.0, 2.0], [2.0, 1.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_principal_sqrt_property(seed, p):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((4, p, p))
    M = A @ np.swapaxes(A, 1, 2) + 0.1 * np.eye(p)
    S = principal_sqrt(M)
    assert np.allclose(S @ S, M, rtol=1e-10, atol=1e-10 * np.abs(M).max())
    assert np.all(np.linalg.eigvalsh(S) > 0)


# ---- single steps -------------------------------------------------------------------

def _state(theta, step):
    return ChainState(np.array([[theta]]), step)


def test_step_chain_examples():
    fam = ExponentialScale()
    assert step_chain(_state(1.0, 9), fam, y=2.0).theta[0, 0] == pytest.approx(1.1)
    assert step_chain(_state(1.0, 9), fam, temper=2.0, y=2.0).theta[0, 0] == pytest.approx(1.2)
    nxt = step_chain(_state(2.0, 3), NormalVarianceOnly(), y=0.0)
    assert nxt.theta[0, 0] == pytest.approx(1.5) and nxt.step == 4


def test_step_chain_domain_error():
    with pytest.raises(DomainError):
        step_chain(_state(1.0, 0), NormalVarianceOnly(), temper=3.0, y=0.0)


def test_step_chain_accumulates_conditional_variance():
    fam = ExponentialScale()
    st0 = ChainState(np.array([[2.0]]), 9, np.zeros((1, 1, 1)), ChainStreams(3, [0]))
    st1 = step_chain(st0, fam, temper=2.0)
    assert st1.cond_var[0, 0, 0] == pytest.approx(4 * 4 / 100)


def test_step_chain_matrix_temper():
    fam = MultivariateNormal(1)      # theta = (mu, s1)
    A = np.array([[2.0, 0.0], [0.0, 1.0]])
    st = ChainState(np.array([[0.0, 1.0]]), 9)
    out = step_chain(st, fam, temper=A, y=np.array([1.0]))
    # Z = (1, 0); A Z / N = (0.2, 0)
    assert np.allclose(out.theta, [[0.2, 1.0]])


def test_engine_matches_step_chain():
    fam = ExponentialScale()
    streams = ChainStreams(11, np.arange(5))
    st = ChainState(np.full((5, 1), 1.3), 10, None, streams)
    for _ in range(30):
        st = step_chain(st, fam)
    run = run_chains(fam, np.full((5, 1), 1.3), 10, 40, 11, np.arange(5))
    assert np.array_equal(run.draws, st.theta)


# ---- hybrid draws -------------------------------------------------------------------

def test_hybrid_zero_noise_equals_truncated():
    fam = ExponentialScale()
    cfg = ResampleConfig("hybrid", trunc_N=40, draws_B=8, master_seed=4)
    trunc = batch_sample(fam, [1.5], 20, ResampleConfig("truncated", 40, 8, master_seed=4))
    for b in range(8):
        assert hybrid_draw(fam, [1.5], 20, cfg, chain=b, eps=[0.0])[0] == trunc.draws[b, 0]


def test_hybrid_without_imputation_is_gaussian_approximation():
    fam = ExponentialScale()
    cfg = ResampleConfig("hybrid", trunc_N=100, master_seed=0)
    out = hybrid_draw(fam, [2.0], 100, cfg, eps=[1.0])
    assert out[0] == pytest.approx(2.19950, abs=5e-6)
    assert out[0] == pytest.approx(2 + 2 * np.sqrt(ZETA[100]), rel=1e-13)


def test_hybrid_draw_matches_batch_rows():
    fam = MultivariateNormal(2)
    th = np.array([-0.5, 1, 1, 0.5, 0.7])
    cfg = ResampleConfig("hybrid", trunc_N=150, draws_B=6, master_seed=8)
    batch = batch_sample(fam, th, 100, cfg)
    for b in (0, 5):
        assert np.allclose(hybrid_draw(fam, th, 100, cfg, chain=b), batch.draws[b],
                           rtol=1e-12)


def test_hybrid_tempered_covariance():
    fam = ExponentialScale()
    for a in (0.5, 2.0):
        cfg = ResampleConfig("hybrid", trunc_N=50, temper=a)
        out = hybrid_draw(fam, [3.0], 50, cfg, eps=[1.0])[0]
        assert out == pytest.approx(3.0 + a * 3.0 * np.sqrt(tail_weight(50)))
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    mvn = MultivariateNormal(1)
    cfg = ResampleConfig("hybrid", trunc_N=50, temper=A)
    theta = np.array([0.3, 1.7])
    eps = np.array([0.4, -1.2])
    out = hybrid_draw(mvn, theta, 50, cfg, eps=eps)
    cov = tail_weight(50) * A @ mvn.fisher_inverse(theta) @ A.T
    assert np.allclose(out, theta + principal_sqrt(cov) @ eps)


# ---- batch sampling -----------------------------------------------------------------

def test_truncated_at_n_returns_initial_estimate():
    out = batch_sample(ExponentialScale(), [1.7], 10, ResampleConfig("truncated", 10, 20))
    assert np.all(out.draws == 1.7)


def test_parallel_equals_serial():
    fam = ExponentialScale()
    cfg = ResampleConfig("hybrid", 60, 100, master_seed=123)
    a = run_chains(fam, np.full((100, 1), 2.0), 10, 60, 123, np.arange(100), gaussian=True,
                   chunk_rows=7, threads=1)
    b = run_chains(fam, np.full((100, 1), 2.0), 10, 60, 123, np.arange(100), gaussian=True,
                   chunk_rows=7, threads=4)
    c = batch_sample(fam, [2.0], 10, cfg)
    assert np.array_equal(a.draws, b.draws)
    assert np.array_equal(a.draws, c.draws)


def test_seed_changes_draws():
    fam = ExponentialScale()
    a = batch_sample(fam, [2.0], 10, ResampleConfig("truncated", 30, 50, master_seed=1))
    b = batch_sample(fam, [2.0], 10, ResampleConfig("truncated", 30, 50, master_seed=2))
    assert not np.array_equal(a.draws, b.draws)


def test_posterior_mean_invariant_regression():
    rng = np.random.default_rng(2)
    X = np.column_stack([np.ones(300), rng.standard_normal(300)])
    fam = RobustTLinear(DesignMatrix(X), 5)
    th = np.array([0.5, 1.0, 1.2])
    out = batch_sample(fam, th, 300, ResampleConfig("hybrid", 400, 4000, master_seed=3))
    assert np.all(np.abs(out.mean() - th) <= 4 * out.sd() / np.sqrt(out.B))


def test_exact_variance_law():
    # Var(theta_N) equals E sum_i i^-2 I^-1(theta_{i-1}) for a martingale
    fam = ExponentialScale()
    run = run_chains(fam, np.full((50_000, 1), 1.0), 10, 1010, 5, np.arange(50_000),
                     checkpoints=[1010], track_var=True)
    v = run.draws[:, 0].var()
    expect = run.cond_var[1010][:, 0].mean()
    assert abs(v / expect - 1) < 0.05


class _FragileExponential(ExponentialScale):
    """Domain shrinks to theta < limit, so some chains abort."""

    def __init__(self, limit):
        self.limit = limit

    def in_domain(self, theta):
        t = np.asarray(theta)[..., 0]
        return super().in_domain(theta) & (t < self.limit)


def test_abort_retry_and_failure_policy():
    few = _FragileExponential(1.6)
    fam = ExponentialScale()
    # limit high enough that only a handful of chains ever hit it
    out = batch_sample(_FragileExponential(4.0), [1.0], 5,
                       ResampleConfig("truncated", 25, 20_000, master_seed=1))
    assert out.meta["retried"] > 0
    assert out.meta["failed"] <= 20
    ok = np.isfinite(out.draws[:, 0])
    assert np.all(out.draws[ok, 0] < 4.0)
    with pytest.raises(BatchFailure):
        batch_sample(few, [1.0], 5, ResampleConfig("truncated", 25, 2000, master_seed=1))
    assert batch_sample(fam, [1.0], 5, ResampleConfig("truncated", 25, 50)).meta["retried"] == 0


def test_hybrid_out_of_domain_rows_are_kept():
    fam = ExponentialScale()
    out = batch_sample(fam, [1.0], 1, ResampleConfig("hybrid", 1, 20_000, master_seed=2))
    # theta_1 + theta_1 r_1 eps < 0 when eps < -1/r_1 ~ -1.245
    neg = np.sum(out.draws[:, 0] <= 0)
    assert neg > 0 and out.meta["hybrid_out_of_domain"] == neg


def test_config_validation():
    with pytest.raises(ValueError):
        ResampleConfig("fast")
    with pytest.raises(ValueError):
        ResampleConfig(temper=-1.0)
    with pytest.raises(ValueError):
        ResampleConfig(temper=[[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        ResampleConfig("truncated", trunc_N=5).horizon(10, 1)
    assert ResampleConfig("hybrid").horizon(10, 5) == 510
    assert ResampleConfig("exact").horizon(10, 5) == 20010


def test_csv_and_metadata(tmp_path):
    out = batch_sample(NormalKnownVar(), [0.25], 10, ResampleConfig("hybrid", 20, 5))
    out.to_csv(tmp_path / "d.csv")
    out.write_metadata(tmp_path / "d.json")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "mean" and len(lines) == 6
    assert np.array_equal(np.array([float(v) for v in lines[1:]]), out.draws[:, 0])
    import json
    md = json.loads((tmp_path / "d.json").read_text())
    assert md["config"]["master_seed"] == 0 and md["failed"] == 0
