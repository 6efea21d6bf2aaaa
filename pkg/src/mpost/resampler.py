"""Predictive resampling engine.

A chain starts at the initial estimate after ``n`` observed points and
repeatedly imputes an observation from the current predictive, then moves the
parameter by ``a / N`` times the natural gradient.  Chains are independent;
the batch driver runs them as rows of one array so each step is a handful of
vectorised numpy calls.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import BatchFailure, DomainError, NotPD
from .rng import NOISE_STEP, ChainStreams, StepDraws, chain_keys

MODES = ("exact", "truncated", "hybrid")
DEFAULT_EXACT_EXTRA = 20000
TRUNC_PER_PARAM = 100
ABORT_TOLERANCE = 1e-3
# rows per unit of work; fixed so that the thread count never changes how
# rows are grouped
CHUNK_ROWS = 1 << 16


# ---- tail weight -------------------------------------------------------------

def _tail_from(K: int) -> float:
    """Euler-Maclaurin value of sum_{i>K} i^-2 (error below 1e-17 for K >= 64)."""
    k = float(K)
    return (1.0 / k - 0.5 / k**2 + 1.0 / (6 * k**3) - 1.0 / (30 * k**5)
            + 1.0 / (42 * k**7))


def tail_weight(N: int) -> float:
    """r_N^2 = sum_{i=N+1}^inf i^-2."""
    N = int(N)
    if N < 1:
        raise ValueError("tail weight needs N >= 1")
    K = max(N, 64)
    head = 0.0
    if K > N:
        i = np.arange(K, N, -1, dtype=float)   # small terms first
        head = float(np.sum(1.0 / (i * i)))
    return head + _tail_from(K)


# ---- linear algebra ----------------------------------------------------------

def principal_sqrt(M) -> np.ndarray:
    """Symmetric positive-definite square root, batched over leading axes."""
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise ValueError("principal_sqrt needs square matrices")
    if not np.all(np.isfinite(M)):
        raise NotPD("matrix has non-finite entries")
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    if M.shape[-1] == 1:
        if np.any(M <= 0):
            raise NotPD("matrix is not positive definite")
        return np.sqrt(M)
    w, V = np.linalg.eigh(M)
    if np.any(w <= 0):
        raise NotPD(f"matrix is not positive definite (min eigenvalue {w.min():.3g})")
    return np.einsum("...ij,...j,...kj->...ik", V, np.sqrt(w), V)


# ---- configuration and state -------------------------------------------------

@dataclass
class ResampleConfig:
    mode: str = "hybrid"
    trunc_N: int | None = None        # default n + 100 * dim
    draws_B: int = 1000
    temper: object = 1.0              # scalar a > 0 or a PD matrix
    master_seed: int = 0
    exact_N: int | None = None        # default n + 20000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.draws_B) < 1:
            raise ValueError("draws_B must be at least 1")
        a = np.asarray(self.temper, dtype=float)
        if a.ndim == 0:
            if not (np.isfinite(a) and a > 0):
                raise ValueError("temper must be positive")
        else:
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise ValueError("temper matrix must be square")
            if not np.allclose(a, a.T) or np.linalg.eigvalsh(a)[0] <= 0:
                raise ValueError("temper matrix must be symmetric positive definite")

    def horizon(self, n: int, dim: int) -> int:
        """Index of the last imputed observation."""
        if self.mode == "exact":
            N = n + DEFAULT_EXACT_EXTRA if self.exact_N is None else int(self.exact_N)
        else:
            N = n + TRUNC_PER_PARAM * dim if self.trunc_N is None else int(self.trunc_N)
        if N < n:
            raise ValueError(f"truncation index {N} is below the sample size {n}")
        return N

    def temper_matrix(self, dim: int):
        a = np.asarray(self.temper, dtype=float)
        if a.ndim == 2 and a.shape != (dim, dim):
            raise ValueError(f"temper matrix must be {dim}x{dim}")
        return a

    def to_dict(self) -> dict:
        d = asdict(self)
        a = np.asarray(self.temper, dtype=float)
        d["temper"] = a.tolist() if a.ndim else float(a)
        return d


def _apply_temper(a, z):
    if a.ndim == 0:
        return z if a == 1.0 else a * z
    return z @ a.T


def _temper_cov(a, cov):
    """a cov a' for the conditional variance of one step."""
    if a.ndim == 0:
        return cov if a == 1.0 else (a * a) * cov
    return a @ cov @ a.T


@dataclass
class ChainState:
    theta: np.ndarray                 # (B, p)
    step: int                         # observations seen so far
    cond_var: np.ndarray | None = None
    streams: ChainStreams | None = None


def _advance(model, theta, N, rng, a, y=None, x=None):
    if model.conditional:
        if x is None:
            idx = rng.integers(0, model.design.n, size=theta.shape[0])
            x = model.design.rows[idx]
        if y is None:
            y = model.simulate(theta, rng, x)
        z = model._natgrad(theta, y, x)
    else:
        if y is None:
            y = model.simulate(theta, rng)
        z = model._natgrad(theta, y)
    step = _apply_temper(a, z)
    step /= N
    return theta + step


def step_chain(state: ChainState, model, temper=1.0, y=None, x=None) -> ChainState:
    """One update ``theta_N = theta_{N-1} + a N^-1 Z_N``.

    ``y`` (and ``x`` for regression families) may be supplied to force the
    imputed observation; otherwise they are drawn from the state's streams.
    """
    theta = np.atleast_2d(model.check_theta(state.theta))
    a = np.asarray(temper, dtype=float)
    N = state.step + 1
    rng = state.streams.at(N) if state.streams is not None else None
    if rng is None and (y is None or (model.conditional and x is None)):
        raise ValueError("step_chain needs streams unless the observation is forced")
    if y is not None:
        y = model.check_y(np.broadcast_to(y, theta.shape[:1] + model.event_shape))
    if x is not None:
        x = np.broadcast_to(np.asarray(x, dtype=float), theta.shape[:1] + (model.p,))
    with np.errstate(all="ignore"):
        new = _advance(model, theta, N, rng, a, y, x)
        ok = model.in_domain(new)
    if not np.all(ok):
        raise DomainError(f"{model.name}: update at N={N} left the parameter domain")
    cv = state.cond_var
    if cv is not None:
        cv = cv + _temper_cov(a, model._fisher_inverse(theta)) / float(N) ** 2
    return ChainState(new.reshape(np.shape(state.theta)), N, cv, state.streams)


# ---- engine ------------------------------------------------------------------

@dataclass
class _RowResult:
    theta: np.ndarray
    alive: np.ndarray
    snaps: dict
    cond_var: dict


def _run_rows(model, theta0, n, stop, keys, a, checkpoints=(), track_var=False):
    theta = np.array(theta0, dtype=float, copy=True)
    B = theta.shape[0]
    alive = np.ones(B, dtype=bool)
    cps = set(int(c) for c in checkpoints)
    snaps, cvs = {}, {}
    cv = np.zeros(theta.shape) if track_var else None
    if n in cps:
        snaps[n] = theta.copy()
        if track_var:
            cvs[n] = cv.copy()
    with np.errstate(all="ignore"):
        for N in range(n + 1, stop + 1):
            rng = StepDraws(keys, N)
            if track_var:
                fi = _temper_cov(a, model._fisher_inverse(theta))
                cv += np.diagonal(fi, axis1=-2, axis2=-1) / float(N) ** 2
            new = _advance(model, theta, N, rng, a)
            ok = model.in_domain(new)
            if not ok.all():
                new[~ok] = theta[~ok]
                alive &= ok
            theta = new
            if N in cps:
                snaps[N] = theta.copy()
                if track_var:
                    cvs[N] = cv.copy()
    return _RowResult(theta, alive, snaps, cvs)


def _gaussian_tail(model, theta, N, keys, a, eps=None):
    """theta_N + (a^2 r_N^2 I(theta_N)^-1)^{1/2} eps, row by row."""
    cov = _temper_cov(a, model._fisher_inverse(theta)) * tail_weight(N)
    S = principal_sqrt(cov)
    if eps is None:
        eps = StepDraws(keys, NOISE_STEP).standard_normal(size=theta.shape)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), theta.shape)
    return theta + np.einsum("...ij,...j->...i", S, eps)


@dataclass
class ChainRun:
    """Raw engine output: per-row draws plus bookkeeping."""
    draws: np.ndarray
    failed: np.ndarray            # rows aborted twice (NaN in draws)
    retried: int
    snaps: dict = field(default_factory=dict)
    cond_var: dict = field(default_factory=dict)
    out_of_domain: int = 0


def run_chains(model, theta0, n, horizon, seeds, chains, *, temper=1.0,
               gaussian=False, threads=1, checkpoints=(), track_var=False,
               chunk_rows=CHUNK_ROWS) -> ChainRun:
    """Run one chain per row of ``theta0`` from step ``n`` to ``horizon``.

    ``seeds`` and ``chains`` identify each row's random stream; they may
    differ between rows (the coverage harness stacks several data sets).
    Rows that leave the domain are rerun once with fresh streams; rows that
    fail again come back as NaN and are flagged in ``failed``.
    """
    theta0 = np.atleast_2d(np.asarray(theta0, dtype=float))
    B = theta0.shape[0]
    chains = np.asarray(chains, dtype=np.int64)
    seeds = np.broadcast_to(np.asarray(seeds, dtype=object), chains.shape)
    a = np.asarray(temper, dtype=float)
    keys = chain_keys(seeds, chains)

    def work(rows, k):
        r = _run_rows(model, theta0[rows], n, horizon, k, a, checkpoints, track_var)
        return r

    def run_all(row_sets, key_sets):
        if threads > 1 and len(row_sets) > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                return list(ex.map(work, row_sets, key_sets))
        return [work(r, k) for r, k in zip(row_sets, key_sets)]

    starts = range(0, B, chunk_rows)
    row_sets = [np.arange(s, min(s + chunk_rows, B)) for s in starts]
    results = run_all(row_sets, [keys[r] for r in row_sets])

    theta = np.empty_like(theta0)
    alive = np.empty(B, dtype=bool)
    snaps = {c: np.empty_like(theta0) for c in results[0].snaps}
    cvs = {c: np.empty_like(theta0) for c in results[0].cond_var}
    for rows, res in zip(row_sets, results):
        theta[rows] = res.theta
        alive[rows] = res.alive
        for c in snaps:
            snaps[c][rows] = res.snaps[c]
        for c in cvs:
            cvs[c][rows] = res.cond_var[c]

    dead = np.flatnonzero(~alive)
    if dead.size:
        retry_keys = chain_keys(seeds[dead], chains[dead], retry=1)
        res = _run_rows(model, theta0[dead], n, horizon, retry_keys, a,
                        checkpoints, track_var)
        theta[dead] = res.theta
        alive[dead] = res.alive
        keys = keys.copy()
        keys[dead] = retry_keys
        for c in snaps:
            snaps[c][dead] = res.snaps[c]
        for c in cvs:
            cvs[c][dead] = res.cond_var[c]

    failed = ~alive
    theta[failed] = np.nan
    out = 0
    if gaussian:
        ok = ~failed
        with np.errstate(all="ignore"):
            g = np.full_like(theta, np.nan)
            g[ok] = _gaussian_tail(model, theta[ok], horizon, keys[ok], a)
            out = int(np.sum(~model.in_domain(g[ok])))
        theta = g
    return ChainRun(theta, failed, int(dead.size), snaps, cvs, out)


def hybrid_draw(model, theta_n, n: int, config: ResampleConfig, chain: int = 0,
                eps=None) -> np.ndarray:
    """A single hybrid draw for stream ``chain`` of ``config.master_seed``.

    ``eps`` overrides the standard normal vector of the Gaussian tail term.
    """
    theta_n = model.check_theta(theta_n)
    a = config.temper_matrix(model.dim)
    N = replace(config, mode="hybrid").horizon(n, model.dim)
    keys = chain_keys(config.master_seed, [chain])
    with np.errstate(all="ignore"):
        res = _run_rows(model, theta_n[None, :], n, N, keys, a)
    if not res.alive[0]:
        raise DomainError(f"{model.name}: imputation chain left the domain")
    return _gaussian_tail(model, res.theta, N, keys, a, eps)[0]


# ---- batch driver --------------------------------------------------------------

@dataclass
class PosteriorDraws:
    draws: np.ndarray
    param_names: list
    config: ResampleConfig
    theta_n: np.ndarray
    n: int
    horizon: int
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)
    run: ChainRun | None = field(default=None, repr=False)

    @property
    def B(self) -> int:
        return self.draws.shape[0]

    def mean(self):
        return np.nanmean(self.draws, axis=0)

    def sd(self):
        return np.nanstd(self.draws, axis=0, ddof=1)

    def column(self, name):
        return self.draws[:, self.param_names.index(name)]

    def to_csv(self, path):
        write_matrix_csv(path, self.draws, self.param_names)

    def metadata(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "n": int(self.n),
            "horizon": int(self.horizon),
            "theta_n": [float(v) for v in self.theta_n],
            "param_names": list(self.param_names),
            "wall_time": self.wall_time,
            **self.meta,
        }

    def write_metadata(self, path, extra=None):
        md = self.metadata()
        if extra:
            md.update(extra)
        with open(path, "w") as fh:
            json.dump(md, fh, indent=2, sort_keys=True)
            fh.write("\n")


def write_matrix_csv(path, matrix, names):
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for row in np.asarray(matrix, dtype=float):
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def batch_sample(model, theta_n, n: int, config: ResampleConfig, *, threads: int = 1,
                 checkpoints=(), track_var=False) -> PosteriorDraws:
    """B independent draws; row b uses the stream keyed by (master_seed, b)."""
    theta_n = model.check_theta(theta_n)
    if theta_n.ndim != 1:
        raise ValueError("theta_n must be a single parameter vector")
    N = config.horizon(n, model.dim)
    a = config.temper_matrix(model.dim)
    B = int(config.draws_B)
    t0 = time.perf_counter()
    run = run_chains(model, np.broadcast_to(theta_n, (B, model.dim)), n, N,
                     config.master_seed, np.arange(B), temper=a,
                     gaussian=config.mode == "hybrid", threads=threads,
                     checkpoints=checkpoints, track_var=track_var)
    wall = time.perf_counter() - t0
    nfail = int(run.failed.sum())
    if nfail > ABORT_TOLERANCE * B:
        raise BatchFailure(f"{nfail} of {B} chains left the parameter domain "
                           "after retry")
    meta = {"aborted": run.retried, "retried": run.retried, "failed": nfail,
            "hybrid_out_of_domain": run.out_of_domain}
    return PosteriorDraws(run.draws, list(model.param_names), config, theta_n, n, N,
                          wall, meta, run)
