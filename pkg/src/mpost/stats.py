"""Posterior summaries and the frequentist coverage harness."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import (BatchFailure, DegenerateDraws, InsufficientDraws, MPostError)
from .estimators import EstimatorSpec, estimate
from .models import make_family
from .resampler import (ABORT_TOLERANCE, CHUNK_ROWS, ResampleConfig, run_chains,
                        write_matrix_csv)
from .rng import derive_seed

SQRT_2PI = math.sqrt(2 * math.pi)


@dataclass(frozen=True)
class CredibleInterval:
    lower: float
    upper: float
    level: float

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def contains(self, value) -> bool:
        return self.lower <= value <= self.upper


def _column(draws):
    x = np.asarray(draws, dtype=float).ravel()
    return x[np.isfinite(x)]


def credible_interval(draws, level: float = 0.95) -> CredibleInterval:
    """Equal-tailed interval from linearly interpolated empirical quantiles."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    x = _column(draws)
    if x.size < 2:
        raise InsufficientDraws("an interval needs at least two draws")
    lo, hi = np.quantile(x, [(1 - level) / 2, 1 - (1 - level) / 2])
    return CredibleInterval(float(lo), float(hi), level)


def intervals(draws, level: float = 0.95):
    """Equal-tailed intervals for every column of a draw matrix at once."""
    d = np.asarray(draws, dtype=float)
    q = np.nanquantile(d, [(1 - level) / 2, 1 - (1 - level) / 2], axis=0)
    return q[0], q[1]


def silverman_bandwidth(draws) -> float:
    x = _column(draws)
    if x.size < 10:
        raise InsufficientDraws("density estimation needs at least 10 draws")
    sd = float(np.std(x, ddof=1))
    if sd == 0:
        raise DegenerateDraws("draws have zero spread")
    q75, q25 = np.quantile(x, [0.75, 0.25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    return 0.9 * spread * x.size ** (-0.2)


def kde(draws, grid, bandwidth: float | None = None) -> np.ndarray:
    """Gaussian kernel density estimate evaluated on ``grid``."""
    x = _column(draws)
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    g = np.asarray(grid, dtype=float)
    flat = g.ravel()
    out = np.empty(flat.shape)
    step = max(1, 4_000_000 // max(x.size, 1))
    for s in range(0, flat.size, step):
        u = (flat[s:s + step, None] - x[None, :]) / h
        out[s:s + step] = np.exp(-0.5 * u * u).sum(axis=1)
    out /= x.size * h * SQRT_2PI
    return out.reshape(g.shape)


def kde2d(draws, grid_x, grid_y):
    """Product-Gaussian density of two columns on a rectangular grid.

    Returns ``(density, level95)`` where ``density[i, j]`` is evaluated at
    ``(grid_x[i], grid_y[j])``.
    """
    d = np.asarray(draws, dtype=float)
    d = d[np.all(np.isfinite(d), axis=1)]
    hx, hy = silverman_bandwidth(d[:, 0]), silverman_bandwidth(d[:, 1])
    kx = np.exp(-0.5 * ((np.asarray(grid_x)[:, None] - d[None, :, 0]) / hx) ** 2)
    ky = np.exp(-0.5 * ((np.asarray(grid_y)[:, None] - d[None, :, 1]) / hy) ** 2)
    dens = kx @ ky.T / (d.shape[0] * hx * hy * 2 * np.pi)
    return dens


def density_level(draws, level: float = 0.95) -> float:
    """Density threshold whose super-level set holds ``level`` of the draws."""
    d = np.asarray(draws, dtype=float)
    d = d[np.all(np.isfinite(d), axis=1)]
    hx, hy = silverman_bandwidth(d[:, 0]), silverman_bandwidth(d[:, 1])
    at = np.empty(d.shape[0])
    step = max(1, 4_000_000 // d.shape[0])
    for s in range(0, d.shape[0], step):
        ux = (d[s:s + step, None, 0] - d[None, :, 0]) / hx
        uy = (d[s:s + step, None, 1] - d[None, :, 1]) / hy
        at[s:s + step] = np.exp(-0.5 * (ux * ux + uy * uy)).sum(axis=1)
    at /= d.shape[0] * hx * hy * 2 * np.pi
    return float(np.quantile(at, 1 - level))


def ks_two_sample(a, b) -> float:
    """Largest gap between the two empirical distribution functions."""
    a, b = _column(a), _column(b)
    if a.size == 0 or b.size == 0:
        raise InsufficientDraws("both samples must be nonempty")
    return float(sps.ks_2samp(a, b).statistic)


def skewness(draws) -> float:
    return float(sps.skew(_column(draws)))


# ---- coverage harness -----------------------------------------------------------

@dataclass
class Scenario:
    family: str
    theta_star: list
    n: int
    repeats: int = 1000
    draws_B: int = 2000
    mode: str = "hybrid"
    trunc_extra: int | None = None      # trunc_N = n + trunc_extra
    temper: float = 1.0
    level: float = 0.95
    seed: int = 0
    nu: float = 5.0
    sigma2: float = 1.0
    estimator: str | None = None

    def model(self):
        p = len(self.theta_star)
        d = None
        if self.family == "mvnormal":
            # p = d + d(d+1)/2
            d = int(round((-3 + math.sqrt(9 + 8 * p)) / 2))
            if d + d * (d + 1) // 2 != p:
                raise ValueError(f"{p} parameters do not describe a multivariate normal")
        m = make_family(self.family, nu=self.nu, sigma2=self.sigma2, d=d)
        m.check_theta(self.theta_star)
        return m

    def config(self, dim) -> ResampleConfig:
        trunc = None if self.trunc_extra is None else self.n + int(self.trunc_extra)
        return ResampleConfig(self.mode, trunc, self.draws_B, self.temper, self.seed)


@dataclass
class CoverageResult:
    param_names: list
    coverage: np.ndarray
    coverage_se: np.ndarray
    mean_length: np.ndarray
    length_se: np.ndarray
    repeats: int
    errors: int
    scenario: Scenario
    wall_time: float = 0.0
    per_repeat: dict = field(default_factory=dict, repr=False)

    def table(self):
        return np.column_stack([self.coverage, self.coverage_se, self.mean_length,
                                self.length_se])

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("parameter,coverage,coverage_se,mean_length,length_se\n")
            for name, row in zip(self.param_names, self.table()):
                fh.write(name + "," + ",".join("%.17g" % v for v in row) + "\n")

    def metadata(self) -> dict:
        return {"scenario": asdict(self.scenario), "repeats": self.repeats,
                "errors": self.errors, "wall_time": self.wall_time}


def simulate_dataset(model, theta_star, n, seed, r):
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(r)])
    th = np.broadcast_to(np.asarray(theta_star, dtype=float), (n, model.dim))
    return model.simulate(th, rng)


def coverage_experiment(scenario: Scenario, threads: int = 1,
                        keep_draws: bool = False) -> CoverageResult:
    """Coverage and length of equal-tailed intervals over repeated data sets.

    Repeat r simulates data from ``np.random.default_rng([seed, r])`` and
    samples its posterior with chain streams keyed by a seed derived from
    ``(seed, r)``, so every repeat is reproducible on its own.
    """
    t0 = time.perf_counter()
    model = scenario.model()
    theta_star = np.asarray(scenario.theta_star, dtype=float)
    n, R, B = int(scenario.n), int(scenario.repeats), int(scenario.draws_B)
    cfg = scenario.config(model.dim)
    N = cfg.horizon(n, model.dim)
    spec = EstimatorSpec(scenario.estimator)
    p = model.dim

    theta_n = np.full((R, p), np.nan)
    errors = np.zeros(R, dtype=bool)
    for r in range(R):
        y = simulate_dataset(model, theta_star, n, scenario.seed, r)
        try:
            theta_n[r] = estimate(model, y, spec)
        except MPostError:
            errors[r] = True

    covered = np.zeros((R, p), dtype=bool)
    length = np.full((R, p), np.nan)
    group = max(1, CHUNK_ROWS // B)
    ok_idx = np.flatnonzero(~errors)
    all_draws = {}
    for s in range(0, ok_idx.size, group):
        reps = ok_idx[s:s + group]
        seeds = np.repeat(np.array([derive_seed(scenario.seed, r) for r in reps],
                                   dtype=object), B)
        chains = np.tile(np.arange(B), reps.size)
        run = run_chains(model, np.repeat(theta_n[reps], B, axis=0), n, N, seeds, chains,
                         temper=cfg.temper_matrix(p), gaussian=cfg.mode == "hybrid",
                         threads=threads)
        draws = run.draws.reshape(reps.size, B, p)
        failed = run.failed.reshape(reps.size, B).sum(axis=1)
        for k, r in enumerate(reps):
            if failed[k] > ABORT_TOLERANCE * B:
                errors[r] = True
                continue
            lo, hi = intervals(draws[k], scenario.level)
            covered[r] = (lo <= theta_star) & (theta_star <= hi)
            length[r] = hi - lo
            if keep_draws:
                all_draws[int(r)] = draws[k]

    nerr = int(errors.sum())
    if nerr > 0.01 * R:
        raise BatchFailure(f"{nerr} of {R} coverage repeats failed")
    good = ~errors
    Rg = int(good.sum())
    cov = covered[good].mean(axis=0)
    cov_se = np.sqrt(cov * (1 - cov) / Rg)
    ml = length[good].mean(axis=0)
    ml_se = length[good].std(axis=0, ddof=1) / math.sqrt(Rg) if Rg > 1 else np.zeros(p)
    res = CoverageResult(list(model.param_names), cov, cov_se, ml, ml_se, Rg, nerr,
                         scenario, time.perf_counter() - t0,
                         {"theta_n": theta_n, "covered": covered, "length": length})
    if keep_draws:
        res.per_repeat["draws"] = all_draws
    return res


def write_kde_csv(path, grid, density):
    write_matrix_csv(path, np.column_stack([grid, density]), ["grid", "density"])
