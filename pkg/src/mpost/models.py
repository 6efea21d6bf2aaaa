"""Parametric predictive families for i.i.d. data.

Every method is vectorised: ``theta`` has shape ``(..., p)`` and an
observation has shape ``(...,) + event_shape`` with matching leading
dimensions.  Public methods validate their inputs; the underscored
``_natgrad`` is the unchecked fast path used by the resampling engine.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError, SupportError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class MomentBound:
    """Constants with ``E||Z(theta, Y)||^4 <= B + C ||theta||^4``.

    ``exact`` marks families where the relation holds with equality, which
    lets diagnostics test it two-sided.  ``pointwise`` marks bounds that hold
    for every realisation of ``Z``, not just in expectation.
    """
    B: float
    C: float
    exact: bool = False
    pointwise: bool = False

    def __post_init__(self):
        if self.B < 0 or self.C < 0 or self.B + self.C <= 0:
            raise ValueError("moment bound needs B, C >= 0 and B + C > 0")

    def value(self, theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        return self.B + self.C * np.sum(t * t, axis=-1) ** 2


class ModelFamily:
    name = "abstract"
    conditional = False      # regression families need a covariate row
    event_shape: tuple = ()

    dim: int
    param_names: list

    # ---- domain ------------------------------------------------------------

    def in_domain(self, theta) -> np.ndarray:
        return np.all(np.isfinite(theta), axis=-1)

    def in_support(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        ok = np.isfinite(y)
        if self.event_shape:
            ok = np.all(ok, axis=tuple(range(-len(self.event_shape), 0)))
        return ok

    def as_theta(self, theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        if t.ndim == 0:
            t = t[None]
        if t.shape[-1] != self.dim:
            raise DomainError(f"{self.name}: expected {self.dim} parameters, "
                              f"got shape {t.shape}")
        return t

    def check_theta(self, theta) -> np.ndarray:
        t = self.as_theta(theta)
        with np.errstate(invalid="ignore"):
            ok = self.in_domain(t)
        if not np.all(ok):
            raise DomainError(f"{self.name}: parameter outside domain")
        return t

    def check_y(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        with np.errstate(invalid="ignore"):
            ok = self.in_support(y)
        if not np.all(ok):
            raise SupportError(f"{self.name}: observation outside support")
        return y

    # ---- required pieces -----------------------------------------------------

    def _score(self, theta, y):
        raise NotImplementedError

    def _fisher_inverse(self, theta):
        raise NotImplementedError

    def _natgrad(self, theta, y):
        raise NotImplementedError

    def _log_density(self, theta, y):
        raise NotImplementedError

    def simulate(self, theta, rng):
        """Draw one observation per leading index of ``theta``."""
        raise NotImplementedError

    def moment_bound(self):
        return None

    # ---- validated API -------------------------------------------------------

    def score(self, theta, y):
        t = self.check_theta(theta)
        return self._score(t, self.check_y(y))

    def fisher_inverse(self, theta):
        return self._fisher_inverse(self.check_theta(theta))

    def fisher(self, theta):
        return np.linalg.inv(self.fisher_inverse(theta))

    def natural_gradient(self, theta, y):
        t = self.check_theta(theta)
        return self._natgrad(t, self.check_y(y))

    def natural_gradient_composed(self, theta, y):
        """``I(theta)^{-1} s(theta, y)`` built from the generic pieces."""
        t = self.check_theta(theta)
        s = self._score(t, self.check_y(y))
        return np.einsum("...ij,...j->...i", self._fisher_inverse(t), s)

    def log_density(self, theta, y):
        t = self.check_theta(theta)
        return self._log_density(t, self.check_y(y))

    def draw(self, theta, rng):
        return self.simulate(self.check_theta(theta), rng)

    def __repr__(self):
        return f"{type(self).__name__}()"


def _scalar(theta):
    return theta[..., 0]


def _col(v):
    return np.asarray(v)[..., None]


class ExponentialScale(ModelFamily):
    """Exponential with scale (= mean) parameter; Fisher information 1/theta^2."""
    name = "exponential"
    dim = 1
    param_names = ["scale"]

    def in_domain(self, theta):
        t = _scalar(np.asarray(theta))
        return np.isfinite(t) & (t > 0)

    def in_support(self, y):
        y = np.asarray(y, dtype=float)
        return np.isfinite(y) & (y >= 0)

    def _score(self, theta, y):
        t = _scalar(theta)
        return _col(-1.0 / t + y / t**2)

    def _fisher_inverse(self, theta):
        return (theta**2)[..., None]

    def _natgrad(self, theta, y):
        return _col(y - _scalar(theta))

    def _log_density(self, theta, y):
        t = _scalar(theta)
        return -np.log(t) - y / t

    def simulate(self, theta, rng):
        t = _scalar(theta)
        return t * rng.standard_exponential(size=t.shape or None)

    def moment_bound(self):
        return MomentBound(0.0, 9.0, exact=True)


class NormalKnownVar(ModelFamily):
    """Normal with unknown mean and fixed variance ``sigma2``."""
    name = "normal_mean"
    dim = 1
    param_names = ["mean"]

    def __init__(self, sigma2: float = 1.0):
        if not (np.isfinite(sigma2) and sigma2 > 0):
            raise DomainError("normal_mean: sigma2 must be positive")
        self.sigma2 = float(sigma2)

    def _score(self, theta, y):
        return _col((y - _scalar(theta)) / self.sigma2)

    def _fisher_inverse(self, theta):
        return np.full(theta.shape[:-1] + (1, 1), self.sigma2)

    def _natgrad(self, theta, y):
        return _col(y - _scalar(theta))

    def _log_density(self, theta, y):
        r = y - _scalar(theta)
        return -0.5 * (LOG_2PI + np.log(self.sigma2) + r * r / self.sigma2)

    def simulate(self, theta, rng):
        t = _scalar(theta)
        return t + np.sqrt(self.sigma2) * rng.standard_normal(size=t.shape or None)

    def __repr__(self):
        return f"NormalKnownVar(sigma2={self.sigma2})"


class NormalVarianceOnly(ModelFamily):
    """Zero-mean normal with unknown variance."""
    name = "normal_var"
    dim = 1
    param_names = ["variance"]

    def in_domain(self, theta):
        t = _scalar(np.asarray(theta))
        return np.isfinite(t) & (t > 0)

    def _score(self, theta, y):
        t = _scalar(theta)
        return _col((y * y - t) / (2.0 * t * t))

    def _fisher_inverse(self, theta):
        return (2.0 * theta**2)[..., None]

    def _natgrad(self, theta, y):
        return _col(y * y - _scalar(theta))

    def _log_density(self, theta, y):
        t = _scalar(theta)
        return -0.5 * (LOG_2PI + np.log(t) + y * y / t)

    def simulate(self, theta, rng):
        t = _scalar(theta)
        return np.sqrt(t) * rng.standard_normal(size=t.shape or None)

    def moment_bound(self):
        return MomentBound(0.0, 60.0, exact=True)


class StudentTLocation(ModelFamily):
    """Student-t location family with fixed ``nu`` and unit scale."""
    name = "student_t"
    dim = 1
    param_names = ["location"]

    def __init__(self, nu: float = 5.0):
        if not (np.isfinite(nu) and nu > 1):
            raise DomainError("student_t: nu must exceed 1")
        self.nu = float(nu)

    def _score(self, theta, y):
        r = y - _scalar(theta)
        return _col((self.nu + 1.0) * r / (self.nu + r * r))

    def _fisher_inverse(self, theta):
        v = (self.nu + 3.0) / (self.nu + 1.0)
        return np.full(theta.shape[:-1] + (1, 1), v)

    def _natgrad(self, theta, y):
        r = y - _scalar(theta)
        return _col((self.nu + 3.0) * r / (self.nu + r * r))

    def _log_density(self, theta, y):
        nu = self.nu
        r = y - _scalar(theta)
        c = (special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2)
             - 0.5 * np.log(nu * np.pi))
        return c - (nu + 1) / 2 * np.log1p(r * r / nu)

    def simulate(self, theta, rng):
        t = _scalar(theta)
        return t + rng.standard_t(self.nu, size=t.shape or None)

    def moment_bound(self):
        nu = self.nu
        return MomentBound((nu + 3.0) ** 4 / (16.0 * nu * nu), 0.0,
                           exact=False, pointwise=True)

    def __repr__(self):
        return f"StudentTLocation(nu={self.nu})"


class NormalMeanVar(ModelFamily):
    """Normal with unknown mean and variance, theta = (mu, sigma^2)."""
    name = "normal_meanvar"
    dim = 2
    param_names = ["mu", "sigma2"]

    def in_domain(self, theta):
        t = np.asarray(theta)
        return np.all(np.isfinite(t), axis=-1) & (t[..., 1] > 0)

    def _score(self, theta, y):
        mu, s2 = theta[..., 0], theta[..., 1]
        r = y - mu
        return np.stack([r / s2, (r * r - s2) / (2.0 * s2 * s2)], axis=-1)

    def _fisher_inverse(self, theta):
        s2 = theta[..., 1]
        out = np.zeros(theta.shape[:-1] + (2, 2))
        out[..., 0, 0] = s2
        out[..., 1, 1] = 2.0 * s2 * s2
        return out

    def _natgrad(self, theta, y):
        r = y - theta[..., 0]
        return np.stack([r, r * r - theta[..., 1]], axis=-1)

    def _log_density(self, theta, y):
        mu, s2 = theta[..., 0], theta[..., 1]
        r = y - mu
        return -0.5 * (LOG_2PI + np.log(s2) + r * r / s2)

    def simulate(self, theta, rng):
        mu, s2 = theta[..., 0], theta[..., 1]
        return mu + np.sqrt(s2) * rng.standard_normal(size=mu.shape or None)

    def moment_bound(self):
        # E||Z||^4 = 3 s^4 + 20 s^6 + 60 s^8 with s^2 the variance; bound the
        # lower powers by 1 + s^8 and use s^8 <= ||theta||^4
        return MomentBound(23.0, 83.0, exact=False)


class MultivariateNormal(ModelFamily):
    """d-variate normal with unknown mean and covariance.

    Parameter layout: means ``mu_1..mu_d``, then variances ``s_1..s_d``,
    then covariances ``s_jk`` for ``j < k`` in row-major order.
    """
    name = "mvnormal"

    def __init__(self, d: int = 2):
        if d < 1:
            raise DomainError("mvnormal: dimension must be at least 1")
        self.d = int(d)
        self.event_shape = (self.d,)
        self.pairs = [(j, k) for j in range(d) for k in range(j + 1, d)]
        # index of every covariance entry in the variance block
        self.entries = [(j, j) for j in range(d)] + self.pairs
        self.dim = d + len(self.entries)
        sep = "_" if d > 9 else ""
        self.param_names = ([f"mu{j + 1}" for j in range(d)]
                            + [f"s{j + 1}" for j in range(d)]
                            + [f"s{j + 1}{sep}{k + 1}" for j, k in self.pairs])
        rows = np.array([e[0] for e in self.entries])
        cols = np.array([e[1] for e in self.entries])
        self._rows, self._cols = rows, cols

    def __repr__(self):
        return f"MultivariateNormal(d={self.d})"

    def split(self, theta):
        """Mean vectors and covariance matrices from parameter vectors."""
        theta = np.asarray(theta, dtype=float)
        d = self.d
        mu = theta[..., :d]
        cov = np.empty(theta.shape[:-1] + (d, d))
        v = theta[..., d:]
        cov[..., self._rows, self._cols] = v
        cov[..., self._cols, self._rows] = v
        return mu, cov

    def pack(self, mu, cov):
        mu = np.asarray(mu, dtype=float)
        cov = np.asarray(cov, dtype=float)
        return np.concatenate([mu, cov[..., self._rows, self._cols]], axis=-1)

    def in_domain(self, theta):
        theta = np.asarray(theta, dtype=float)
        ok = np.all(np.isfinite(theta), axis=-1)
        _, cov = self.split(np.where(ok[..., None], theta, 1.0))
        # Sylvester: all leading principal minors positive
        for k in range(1, self.d + 1):
            if k == 1:
                m = cov[..., 0, 0]
            elif k == 2:
                m = cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] ** 2
            else:
                m = np.linalg.det(cov[..., :k, :k])
            ok &= m > 0
        return ok

    def in_support(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape[-1:] != (self.d,):
            return np.zeros(y.shape[:-1], dtype=bool)
        return np.all(np.isfinite(y), axis=-1)

    def _score(self, theta, y):
        mu, cov = self.split(theta)
        prec = np.linalg.inv(cov)
        r = y - mu
        pr = np.einsum("...ij,...j->...i", prec, r)
        g = 0.5 * (pr[..., :, None] * pr[..., None, :] - prec)
        sv = g[..., self._rows, self._cols]
        sv[..., self.d:] *= 2.0   # off-diagonal entries appear twice
        return np.concatenate([pr, sv], axis=-1)

    def _fisher_inverse(self, theta):
        d = self.d
        _, cov = self.split(theta)
        out = np.zeros(theta.shape[:-1] + (self.dim, self.dim))
        out[..., :d, :d] = cov
        j, k = self._rows, self._cols
        # J[(jk),(lm)] = s_jm s_lk + s_jl s_mk
        J = (cov[..., j[:, None], k[None, :]] * cov[..., j[None, :], k[:, None]]
             + cov[..., j[:, None], j[None, :]] * cov[..., k[:, None], k[None, :]])
        out[..., d:, d:] = J
        return out

    def _natgrad(self, theta, y):
        d = self.d
        r = y - theta[..., :d]
        outer = r[..., self._rows] * r[..., self._cols]
        return np.concatenate([r, outer - theta[..., d:]], axis=-1)

    def _log_density(self, theta, y):
        mu, cov = self.split(theta)
        sign, logdet = np.linalg.slogdet(cov)
        r = y - mu
        q = np.einsum("...i,...i->...", r, np.linalg.solve(cov, r[..., None])[..., 0])
        return -0.5 * (self.d * LOG_2PI + logdet + q)

    def simulate(self, theta, rng):
        mu, cov = self.split(theta)
        L = np.linalg.cholesky(cov)
        eps = rng.standard_normal(size=mu.shape)
        return mu + np.einsum("...ij,...j->...i", L, eps)


FAMILIES = ("exponential", "normal_mean", "normal_var", "student_t",
            "normal_meanvar", "mvnormal")


def make_family(name: str, *, nu: float = 5.0, sigma2: float = 1.0,
                d: int | None = None) -> ModelFamily:
    """Build an i.i.d. family from its registry name."""
    if name == "exponential":
        return ExponentialScale()
    if name == "normal_mean":
        return NormalKnownVar(sigma2)
    if name == "normal_var":
        return NormalVarianceOnly()
    if name == "student_t":
        return StudentTLocation(nu)
    if name == "normal_meanvar":
        return NormalMeanVar()
    if name == "mvnormal":
        return MultivariateNormal(2 if d is None else d)
    raise ValueError(f"unknown model family {name!r}")
