"""Fixed-design regression families.

The covariates are held fixed at the observed design; imputed covariates are
drawn uniformly from its rows.  Families share the vectorised conventions of
:mod:`mpost.models`, with an extra covariate argument ``x`` of shape
``(..., p)``.  The Fisher information used for preconditioning is the
empirical average over the design.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DomainError, EmptyDesign, SingularDesign, SupportError
from .models import LOG_2PI, ModelFamily, MomentBound


@dataclass(frozen=True)
class DesignMatrix:
    rows: np.ndarray
    names: tuple = ()
    sigma_nx: np.ndarray = field(init=False, repr=False)
    sigma_nx_inv: np.ndarray = field(init=False, repr=False)
    min_eig: float = field(init=False)
    k_max: float = field(init=False)

    def __post_init__(self):
        X = np.asarray(self.rows, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise EmptyDesign("design matrix has no rows")
        if not np.all(np.isfinite(X)):
            raise SingularDesign("design matrix contains non-finite values")
        X = X.copy()
        X.setflags(write=False)
        n = X.shape[0]
        S = X.T @ X / n
        S = 0.5 * (S + S.T)
        eig = np.linalg.eigvalsh(S)
        if eig[0] <= 1e-12 * max(eig[-1], 1e-300):
            raise SingularDesign(
                f"empirical second-moment matrix is singular (min eig {eig[0]:.3g})")
        names = tuple(self.names) or tuple(f"beta{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValueError("one name per design column required")
        Sinv = np.linalg.inv(S)
        object.__setattr__(self, "rows", X)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "sigma_nx", S)
        object.__setattr__(self, "sigma_nx_inv", 0.5 * (Sinv + Sinv.T))
        object.__setattr__(self, "min_eig", float(eig[0]))
        object.__setattr__(self, "k_max", float(np.max(np.sum(X * X, axis=1))))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def p(self) -> int:
        return self.rows.shape[1]


def resample_covariate(design: DesignMatrix, rng, size=None) -> np.ndarray:
    """Rows drawn uniformly from the design (with replacement)."""
    if design is None or design.n < 1:
        raise EmptyDesign("cannot resample from an empty design")
    idx = rng.integers(0, design.n, size=size)
    return design.rows[idx]


@dataclass(frozen=True)
class EmpiricalFisher:
    matrix: np.ndarray
    inverse: np.ndarray
    theta: np.ndarray


class RegressionFamily(ModelFamily):
    conditional = True
    scale_name = None

    def __init__(self, design: DesignMatrix):
        if not isinstance(design, DesignMatrix):
            design = DesignMatrix(design)
        self.design = design
        self.p = design.p
        names = list(design.names)
        if self.scale_name:
            names.append(self.scale_name)
        self.param_names = names
        self.dim = len(names)

    def __repr__(self):
        return f"{type(self).__name__}(n={self.design.n}, p={self.p})"

    def in_domain(self, theta):
        t = np.asarray(theta)
        ok = np.all(np.isfinite(t), axis=-1)
        if self.scale_name:
            ok &= t[..., -1] > 0
        return ok

    def check_x(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.p,) or not np.all(np.isfinite(x)):
            raise SupportError(f"{self.name}: covariate row must have {self.p} "
                               "finite entries")
        return x

    def _empirical_fisher(self, theta):
        raise NotImplementedError

    def empirical_fisher(self, theta) -> EmpiricalFisher:
        t = self.check_theta(theta)
        M = self._empirical_fisher(t)
        return EmpiricalFisher(M, np.linalg.inv(M), t)

    def _fisher_inverse(self, theta):
        return np.linalg.inv(self._empirical_fisher(theta))

    def fisher(self, theta):
        return self._empirical_fisher(self.check_theta(theta))

    def score(self, theta, y, x):
        t = self.check_theta(theta)
        return self._score(t, self.check_y(y), self.check_x(x))

    def natural_gradient(self, theta, y, x):
        t = self.check_theta(theta)
        return self._natgrad(t, self.check_y(y), self.check_x(x))

    def natural_gradient_composed(self, theta, y, x):
        t = self.check_theta(theta)
        s = self._score(t, self.check_y(y), self.check_x(x))
        return np.einsum("...ij,...j->...i", self._fisher_inverse(t), s)

    def log_density(self, theta, y, x):
        t = self.check_theta(theta)
        return self._log_density(t, self.check_y(y), self.check_x(x))

    def draw(self, theta, rng, x=None):
        return self.simulate(self.check_theta(theta), rng, self.check_x(x))

    def _linpred(self, theta, x):
        return np.einsum("...j,...j->...", theta[..., :self.p], x)


class NormalLinear(RegressionFamily):
    """Gaussian linear model, theta = (beta, sigma^2)."""
    name = "normal_linear"
    scale_name = "sigma2"

    def _empirical_fisher(self, theta):
        p = self.p
        s2 = theta[..., -1]
        out = np.zeros(theta.shape[:-1] + (p + 1, p + 1))
        out[..., :p, :p] = self.design.sigma_nx / s2[..., None, None]
        out[..., p, p] = 1.0 / (2.0 * s2 * s2)
        return out

    def _fisher_inverse(self, theta):
        p = self.p
        s2 = theta[..., -1]
        out = np.zeros(theta.shape[:-1] + (p + 1, p + 1))
        out[..., :p, :p] = self.design.sigma_nx_inv * s2[..., None, None]
        out[..., p, p] = 2.0 * s2 * s2
        return out

    def _score(self, theta, y, x):
        s2 = theta[..., -1]
        r = y - self._linpred(theta, x)
        sb = (r / s2)[..., None] * x
        return np.concatenate([sb, ((r * r - s2) / (2 * s2 * s2))[..., None]], axis=-1)

    def _natgrad(self, theta, y, x):
        r = y - self._linpred(theta, x)
        zb = r[..., None] * (x @ self.design.sigma_nx_inv)
        return np.concatenate([zb, (r * r - theta[..., -1])[..., None]], axis=-1)

    def _log_density(self, theta, y, x):
        s2 = theta[..., -1]
        r = y - self._linpred(theta, x)
        return -0.5 * (LOG_2PI + np.log(s2) + r * r / s2)

    def simulate(self, theta, rng, x):
        m = self._linpred(theta, x)
        return m + np.sqrt(theta[..., -1]) * rng.standard_normal(size=m.shape or None)


class RobustTLinear(RegressionFamily):
    """Linear model with Student-t errors, theta = (beta, tau^2), fixed nu."""
    name = "robust_t"
    scale_name = "tau2"

    def __init__(self, design: DesignMatrix, nu: float = 5.0):
        if not (np.isfinite(nu) and nu > 1):
            raise DomainError("robust_t: nu must exceed 1")
        super().__init__(design)
        self.nu = float(nu)

    def __repr__(self):
        return f"RobustTLinear(n={self.design.n}, p={self.p}, nu={self.nu})"

    def _empirical_fisher(self, theta):
        p, nu = self.p, self.nu
        t2 = theta[..., -1]
        out = np.zeros(theta.shape[:-1] + (p + 1, p + 1))
        out[..., :p, :p] = ((nu + 1) / (nu + 3)) * self.design.sigma_nx / t2[..., None, None]
        out[..., p, p] = nu / (2.0 * (nu + 3) * t2 * t2)
        return out

    def _fisher_inverse(self, theta):
        p, nu = self.p, self.nu
        t2 = theta[..., -1]
        out = np.zeros(theta.shape[:-1] + (p + 1, p + 1))
        out[..., :p, :p] = ((nu + 3) / (nu + 1)) * self.design.sigma_nx_inv * t2[..., None, None]
        out[..., p, p] = 2.0 * (nu + 3) * t2 * t2 / nu
        return out

    def _score(self, theta, y, x):
        nu = self.nu
        t2 = theta[..., -1]
        tau = np.sqrt(t2)
        R = (y - self._linpred(theta, x)) / tau
        d = nu + R * R
        sb = ((nu + 1) * R / (d * tau))[..., None] * x
        st = nu * (R * R - 1) / (2 * t2 * d)
        return np.concatenate([sb, st[..., None]], axis=-1)

    def _natgrad(self, theta, y, x):
        nu = self.nu
        t2 = theta[..., -1]
        tau = np.sqrt(t2)
        R = (y - self._linpred(theta, x)) / tau
        d = nu + R * R
        zb = (tau * (nu + 3) * R / d)[..., None] * (x @ self.design.sigma_nx_inv)
        zt = t2 * (nu + 3) * (R * R - 1) / d
        return np.concatenate([zb, zt[..., None]], axis=-1)

    def _log_density(self, theta, y, x):
        nu = self.nu
        t2 = theta[..., -1]
        R2 = (y - self._linpred(theta, x)) ** 2 / t2
        c = (special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2)
             - 0.5 * np.log(nu * np.pi))
        return c - 0.5 * np.log(t2) - (nu + 1) / 2 * np.log1p(R2 / nu)

    def simulate(self, theta, rng, x):
        m = self._linpred(theta, x)
        return m + np.sqrt(theta[..., -1]) * rng.standard_t(self.nu, size=m.shape or None)

    def moment_bound(self):
        # |R|/(nu+R^2) <= 1/(2 sqrt(nu)), |R^2-1|/(nu+R^2) <= 1 and
        # x' S^-2 x <= K_max / delta^2, then tau^4, tau^6 <= 1 + tau^8
        nu = self.nu
        M = self.design.k_max / self.design.min_eig**2
        a = M * M / (16 * nu * nu) + M / (2 * nu)
        k = (nu + 3) ** 4
        return MomentBound(k * a, k * (1 + a), exact=False, pointwise=True)


class LogisticTruncated(RegressionFamily):
    """Logistic regression preconditioned by a truncated empirical Fisher."""
    name = "logistic"

    def __init__(self, design: DesignMatrix, kappa: float = 1e-3):
        if not (np.isfinite(kappa) and kappa > 0):
            raise DomainError("logistic: kappa must be positive")
        super().__init__(design)
        self.kappa = float(kappa)

    def __repr__(self):
        return f"LogisticTruncated(n={self.design.n}, p={self.p}, kappa={self.kappa})"

    def in_support(self, y):
        y = np.asarray(y, dtype=float)
        return (y == 0) | (y == 1)

    def _empirical_fisher(self, theta):
        X = self.design.rows
        eta = theta @ X.T                       # (..., n)
        pr = special.expit(eta)
        w = np.maximum(pr * (1 - pr), self.kappa)
        return np.einsum("...i,ij,ik->...jk", w, X, X) / self.design.n

    def _score(self, theta, y, x):
        m = special.expit(self._linpred(theta, x))
        return (y - m)[..., None] * x

    def _natgrad(self, theta, y, x):
        s = self._score(theta, y, x)
        return np.linalg.solve(self._empirical_fisher(theta), s[..., None])[..., 0]

    def _log_density(self, theta, y, x):
        eta = self._linpred(theta, x)
        # log sigma(eta) = -log(1 + exp(-eta))
        return -np.logaddexp(0.0, np.where(y == 1, -eta, eta))

    def simulate(self, theta, rng, x):
        m = special.expit(self._linpred(theta, x))
        return (rng.random(size=m.shape or None) < m).astype(float)

    def moment_bound(self):
        d = self.design
        return MomentBound(d.k_max**2 / (self.kappa**4 * d.min_eig**4), 0.0,
                           exact=False, pointwise=True)


REGRESSION_FAMILIES = ("normal_linear", "robust_t", "logistic")


def make_regression(name: str, design, *, nu: float = 5.0, kappa: float = 1e-3):
    if name == "normal_linear":
        return NormalLinear(design)
    if name == "robust_t":
        return RobustTLinear(design, nu)
    if name == "logistic":
        return LogisticTruncated(design, kappa)
    raise ValueError(f"unknown regression family {name!r}")


def empirical_fisher(family: RegressionFamily, theta) -> EmpiricalFisher:
    return family.empirical_fisher(theta)


def natural_gradient_reg(family: RegressionFamily, theta, y, x,
                         fisher: EmpiricalFisher | None = None) -> np.ndarray:
    """Score preconditioned by a supplied empirical Fisher.

    Without ``fisher`` this is the family's closed form, which evaluates the
    empirical Fisher at ``theta`` itself.
    """
    if fisher is None:
        return family.natural_gradient(theta, y, x)
    s = family.score(theta, y, x)
    return np.einsum("...ij,...j->...i", fisher.inverse, s)


def simulate_response(family: RegressionFamily, theta, x, rng) -> np.ndarray:
    return family.draw(theta, rng, x)
