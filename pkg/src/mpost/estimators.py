"""Initial estimates theta_n from observed data."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import (DomainError, InsufficientData, NoConvergence, NonPDCovariance,
                     Separation)
from .models import (ExponentialScale, ModelFamily, MultivariateNormal, NormalKnownVar,
                     NormalMeanVar, NormalVarianceOnly, StudentTLocation)
from .regression import DesignMatrix, LogisticTruncated, NormalLinear, RobustTLinear

METHODS = ("moments", "sgd_onepass", "irls_t", "logistic_newton")


@dataclass
class EstimatorSpec:
    method: str | None = None     # None picks the family default
    restarts: int = 10
    tol: float = 1e-8
    max_iter: int = 200
    theta0: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method is not None and self.method not in METHODS:
            raise ValueError(f"estimator must be one of {METHODS}")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


def estimate_moments(family: ModelFamily, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    n = y.shape[0] if y.ndim else 0
    if n < 1:
        raise InsufficientData("no observations")
    family.check_y(y)
    if isinstance(family, (ExponentialScale, NormalKnownVar)):
        return np.array([y.mean()])
    if isinstance(family, NormalVarianceOnly):
        return np.array([np.mean(y * y)])
    if isinstance(family, StudentTLocation):
        return np.array([y.mean()])
    if n < 2:
        raise InsufficientData(f"{family.name}: variance estimate needs n >= 2")
    if isinstance(family, NormalMeanVar):
        return np.array([y.mean(), y.var(ddof=1)])
    if isinstance(family, MultivariateNormal):
        mu = y.mean(axis=0)
        cov = np.atleast_2d(np.cov(y, rowvar=False, ddof=1))
        theta = family.pack(mu, cov)
        if not family.in_domain(theta):
            raise NonPDCovariance("sample covariance is not positive definite")
        return theta
    raise ValueError(f"no moment estimator for {family.name}")


def estimate_sgd_onepass(family: ModelFamily, y, theta0, x=None) -> np.ndarray:
    """Run the recursion with learning rate 1/N over the data in order."""
    theta = family.check_theta(theta0).astype(float).copy()
    y = family.check_y(y)
    if family.conditional:
        x = family.check_x(np.asarray(x, dtype=float))
    for i in range(y.shape[0]):
        N = i + 1
        if family.conditional:
            z = family._natgrad(theta, y[i], x[i])
        else:
            z = family._natgrad(theta, y[i])
        theta = theta + z / N
        if not family.in_domain(theta):
            raise DomainError(f"{family.name}: one-pass estimate left the domain "
                              f"at N={N}")
    return theta


# ---- robust t regression -------------------------------------------------------

@dataclass
class IRLSResult:
    theta: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def _t_loglik(X, y, beta, tau2, nu):
    R2 = (y - X @ beta) ** 2 / tau2
    c = special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2) - 0.5 * np.log(nu * np.pi)
    return float(np.sum(c - 0.5 * np.log(tau2) - (nu + 1) / 2 * np.log1p(R2 / nu)))


def irls_t_fit(X, y, nu, beta0, tau20, tol=1e-8, max_iter=200) -> IRLSResult:
    """One EM run for the t linear model from a given start."""
    beta, tau2 = np.asarray(beta0, dtype=float), float(tau20)
    trace = [_t_loglik(X, y, beta, tau2, nu)]
    for it in range(1, max_iter + 1):
        r = y - X @ beta
        w = (nu + 1) / (nu + r * r / tau2)
        Xw = X * w[:, None]
        new_beta = np.linalg.solve(X.T @ Xw, Xw.T @ y)
        r = y - X @ new_beta
        new_tau2 = max(float(np.mean(w * r * r)), tol)
        change = max(np.max(np.abs(new_beta - beta)), abs(new_tau2 - tau2))
        beta, tau2 = new_beta, new_tau2
        trace.append(_t_loglik(X, y, beta, tau2, nu))
        if change < tol:
            return IRLSResult(np.append(beta, tau2), trace[-1], it, True, trace)
    return IRLSResult(np.append(beta, tau2), trace[-1], max_iter, False, trace)


def estimate_irls_t(design: DesignMatrix, y, nu: float, spec: EstimatorSpec | None = None
                    ) -> np.ndarray:
    return irls_t_restarts(design, y, nu, spec)[0].theta


def irls_t_restarts(design, y, nu, spec=None):
    """Best fit over ``spec.restarts`` starts and the list of all fits.

    The first start is the OLS fit; the others perturb it with normal noise of
    sd 0.5 times each coefficient's natural scale and draw tau^2 log-normally
    around the residual variance.
    """
    spec = spec or EstimatorSpec("irls_t")
    if not nu > 1:
        raise DomainError("robust_t: nu must exceed 1")
    if not isinstance(design, DesignMatrix):
        design = DesignMatrix(design)
    X = design.rows
    y = np.asarray(y, dtype=float)
    if y.shape != (design.n,):
        raise ValueError("responses must match the design rows")
    ols = np.linalg.lstsq(X, y, rcond=None)[0]
    res = y - X @ ols
    s2 = max(float(np.mean(res * res)), spec.tol)
    sy = float(np.std(y)) or 1.0
    sx = np.std(X, axis=0)
    scale = np.where(sx > 0, sy / np.where(sx > 0, sx, 1.0), sy)
    rng = np.random.default_rng(spec.seed)
    fits = []
    for k in range(spec.restarts):
        if spec.theta0 is not None and k == 0:
            t0 = np.asarray(spec.theta0, dtype=float)
            b0, t20 = t0[:-1], t0[-1]
        elif k == 0:
            b0, t20 = ols, s2
        else:
            b0 = ols + 0.5 * scale * rng.standard_normal(ols.shape)
            t20 = s2 * np.exp(0.5 * rng.standard_normal())
        fits.append(irls_t_fit(X, y, nu, b0, t20, spec.tol, spec.max_iter))
    done = [f for f in fits if f.converged]
    if not done:
        raise NoConvergence(f"IRLS did not converge in {spec.max_iter} iterations "
                            f"from any of {spec.restarts} starts")
    best = max(done, key=lambda f: f.loglik)
    return best, fits


# ---- logistic regression -------------------------------------------------------

def estimate_logistic_newton(design: DesignMatrix, y, spec: EstimatorSpec | None = None
                             ) -> np.ndarray:
    spec = spec or EstimatorSpec("logistic_newton")
    if not isinstance(design, DesignMatrix):
        design = DesignMatrix(design)
    X = design.rows
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic responses must be 0 or 1")
    if np.all(y == y[0]):
        raise Separation("all responses are equal")
    beta = (np.zeros(design.p) if spec.theta0 is None
            else np.asarray(spec.theta0, dtype=float).copy())
    for _ in range(spec.max_iter):
        m = special.expit(X @ beta)
        g = X.T @ (y - m)
        if np.linalg.norm(g) < spec.tol:
            return beta
        w = m * (1 - m)
        H = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            raise Separation("Hessian became singular") from None
        if not np.all(np.isfinite(step)) or np.linalg.norm(step) > 1e6:
            raise Separation("Newton step diverged")
        beta = beta + step
        if np.max(np.abs(X @ beta)) > 30:
            raise Separation("fitted probabilities reached 0 or 1")
    raise NoConvergence(f"Newton did not converge in {spec.max_iter} iterations")


# ---- dispatch --------------------------------------------------------------------

def default_method(family) -> str:
    if isinstance(family, RobustTLinear):
        return "irls_t"
    if isinstance(family, LogisticTruncated):
        return "logistic_newton"
    if isinstance(family, StudentTLocation):
        return "sgd_onepass"
    return "moments"


def estimate(family, y, spec: EstimatorSpec | None = None) -> np.ndarray:
    """theta_n for ``family`` by ``spec.method`` (or the family default)."""
    spec = spec or EstimatorSpec()
    method = spec.method or default_method(family)
    y = np.asarray(y, dtype=float)
    if method == "moments":
        if isinstance(family, NormalLinear):
            X = family.design.rows
            beta = np.linalg.lstsq(X, y, rcond=None)[0]
            r = y - X @ beta
            dof = len(y) - family.p
            if dof < 1:
                raise InsufficientData("normal_linear: need more rows than columns")
            return np.append(beta, r @ r / dof)
        if family.conditional:
            raise ValueError(f"no moment estimator for {family.name}")
        return estimate_moments(family, y)
    if method == "sgd_onepass":
        if spec.theta0 is not None:
            theta0 = spec.theta0
        elif family.conditional:
            raise ValueError("sgd_onepass for regression needs theta0")
        elif isinstance(family, StudentTLocation):
            theta0 = [float(np.median(y))]
        else:
            theta0 = estimate_moments(family, y)
        x = family.design.rows if family.conditional else None
        return estimate_sgd_onepass(family, y, theta0, x)
    if method == "irls_t":
        if not isinstance(family, RobustTLinear):
            raise ValueError("irls_t applies to the robust_t family only")
        return estimate_irls_t(family.design, y, family.nu, spec)
    if method == "logistic_newton":
        if not isinstance(family, LogisticTruncated):
            raise ValueError("logistic_newton applies to the logistic family only")
        return estimate_logistic_newton(family.design, y, spec)
    raise ValueError(f"unknown estimator {method!r}")
