"""Random effects meta-regression fitting.

The model is y_i = x_i' beta + u_i + e_i with u_i ~ N(0, tau2) and
e_i ~ N(0, v_i), v_i known.  Coefficients come from weighted least
squares with weights 1/(v_i + tau2), tau2 from REML (profile restricted
likelihood, bounded scalar search) or the DerSimonian-Laird moment
estimator, and the coefficient covariance from the Hartung-Knapp /
Sidik-Jonkman small-sample estimator.  Wald tests use a t reference
distribution with k - m degrees of freedom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize_scalar
from scipy.special import betainc

from .data import DesignMatrix, MetaDataset, ModelSpec, build_design
from .errors import (
    DimensionMismatch,
    IndexOutOfRange,
    InsufficientDF,
    SingularDesign,
    ZeroStandardError,
)

# Weighted cross-product matrices worse conditioned than this are treated
# as singular rather than solved.
_COND_LIMIT = 1e12

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FitOptions:
    """Knobs for a single model fit.

    ``tau2_method`` is ``"reml"``, ``"dl"``, or a fixed nonnegative value.
    """

    tau2_method: str | float = "reml"
    max_iter: int = 1000
    reml_tol: float = 1e-8

    def __post_init__(self) -> None:
        if isinstance(self.tau2_method, str):
            method = self.tau2_method.lower()
            if method not in ("reml", "dl"):
                raise ValueError(f"unknown tau2 method {self.tau2_method!r}")
            self.tau2_method = method
        else:
            value = float(self.tau2_method)
            if not (value >= 0.0 and math.isfinite(value)):
                raise ValueError("fixed tau2 must be finite and nonnegative")
            self.tau2_method = value
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.reml_tol > 0.0:
            raise ValueError("reml_tol must be positive")


@dataclass
class FitResult:
    """Fitted model: coefficients, HKSJ covariance, tau2, log-likelihood."""

    spec: ModelSpec
    beta: np.ndarray
    sigma: np.ndarray
    tau2: float
    loglik: float
    m: int
    k: int
    converged: bool
    max_se: float
    names: tuple[str, ...] = field(default=())

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.sigma), 0.0))

    def to_dict(self) -> dict:
        names = self.names if self.names else tuple(
            f"b{j}" for j in range(self.m)
        )
        se = self.se
        return {
            "spec": {
                "mains": list(self.spec.mains),
                "interactions": [list(pair) for pair in self.spec.interactions],
            },
            "coefficients": {
                name: {"estimate": float(b), "se": float(s)}
                for name, b, s in zip(names, self.beta, se)
            },
            "tau2": float(self.tau2),
            "loglik": float(self.loglik),
            "k": int(self.k),
            "m": int(self.m),
            "converged": bool(self.converged),
            "max_se": float(self.max_se),
        }


def _design_values(X) -> np.ndarray:
    if isinstance(X, DesignMatrix):
        return X.values
    return np.asarray(X, dtype=float)


def log_likelihood(ds: MetaDataset, X, beta, tau2: float) -> float:
    """Unrestricted normal log-likelihood of (beta, tau2) on the dataset."""
    V = _design_values(X)
    beta = np.asarray(beta, dtype=float)
    if V.ndim != 2 or V.shape[0] != ds.k:
        raise DimensionMismatch("design matrix must have one row per study")
    if beta.shape != (V.shape[1],):
        raise DimensionMismatch(
            f"beta has length {beta.shape[0]} for {V.shape[1]} columns"
        )
    if tau2 < 0.0:
        raise ValueError("tau2 must be nonnegative")
    d = ds.v + tau2
    resid = ds.y - V @ beta
    return float(
        -0.5 * ds.k * _LOG_2PI
        - 0.5 * np.sum(np.log(d))
        - 0.5 * np.sum(resid * resid / d)
    )


def _crossprod(V: np.ndarray, y: np.ndarray, w: np.ndarray):
    Vw = V * w[:, None]
    return V.T @ Vw, Vw.T @ y


def _guarded_solve(A: np.ndarray, b: np.ndarray):
    """Solve A x = b after a condition-number check on A."""
    if not np.all(np.isfinite(A)):
        raise SingularDesign("weighted cross-product matrix is not finite")
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularDesign(
            f"weighted design condition number {cond:.3e} exceeds {_COND_LIMIT:.0e}"
        )
    try:
        factor = cho_factor(A, lower=True)
    except LinAlgError as exc:
        raise SingularDesign("weighted cross-product matrix is not "
                             "positive definite") from exc
    return cho_solve(factor, b), factor


def fit_beta(ds: MetaDataset, X, tau2: float) -> np.ndarray:
    """Weighted least squares coefficients at a given tau2."""
    V = _design_values(X)
    if V.shape[0] != ds.k:
        raise DimensionMismatch("design matrix must have one row per study")
    w = 1.0 / (ds.v + tau2)
    A, b = _crossprod(V, ds.y, w)
    beta, _ = _guarded_solve(A, b)
    return beta


# Finite stand-in for -inf: feeding actual infinities to the bounded
# scalar optimizer makes its parabolic steps produce NaNs.
_SINGULAR_PENALTY = -1e300


def _profile_restricted(y: np.ndarray, V: np.ndarray, v: np.ndarray,
                        tau2: float) -> float:
    """Restricted log-likelihood profiled over beta, huge penalty when
    the weighted normal equations are singular."""
    d = v + tau2
    w = 1.0 / d
    A, b = _crossprod(V, y, w)
    try:
        factor = cho_factor(A, lower=True)
    except LinAlgError:
        return _SINGULAR_PENALTY
    beta = cho_solve(factor, b)
    resid = y - V @ beta
    ll = (
        -0.5 * y.size * _LOG_2PI
        - 0.5 * np.sum(np.log(d))
        - 0.5 * np.sum(resid * resid * w)
    )
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return float(ll - 0.5 * logdet)


def _reml_tau2(ds: MetaDataset, V: np.ndarray, max_iter: int,
               tol: float) -> tuple[float, bool]:
    var_y = float(np.var(ds.y, ddof=1)) if ds.k > 1 else 0.0
    hi = 10.0 * var_y
    if hi <= 0.0:
        return 0.0, True
    result = minimize_scalar(
        lambda t: -_profile_restricted(ds.y, V, ds.v, t),
        bounds=(0.0, hi),
        method="bounded",
        options={"xatol": tol, "maxiter": max_iter},
    )
    tau2 = max(float(result.x), 0.0)
    # The bounded search never evaluates the boundary itself; prefer an
    # exact zero when the profile is no worse there.
    if _profile_restricted(ds.y, V, ds.v, 0.0) >= -result.fun:
        tau2 = 0.0
    return tau2, bool(result.success)


def _dl_tau2(ds: MetaDataset, V: np.ndarray) -> float:
    k, m = V.shape
    if k <= m:
        raise InsufficientDF(f"k={k} studies cannot identify tau2 with m={m}")
    w0 = 1.0 / ds.v
    A, b = _crossprod(V, ds.y, w0)
    beta0, factor = _guarded_solve(A, b)
    resid = ds.y - V @ beta0
    q = float(np.sum(w0 * resid * resid))
    a_inv = cho_solve(factor, np.eye(m))
    b_mat = V.T @ (V * (w0 * w0)[:, None])
    c = float(np.sum(w0) - np.trace(a_inv @ b_mat))
    if c <= 0.0:
        return 0.0
    return max(0.0, (q - (k - m)) / c)


def estimate_tau2(ds: MetaDataset, X, method: str = "reml", *,
                  max_iter: int = 1000, tol: float = 1e-8) -> float:
    """Between-study variance estimate for a given design.

    ``method`` is ``"reml"`` (profile restricted likelihood maximized on
    [0, 10 * var(y)] by bounded scalar search) or ``"dl"`` (moment
    estimator with truncation at zero).
    """
    V = _design_values(X)
    k, m = V.shape
    if k <= m:
        raise InsufficientDF(f"k={k} studies cannot identify tau2 with m={m}")
    method = method.lower()
    if method == "reml":
        tau2, _ = _reml_tau2(ds, V, max_iter, tol)
        return tau2
    if method == "dl":
        return _dl_tau2(ds, V)
    raise ValueError(f"unknown tau2 method {method!r}")


def hksj_covariance(ds: MetaDataset, X, tau2_hat: float) -> np.ndarray:
    """Small-sample coefficient covariance s^2 (X'WX)^{-1}.

    s^2 is the weighted residual sum of squares over k - m, with weights
    at the estimated tau2.
    """
    V = _design_values(X)
    k, m = V.shape
    if k <= m:
        raise InsufficientDF(f"k={k} studies leave no residual df for m={m}")
    w = 1.0 / (ds.v + tau2_hat)
    A, b = _crossprod(V, ds.y, w)
    beta, factor = _guarded_solve(A, b)
    resid = ds.y - V @ beta
    s2 = float(np.sum(w * resid * resid)) / (k - m)
    a_inv = cho_solve(factor, np.eye(m))
    sigma = s2 * a_inv
    sigma = 0.5 * (sigma + sigma.T)
    diag = np.arange(m)
    sigma[diag, diag] = np.maximum(sigma[diag, diag], 0.0)
    return sigma


def fit(ds: MetaDataset, spec: ModelSpec,
        options: FitOptions | None = None) -> FitResult:
    """Estimate tau2, coefficients, covariance, and log-likelihood.

    The reported log-likelihood is always the unrestricted one evaluated
    at the final (beta, tau2), whatever method produced tau2.
    """
    opts = options if options is not None else FitOptions()
    X = build_design(ds, spec)
    k, m = X.k, X.m
    if k <= m:
        raise InsufficientDF(f"k={k} studies cannot support m={m} coefficients")
    converged = True
    if opts.tau2_method == "reml":
        tau2, converged = _reml_tau2(ds, X.values, opts.max_iter, opts.reml_tol)
    elif opts.tau2_method == "dl":
        tau2 = _dl_tau2(ds, X.values)
    else:
        tau2 = float(opts.tau2_method)
    beta = fit_beta(ds, X, tau2)
    sigma = hksj_covariance(ds, X, tau2)
    loglik = log_likelihood(ds, X, beta, tau2)
    se = np.sqrt(np.maximum(np.diag(sigma), 0.0))
    max_se = float(np.max(se[1:])) if m > 1 else 0.0
    return FitResult(
        spec=spec,
        beta=beta,
        sigma=sigma,
        tau2=float(tau2),
        loglik=loglik,
        m=m,
        k=k,
        converged=converged,
        max_se=max_se,
        names=X.names,
    )


def student_t_cdf(t: float, df: float) -> float:
    """CDF of the t distribution via the regularized incomplete beta."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if t != t:
        raise ValueError("t statistic is NaN")
    if np.isinf(t):
        return 1.0 if t > 0 else 0.0
    tail = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return 1.0 - 0.5 * tail if t >= 0 else 0.5 * tail


def wald_pvalue(fit_result: FitResult, j: int) -> float:
    """Two-sided p-value for coefficient j against a t(k - m) reference."""
    if j < 0 or j >= fit_result.m:
        raise IndexOutOfRange(
            f"coefficient index {j} outside 0..{fit_result.m - 1}"
        )
    df = fit_result.k - fit_result.m
    if df <= 0:
        raise InsufficientDF("no residual degrees of freedom for the test")
    var = float(fit_result.sigma[j, j])
    if var <= 0.0:
        raise ZeroStandardError(f"coefficient {j} has zero standard error")
    t_stat = float(fit_result.beta[j]) / math.sqrt(var)
    p = float(betainc(df / 2.0, 0.5, df / (df + t_stat * t_stat)))
    return min(max(p, 0.0), 1.0)
