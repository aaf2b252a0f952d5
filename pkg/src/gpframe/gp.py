"""Exact Gaussian-process inference.

The model is ``y = f(x) + eps`` with ``f ~ GP(mean(x), k(x, x'))`` and
``eps ~ N(0, noise)``.  Training quantities are cached in a
:class:`PosteriorCache` holding the Cholesky factor of ``K + noise*I`` (plus
whatever jitter was needed) and ``alpha = (K + noise*I)^-1 (y - mean)``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack, solve_triangular

from . import kernels as kern
from .errors import (
    DimensionMismatch,
    LengthMismatch,
    NoConvergence,
    NonFiniteInput,
    NotPositiveDefinite,
    SizeCapExceeded,
)
from .kernels import HyperParam

_LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_JITTER_LADDER = (0.0, 1e-8, 1e-6, 1e-4)
DEFAULT_MAX_EXACT = 10_000
_PREDICT_BLOCK = 1024


###############################################################################
# model
###############################################################################


class MeanSpec:
    """Zero, constant or linear mean function.

    Linear means carry one weight per input column followed by an intercept.
    Mean parameters live on the real line and are optimized as-is.
    """

    def __init__(self, kind="zero", params=None, learnable=True):
        kind = kind.lower()
        if kind not in ("zero", "constant", "linear"):
            raise ValueError(f"unknown mean kind {kind!r}")
        self.kind = kind
        if kind == "zero":
            params = np.zeros(0)
        elif kind == "constant":
            params = np.zeros(1) if params is None else np.atleast_1d(np.asarray(params, float))
            if params.shape != (1,):
                raise LengthMismatch("constant mean takes one parameter")
        else:
            if params is None:
                raise ValueError("linear mean needs explicit weights (use with_dim)")
            params = np.asarray(params, float)
        self.params = params
        self.learnable = bool(learnable) and kind != "zero"

    @classmethod
    def linear(cls, n_features, weights=None, intercept=0.0, learnable=True):
        w = np.zeros(n_features) if weights is None else np.asarray(weights, float)
        if w.shape != (n_features,):
            raise LengthMismatch(f"linear mean needs {n_features} weights")
        return cls("linear", np.append(w, intercept), learnable)

    def __len__(self):
        return self.params.size

    def __call__(self, X):
        n = X.shape[0]
        if self.kind == "zero":
            return np.zeros(n)
        if self.kind == "constant":
            return np.full(n, self.params[0])
        w = self.params[:-1]
        if X.shape[1] != w.size:
            raise DimensionMismatch(f"linear mean has {w.size} weights, inputs have {X.shape[1]} columns")
        return X @ w + self.params[-1]

    def grad(self, X, alpha):
        """d/dparams of sum(alpha * mean(X))."""
        if self.kind == "zero":
            return np.zeros(0)
        if self.kind == "constant":
            return np.array([alpha.sum()])
        return np.append(X.T @ alpha, alpha.sum())

    def names(self):
        if self.kind == "constant":
            return ["mean.constant"]
        if self.kind == "linear":
            return [f"mean.weight.{i}" for i in range(self.params.size - 1)] + ["mean.intercept"]
        return []

    def to_dict(self):
        return {"kind": self.kind, "params": self.params.tolist(), "learnable": self.learnable}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d["params"] if d["kind"] != "zero" else None, d["learnable"])


@dataclass
class GPModel:
    """Mean, kernel and Gaussian noise.

    ``kernel=None`` denotes the zero kernel (pure noise model).
    """

    kernel: kern.KernelExpr | None
    noise: HyperParam = field(default_factory=lambda: HyperParam("noise", 1.0))
    mean: MeanSpec = field(default_factory=MeanSpec)
    jitter_ladder: tuple = DEFAULT_JITTER_LADDER
    max_exact: int = DEFAULT_MAX_EXACT

    def __post_init__(self):
        if isinstance(self.noise, (int, float)):
            self.noise = HyperParam("noise", float(self.noise), fixed=float(self.noise) == 0)
        self.noise.name = "noise"
        lad = tuple(float(j) for j in self.jitter_ladder)
        if any(b <= a for a, b in zip(lad, lad[1:])) or any(j < 0 for j in lad):
            raise ValueError("jitter ladder must be non-negative and strictly increasing")
        self.jitter_ladder = lad

    # -- parameter vector: kernel params, mean params, noise -----------------

    def kernel_params(self):
        return [] if self.kernel is None else self.kernel.params()

    def n_params(self):
        return len(self.kernel_params()) + len(self.mean) + 1

    def get_params(self):
        ku = [p.unconstrained for p in self.kernel_params()]
        return np.concatenate([ku, self.mean.params, [self.noise.unconstrained]])

    def with_params(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_params(),):
            raise LengthMismatch(f"expected {self.n_params()} parameters, got {v.shape}")
        out = copy.deepcopy(self)
        nk = len(out.kernel_params())
        for p, u in zip(out.kernel_params(), v[:nk]):
            if not p.fixed:
                p.unconstrained = u
        nm = len(out.mean)
        if out.mean.learnable:
            out.mean.params = v[nk:nk + nm].copy()
        if not out.noise.fixed:
            out.noise.unconstrained = v[-1]
        return out

    def free_mask(self):
        kp = [not p.fixed for p in self.kernel_params()]
        mp = [self.mean.learnable] * len(self.mean)
        return np.array(kp + mp + [not self.noise.fixed], dtype=bool)

    def hyperparams(self):
        """All positive hyperparameters (kernel then noise)."""
        return self.kernel_params() + [self.noise]

    def param_names(self):
        kn = [] if self.kernel is None else kern.param_names(self.kernel)
        return kn + self.mean.names() + ["noise"]

    def bounds_u(self):
        """Per-parameter (lo, hi) box in unconstrained space."""
        lo, hi = [], []
        for p in self.kernel_params():
            a, b = (math.log(p.bounds[0]), math.log(p.bounds[1])) if p.bounds else (-math.inf, math.inf)
            lo.append(a)
            hi.append(b)
        lo += [-math.inf] * len(self.mean)
        hi += [math.inf] * len(self.mean)
        b = self.noise.bounds
        lo.append(math.log(b[0]) if b else -math.inf)
        hi.append(math.log(b[1]) if b else math.inf)
        return np.array(lo), np.array(hi)

    def log_prior(self):
        return sum(p.log_prior() for p in self.hyperparams())

    def log_prior_grad(self):
        kg = [p.log_prior_grad() for p in self.kernel_params()]
        return np.concatenate([kg, np.zeros(len(self.mean)), [self.noise.log_prior_grad()]])

    def K(self, A, B=None):
        B = A if B is None else B
        if self.kernel is None:
            return np.zeros((A.shape[0], B.shape[0]))
        return kern.eval_kernel(self.kernel, A, B)

    def kdiag(self, A):
        if self.kernel is None:
            return np.zeros(A.shape[0])
        return self.kernel.diag(A)

    def to_dict(self):
        return {
            "kernel": None if self.kernel is None else kern.to_dict(self.kernel),
            "noise": self.noise.to_dict(),
            "mean": self.mean.to_dict(),
            "jitter_ladder": list(self.jitter_ladder),
            "max_exact": self.max_exact,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kernel=None if d["kernel"] is None else kern.from_dict(d["kernel"]),
            noise=HyperParam.from_dict(d["noise"]),
            mean=MeanSpec.from_dict(d["mean"]),
            jitter_ladder=tuple(d["jitter_ladder"]),
            max_exact=d["max_exact"],
        )


@dataclass(frozen=True)
class PosteriorCache:
    L: np.ndarray
    alpha: np.ndarray
    train_inputs: np.ndarray
    train_targets: np.ndarray
    jitter_used: float
    residual: np.ndarray  # y - mean(X)


@dataclass
class PredictiveDistribution:
    mean: np.ndarray
    latent_variance: np.ndarray
    observation_variance: np.ndarray
    n_clamped: int = 0

    @property
    def obs_std(self):
        return np.sqrt(self.observation_variance)

    @property
    def latent_std(self):
        return np.sqrt(self.latent_variance)

    def __len__(self):
        return self.mean.size


###############################################################################
# factorization
###############################################################################


def _as_inputs(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if not np.all(np.isfinite(X)):
        raise NonFiniteInput("inputs contain NaN or Inf")
    return X


def _is_pd_factor(L, scale):
    d = np.diag(L)
    n = d.size
    return bool(np.all(np.isfinite(L)) and np.min(d) ** 2 > n * np.finfo(float).eps * scale)


def jittered_cholesky(M, ladder=DEFAULT_JITTER_LADDER):
    """Lower Cholesky factor of ``M + delta*I`` for the first workable ladder rung.

    Rungs are multiples of the mean diagonal of ``M``.  Returns ``(L, delta)``.
    A factorization whose smallest pivot is at round-off level counts as a
    failure, so exactly singular matrices move up the ladder.
    """
    n = M.shape[0]
    scale = float(np.mean(np.diag(M))) if n else 1.0
    if not scale > 0:
        scale = 1.0
    for rung in ladder:
        delta = rung * scale
        A = M + delta * np.eye(n) if delta else M
        L, info = lapack.dpotrf(A, lower=1, clean=1)
        if info == 0 and _is_pd_factor(L, scale):
            return L, delta
    raise NotPositiveDefinite(
        f"covariance not positive definite after jitter up to {ladder[-1]:g} x mean diagonal")


def fit_cache(model, X, y):
    """Factorize ``K + noise*I`` and solve for ``alpha``."""
    X = _as_inputs(X)
    y = np.asarray(y, dtype=float).ravel()
    n = X.shape[0]
    if n < 1:
        raise DimensionMismatch("need at least one training point")
    if y.size != n:
        raise DimensionMismatch(f"{n} inputs but {y.size} targets")
    if not np.all(np.isfinite(y)):
        raise NonFiniteInput("targets contain NaN or Inf")
    if n > model.max_exact:
        raise SizeCapExceeded(
            f"n={n} exceeds the exact-GP cap of {model.max_exact}; use experts or svgp scaling")
    K = model.K(X)
    K[np.diag_indices(n)] += model.noise.value
    L, delta = jittered_cholesky(K, model.jitter_ladder)
    r = y - model.mean(X)
    alpha = lapack.dpotrs(L, r, lower=1)[0]
    return PosteriorCache(L, alpha, X, y, delta, r)


def log_marginal_likelihood(model, cache, y=None):
    r = cache.residual if y is None else np.asarray(y, float) - model.mean(cache.train_inputs)
    alpha = cache.alpha if y is None else lapack.dpotrs(cache.L, r, lower=1)[0]
    n = r.size
    return float(-0.5 * r @ alpha - np.sum(np.log(np.diag(cache.L))) - 0.5 * n * _LOG_2PI)


def lml_and_grad(model, X, y):
    """Log marginal likelihood and its gradient w.r.t. ``model.get_params()``.

    Uses ``dLML/du = 0.5 * sum((alpha alpha^T - Kn^-1) * dK/du)``.
    """
    cache = fit_cache(model, X, y)
    X = cache.train_inputs
    lml = log_marginal_likelihood(model, cache)
    Kinv = lapack.dpotri(cache.L, lower=1)[0]
    Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
    a = cache.alpha
    W = np.outer(a, a) - Kinv
    kg = np.zeros(0) if model.kernel is None else 0.5 * model.kernel.vjp(X, X, W)
    mg = model.mean.grad(X, a)
    ng = 0.5 * np.trace(W) * model.noise.value
    return lml, np.concatenate([kg, mg, [ng]]), cache


def lml_gradient(model, X, y):
    return lml_and_grad(model, X, y)[1]


###############################################################################
# prediction and sampling
###############################################################################


def predict(model, cache, Xstar, full_cov=False):
    """Predictive mean and variances at ``Xstar``.

    Negative latent variances produced by cancellation are clamped to zero
    and counted in ``n_clamped``.  With ``full_cov`` the latent covariance
    matrix is returned as a second value.
    """
    Xs = _as_inputs(Xstar)
    X = cache.train_inputs
    if Xs.shape[1] != X.shape[1]:
        raise DimensionMismatch(f"test inputs have {Xs.shape[1]} columns, training {X.shape[1]}")
    m = Xs.shape[0]
    mean = np.empty(m)
    var = np.empty(m)
    for s in range(0, m, _PREDICT_BLOCK):
        blk = Xs[s:s + _PREDICT_BLOCK]
        Ks = model.K(X, blk)
        mean[s:s + len(blk)] = Ks.T @ cache.alpha + model.mean(blk)
        V = solve_triangular(cache.L, Ks, lower=True, check_finite=False)
        var[s:s + len(blk)] = model.kdiag(blk) - np.einsum("ij,ij->j", V, V)
    neg = var < 0
    var[neg] = 0.0
    out = PredictiveDistribution(mean, var, var + model.noise.value, int(neg.sum()))
    if not full_cov:
        return out
    Ks = model.K(X, Xs)
    V = solve_triangular(cache.L, Ks, lower=True, check_finite=False)
    cov = model.K(Xs) - V.T @ V
    return out, 0.5 * (cov + cov.T)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample(model, inputs, count, seed=None, condition=None):
    """Draw ``count`` function samples at ``inputs`` (rows of the result).

    Without ``condition`` the draws come from the prior; with a
    :class:`PosteriorCache` they come from the posterior over the latent f.
    """
    Xs = _as_inputs(inputs)
    m = Xs.shape[0]
    if count == 0:
        return np.empty((0, m))
    rng = _rng(seed)
    if condition is None:
        mu = model.mean(Xs)
        cov = model.K(Xs)
    else:
        pred, cov = predict(model, condition, Xs, full_cov=True)
        mu = pred.mean
    L, _ = jittered_cholesky(cov, model.jitter_ladder)
    z = rng.standard_normal((m, count))
    return (mu[:, None] + L @ z).T


def generate_synthetic(model, X, seed=None, return_latent=False):
    """One prior draw of f at ``X`` plus i.i.d. Gaussian noise at the model's noise level."""
    rng = _rng(seed)
    f = sample(model, X, 1, rng)[0]
    y = f + math.sqrt(model.noise.value) * rng.standard_normal(f.size)
    return (y, f) if return_latent else y


###############################################################################
# iterative solve
###############################################################################


def solve_cg(matrix, rhs, tol=1e-10, max_iter=None):
    """Conjugate-gradient solve of an SPD system.

    Returns ``(x, iterations)``.  Raises :class:`NoConvergence` when the
    relative residual is still above ``tol`` after ``max_iter`` iterations.
    """
    A = np.asarray(matrix, dtype=float)
    b = np.asarray(rhs, dtype=float)
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = b.size
    max_iter = 10 * n if max_iter is None else int(max_iter)
    x = np.zeros(n)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, 0
    r = b.copy()
    p = r.copy()
    rs = r @ r
    for it in range(1, max_iter + 1):
        Ap = A @ p
        step = rs / (p @ Ap)
        x += step * p
        r -= step * Ap
        rs_new = r @ r
        if math.sqrt(rs_new) <= tol * bnorm:
            return x, it
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise NoConvergence(f"CG did not reach tol={tol:g} in {max_iter} iterations")
