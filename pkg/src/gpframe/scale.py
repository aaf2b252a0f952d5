"""
Scaling paths for datasets too large for one exact GP.

* Chunked experts combined with a (robust) Bayesian Committee Machine.
* Sparse variational GP with inducing inputs, trained on the collapsed
  (optimal q(u)) lower bound.
* Kronecker-structured exact solves on Cartesian grids.
"""

from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack, solve_triangular

from . import gp as gpc
from . import kernels as kern
from . import train as tr
from .data import kmeans
from .errors import (
    AllChunksFailed,
    ConfigError,
    DataError,
    EigenFailure,
    GPFrameError,
    NotPositiveDefinite,
)

log = logging.getLogger(__name__)
_LOG_2PI = math.log(2.0 * math.pi)
_VAR_FLOOR = 1e-300


###############################################################################
# experts + BCM
###############################################################################


@dataclass
class Expert:
    chunk_id: int
    model: gpc.GPModel
    cache: gpc.PosteriorCache
    trace: tr.TrainTrace | None = None


@dataclass
class ExpertEnsemble:
    experts: list
    sharing: str = "independent"
    aggregation: str = "rbcm"
    failed_chunks: list = field(default_factory=list)

    @property
    def M(self):
        return len(self.experts)


def _shared_objective(chunks):
    def objective(model, u):
        m = model.with_params(u)
        total, grad = 0.0, 0.0
        for X, y in chunks:
            l, g, _ = gpc.lml_and_grad(m, X, y)
            total += l
            grad = grad + g
        return total + m.log_prior(), grad + m.log_prior_grad()

    return objective


def fit_experts(X, y, assignment, model, cfg=None, sharing="independent", threads=1,
                aggregation="rbcm"):
    """Fit one exact GP per chunk.

    ``sharing="independent"`` optimizes every expert on its own chunk;
    ``"shared"`` finds one set of hyperparameters maximizing the sum of the
    chunk marginal likelihoods.  Chunks whose fit fails are dropped with a
    warning.  Results do not depend on ``threads``.
    """
    cfg = cfg or tr.TrainConfig()
    X = gpc._as_inputs(X)
    y = np.asarray(y, dtype=float).ravel()
    assignment = np.asarray(assignment)
    ids = np.unique(assignment)
    chunks = [(X[assignment == c], y[assignment == c]) for c in ids]
    for (Xc, _), c in zip(chunks, ids):
        if Xc.shape[0] > model.max_exact:
            raise ConfigError(f"chunk {c} has {Xc.shape[0]} rows, above the exact cap {model.max_exact}")
    if sharing not in ("independent", "shared"):
        raise ConfigError(f"unknown sharing mode {sharing!r}")

    if sharing == "shared":
        fitted, trace = tr.run_restarts(model, _shared_objective(chunks), cfg)
        models = [(fitted, trace)] * len(chunks)
    else:
        def fit_one(i):
            Xc, yc = chunks[i]
            c_cfg = copy.copy(cfg)
            c_cfg.seed = int(np.random.SeedSequence([cfg.seed, int(ids[i])]).generate_state(1)[0])
            c_cfg.log_path = None
            try:
                return tr.optimize(model, Xc, yc, c_cfg)
            except GPFrameError as err:
                log.warning("chunk %s failed: %s", ids[i], err)
                return err

        models = _map(fit_one, range(len(chunks)), threads)

    experts, failed = [], []
    for c, (Xc, yc), res in zip(ids, chunks, models):
        if isinstance(res, Exception):
            failed.append(int(c))
            continue
        m, trace = res
        try:
            experts.append(Expert(int(c), m, gpc.fit_cache(m, Xc, yc), trace))
        except NotPositiveDefinite as err:
            log.warning("chunk %s failed: %s", c, err)
            failed.append(int(c))
    if not experts:
        raise AllChunksFailed(f"all {len(chunks)} chunks failed")
    return ExpertEnsemble(experts, sharing, aggregation, failed)


def _map(fn, items, threads):
    items = list(items)
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class AggregateResult(gpc.PredictiveDistribution):
    n_fallback: int = 0


def bcm_combine(means, variances, prior_vars, prior_means=None, method="bcm", shared=False,
                noise=0.0):
    """Combine expert predictions at each test point.

    ``means``, ``variances`` and ``prior_vars`` are (M, m) arrays of latent
    expert means, latent variances and prior variances k(x*, x*).
    BCM precision is ``sum(1/s_k) + (1 - M)/p`` with a shared prior and
    ``sum(1/s_k - 1/p_k) + 1/pbar`` otherwise; robust BCM uses
    ``beta_k = max(0, (log p_k - log s_k)/2)`` and precision
    ``sum(beta_k/s_k) + (1 - sum beta_k)/pbar``.  Points with a
    non-positive precision fall back to the prior.  A single expert is
    returned unchanged.
    """
    mu = np.atleast_2d(np.asarray(means, float))
    s = np.maximum(np.atleast_2d(np.asarray(variances, float)), _VAR_FLOOR)
    p = np.atleast_2d(np.asarray(prior_vars, float))
    m0 = np.zeros_like(mu) if prior_means is None else np.atleast_2d(np.asarray(prior_means, float))
    M = mu.shape[0]
    if M == 1:
        var = np.atleast_2d(np.asarray(variances, float))[0].copy()
        return AggregateResult(mu[0].copy(), var, var + noise, 0, 0)
    pbar = p.mean(axis=0)
    mbar = m0.mean(axis=0)
    if method == "bcm":
        if shared:
            prec = (1.0 / s).sum(0) + (1 - M) / pbar
            num = (mu / s).sum(0) + (1 - M) * mbar / pbar
        else:
            prec = (1.0 / s - 1.0 / p).sum(0) + 1.0 / pbar
            num = (mu / s - m0 / p).sum(0) + mbar / pbar
    elif method == "rbcm":
        beta = np.maximum(0.0, 0.5 * (np.log(p) - np.log(s)))
        bsum = beta.sum(0)
        prec = (beta / s).sum(0) + (1 - bsum) / pbar
        num = (beta * mu / s).sum(0) + (1 - bsum) * mbar / pbar
    else:
        raise ConfigError(f"unknown aggregation {method!r}")
    bad = ~(prec > 0) | ~np.isfinite(prec)
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(bad, pbar, 1.0 / prec)
        mean = np.where(bad, mbar, var * num)
    return AggregateResult(mean, var, var + noise, 0, int(bad.sum()))


def robust_weights(variances, prior_vars):
    s = np.maximum(np.asarray(variances, float), _VAR_FLOOR)
    return np.maximum(0.0, 0.5 * (np.log(prior_vars) - np.log(s)))


def aggregate_predict(ens, Xstar, threads=1):
    """Predictive distribution of the ensemble at ``Xstar``.

    The observation variance adds the (mean) expert noise after aggregation.
    """
    Xs = gpc._as_inputs(Xstar)

    def one(e):
        pr = gpc.predict(e.model, e.cache, Xs)
        return pr.mean, pr.latent_variance, e.model.kdiag(Xs), e.model.mean(Xs), pr.n_clamped

    parts = _map(one, ens.experts, threads)
    means = np.array([q[0] for q in parts])
    vars_ = np.array([q[1] for q in parts])
    prior = np.array([q[2] for q in parts])
    pmeans = np.array([q[3] for q in parts])
    noise = float(np.mean([e.model.noise.value for e in ens.experts]))
    out = bcm_combine(means, vars_, prior, pmeans, ens.aggregation, ens.sharing == "shared", noise)
    out.n_clamped = int(sum(q[4] for q in parts))
    return out


###############################################################################
# sparse variational GP (collapsed bound)
###############################################################################


@dataclass
class SparseGP:
    kernel: kern.KernelExpr
    noise: kern.HyperParam
    Z: np.ndarray
    q_mean: np.ndarray | None = None     # posterior mean of u = f(Z)
    q_factor: np.ndarray | None = None   # S_u = q_factor @ q_factor.T
    jitter: float = 0.0
    jitter_ladder: tuple = gpc.DEFAULT_JITTER_LADDER

    @property
    def m(self):
        return self.Z.shape[0]

    def to_dict(self):
        return {
            "kernel": kern.to_dict(self.kernel),
            "noise": self.noise.to_dict(),
            "Z": self.Z.tolist(),
            "q_mean": None if self.q_mean is None else self.q_mean.tolist(),
            "q_factor": None if self.q_factor is None else self.q_factor.tolist(),
            "jitter": self.jitter,
            "jitter_ladder": list(self.jitter_ladder),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kernel=kern.from_dict(d["kernel"]),
            noise=kern.HyperParam.from_dict(d["noise"]),
            Z=np.array(d["Z"], dtype=float),
            q_mean=None if d["q_mean"] is None else np.array(d["q_mean"]),
            q_factor=None if d["q_factor"] is None else np.array(d["q_factor"]),
            jitter=d["jitter"],
            jitter_ladder=tuple(d["jitter_ladder"]),
        )


def _sym_inv_from_chol(L):
    inv = lapack.dpotri(L, lower=1)[0]
    return np.tril(inv) + np.tril(inv, -1).T


@dataclass
class _BoundParts:
    F: float
    L: np.ndarray
    LB: np.ndarray
    c: np.ndarray
    jitter: float
    grads: dict | None = None


def _collapsed_bound(kernel, noise, Z, X, y, ladder, with_grad=False):
    n = X.shape[0]
    s2 = noise
    sigma = math.sqrt(s2)
    Kmm = kernel.K(Z, Z)
    L, delta = gpc.jittered_cholesky(Kmm, ladder)
    Kmm_j = Kmm + delta * np.eye(Z.shape[0])
    Kmn = kernel.K(Z, X)
    knn = kernel.diag(X)
    A = solve_triangular(L, Kmn, lower=True, check_finite=False) / sigma
    AAT = A @ A.T
    B = AAT + np.eye(Z.shape[0])
    LB, info = lapack.dpotrf(B, lower=1, clean=1)
    if info != 0:
        raise NotPositiveDefinite("I + A A^T not positive definite")
    Ay = A @ y
    c = solve_triangular(LB, Ay, lower=True, check_finite=False) / sigma
    yy = float(y @ y)
    trK = float(knn.sum())
    trQ = float(np.trace(AAT)) * s2
    F = (-0.5 * n * _LOG_2PI - float(np.sum(np.log(np.diag(LB)))) - 0.5 * n * math.log(s2)
         - 0.5 * yy / s2 + 0.5 * float(c @ c) - 0.5 * (trK - trQ) / s2)
    parts = _BoundParts(F, L, LB, c, delta)
    if not with_grad:
        return parts

    # Gradients w.r.t. Kmm, Kmn, diag(Knn) and s2, with
    # P = Kmm + S/s2, S = Kmn Knm, b = Kmn y, v = P^-1 b.
    Kinv = _sym_inv_from_chol(L)
    # P = L B L^T
    LP = L @ LB
    Pinv = _sym_inv_from_chol(LP)
    S = Kmn @ Kmn.T
    b = Kmn @ y
    v = Pinv @ b
    vvT = np.outer(v, v)
    KiSKi = Kinv @ S @ Kinv
    G_mm = -0.5 * Pinv + 0.5 * Kinv - 0.5 * vvT / s2 ** 2 - 0.5 * KiSKi / s2
    G_S = -0.5 * Pinv / s2 - 0.5 * vvT / s2 ** 3 + 0.5 * Kinv / s2
    G_mn = 2.0 * G_S @ Kmn + np.outer(v, y) / s2 ** 2
    g_diag = np.full(n, -0.5 / s2)
    dt = (-0.5 * float(np.sum(Pinv * S)) - 0.5 * yy + float(b @ v) / s2
          - 0.5 * float(v @ S @ v) / s2 ** 2 - 0.5 * (trK - trQ))
    dF_ds2 = -0.5 * n / s2 - dt / s2 ** 2
    parts.grads = {"G_mm": G_mm, "G_mn": G_mn, "g_diag": g_diag, "dF_ds2": dF_ds2,
                   "Kmm": Kmm_j}
    return parts


def collapsed_bound(kernel, noise, Z, X, y, ladder=gpc.DEFAULT_JITTER_LADDER):
    """Titsias' collapsed lower bound on the log marginal likelihood.

    ``log N(y | 0, Qnn + noise I) - tr(Knn - Qnn) / (2 noise)`` with
    ``Qnn = Knm Kmm^-1 Kmn``, computed in O(n m^2) without forming Qnn.
    """
    X = gpc._as_inputs(X)
    Z = gpc._as_inputs(Z)
    y = np.asarray(y, dtype=float).ravel()
    noise = noise.value if isinstance(noise, kern.HyperParam) else float(noise)
    return _collapsed_bound(kernel, noise, Z, X, y, ladder).F


def collapsed_bound_and_grad(kernel, noise, Z, X, y, ladder=gpc.DEFAULT_JITTER_LADDER):
    """Bound and gradient w.r.t. (kernel params in u-space, log noise, Z)."""
    parts = _collapsed_bound(kernel, noise, Z, X, y, ladder, with_grad=True)
    g = parts.grads
    gk = (kernel.vjp(Z, Z, g["G_mm"]) + kernel.vjp(Z, X, g["G_mn"])
          + kernel.diag_vjp(X, g["g_diag"]))
    gn = g["dF_ds2"] * noise
    Gsym = g["G_mm"] + g["G_mm"].T
    gZ = kernel.input_vjp(Z, Z, Gsym) + kernel.input_vjp(Z, X, g["G_mn"])
    return parts.F, gk, gn, gZ


def init_inducing(X, m, seed=0, max_iter=25):
    """k-means centroids of the training inputs; random subset if that fails."""
    X = gpc._as_inputs(X)
    if m >= X.shape[0]:
        return X.copy()
    try:
        _, centers, _, _ = kmeans(X, m, max_iter=max_iter, seed=seed)
        if np.unique(centers, axis=0).shape[0] == m:
            return centers
    except (AssertionError, GPFrameError) as err:
        log.warning("k-means inducing initialization failed (%s); using a random subset", err)
    rng = np.random.default_rng(seed)
    return X[np.sort(rng.choice(X.shape[0], m, replace=False))].copy()


class _SparseAsModel:
    """Adapter exposing a SparseGP's parameters through the GPModel protocol
    expected by :func:`train.run_restarts`."""

    def __init__(self, sgp, X, y, optimize_Z=True):
        self.sgp = sgp
        self.X, self.y = X, y
        self.optimize_Z = optimize_Z
        self.kernel = sgp.kernel
        self.noise = sgp.noise

    def kernel_params(self):
        return self.sgp.kernel.params()

    def hyperparams(self):
        return self.kernel_params() + [self.sgp.noise]

    def get_params(self):
        ku = [p.unconstrained for p in self.kernel_params()]
        return np.concatenate([ku, [self.sgp.noise.unconstrained], self.sgp.Z.ravel()])

    def free_mask(self):
        fk = [not p.fixed for p in self.kernel_params()]
        return np.array(fk + [not self.sgp.noise.fixed] + [self.optimize_Z] * self.sgp.Z.size)

    def bounds_u(self):
        lo, hi = [], []
        for p in self.hyperparams():
            a, b = (math.log(p.bounds[0]), math.log(p.bounds[1])) if p.bounds else (-math.inf, math.inf)
            lo.append(a)
            hi.append(b)
        z = self.sgp.Z.size
        return np.array(lo + [-math.inf] * z), np.array(hi + [math.inf] * z)

    def with_params(self, v):
        out = copy.copy(self)
        sgp = copy.deepcopy(self.sgp)
        nk = len(sgp.kernel.params())
        for p, u in zip(sgp.kernel.params(), v[:nk]):
            if not p.fixed:
                p.unconstrained = u
        if not sgp.noise.fixed:
            sgp.noise.unconstrained = v[nk]
        sgp.Z = np.asarray(v[nk + 1:], float).reshape(sgp.Z.shape)
        out.sgp = sgp
        out.kernel, out.noise = sgp.kernel, sgp.noise
        return out

    def param_names(self):
        return kern.param_names(self.sgp.kernel) + ["noise"] + [
            f"Z[{i},{j}]" for i in range(self.sgp.Z.shape[0]) for j in range(self.sgp.Z.shape[1])]

    def log_prior(self):
        return sum(p.log_prior() for p in self.hyperparams())

    def log_prior_grad(self):
        g = [p.log_prior_grad() for p in self.hyperparams()]
        return np.concatenate([g, np.zeros(self.sgp.Z.size)])

    mean = gpc.MeanSpec()


def _svgp_objective(X, y, ladder):
    def objective(adapter, u):
        a = adapter.with_params(u)
        sgp = a.sgp
        F, gk, gn, gZ = collapsed_bound_and_grad(sgp.kernel, sgp.noise.value, sgp.Z, X, y, ladder)
        g = np.concatenate([gk, [gn], gZ.ravel()])
        return F + a.log_prior(), g + a.log_prior_grad()

    return objective


def svgp_fit(X, y, kernel, noise, Z, cfg=None, optimize_Z=True, ladder=gpc.DEFAULT_JITTER_LADDER):
    """Fit kernel hyperparameters, noise and inducing inputs by Adam on the
    collapsed bound; returns a :class:`SparseGP` with its q(u) summary."""
    cfg = cfg or tr.TrainConfig()
    X = gpc._as_inputs(X)
    y = np.asarray(y, dtype=float).ravel()
    Z = gpc._as_inputs(Z)
    if Z.shape[0] > X.shape[0]:
        raise ConfigError(f"{Z.shape[0]} inducing points exceed n={X.shape[0]}")
    if not isinstance(noise, kern.HyperParam):
        noise = kern.HyperParam("noise", float(noise))
    sgp = SparseGP(copy.deepcopy(kernel), copy.deepcopy(noise), Z.copy(), jitter_ladder=ladder)
    adapter = _SparseAsModel(sgp, X, y, optimize_Z)
    fitted, trace = tr.run_restarts(adapter, _svgp_objective(X, y, ladder), cfg,
                                    jitter=_jitter_sparse)
    out = fitted.sgp
    for p in out.kernel.params() + [out.noise]:
        p.project()
    _set_posterior(out, X, y)
    return out, trace


def _jitter_sparse(adapter, rng):
    out = copy.copy(adapter)
    out.sgp = copy.deepcopy(adapter.sgp)
    for leaf in out.sgp.kernel.leaves():
        for p in leaf.lengthscales:
            if not p.fixed:
                p.value *= math.exp(rng.uniform(math.log(1 / 3), math.log(3)))
    out.kernel, out.noise = out.sgp.kernel, out.sgp.noise
    return out


def _set_posterior(sgp, X, y):
    parts = _collapsed_bound(sgp.kernel, sgp.noise.value, sgp.Z, X, y, sgp.jitter_ladder)
    # q(u) = N(L LB^-T c, L B^-1 L^T)
    R = solve_triangular(parts.LB, parts.L.T, lower=True, check_finite=False).T
    sgp.q_factor = R
    sgp.q_mean = R @ parts.c
    sgp.jitter = parts.jitter
    return sgp


def svgp_posterior(kernel, noise, Z, X, y, ladder=gpc.DEFAULT_JITTER_LADDER):
    """SparseGP with the optimal q(u) for fixed hyperparameters and Z."""
    if not isinstance(noise, kern.HyperParam):
        noise = kern.HyperParam("noise", float(noise))
    sgp = SparseGP(kernel, noise, gpc._as_inputs(Z), jitter_ladder=ladder)
    return _set_posterior(sgp, gpc._as_inputs(X), np.asarray(y, float).ravel())


def svgp_predict(sgp, Xstar):
    Xs = gpc._as_inputs(Xstar)
    if Xs.shape[1] != sgp.Z.shape[1]:
        raise gpc.DimensionMismatch("test inputs and inducing inputs differ in width")
    Kmm = sgp.kernel.K(sgp.Z, sgp.Z) + sgp.jitter * np.eye(sgp.m)
    L, info = lapack.dpotrf(Kmm, lower=1, clean=1)
    if info != 0:
        raise NotPositiveDefinite("Kmm not positive definite at the stored jitter")
    Kinv_m = lapack.dpotrs(L, sgp.q_mean, lower=1)[0]
    mean = np.empty(Xs.shape[0])
    var = np.empty(Xs.shape[0])
    for s in range(0, Xs.shape[0], gpc._PREDICT_BLOCK):
        blk = Xs[s:s + gpc._PREDICT_BLOCK]
        Kms = sgp.kernel.K(sgp.Z, blk)
        W = solve_triangular(L, Kms, lower=True, check_finite=False)
        V = sgp.q_factor.T @ lapack.dpotrs(L, Kms, lower=1)[0]
        mean[s:s + len(blk)] = Kms.T @ Kinv_m
        var[s:s + len(blk)] = (sgp.kernel.diag(blk) - np.einsum("ij,ij->j", W, W)
                               + np.einsum("ij,ij->j", V, V))
    neg = var < 0
    var[neg] = 0.0
    return gpc.PredictiveDistribution(mean, var, var + sgp.noise.value, int(neg.sum()))


###############################################################################
# Kronecker structure
###############################################################################


def kron_mvm(factors, x):
    """``(F_1 kron F_2 kron ... ) @ x`` without forming the product."""
    shape = [f.shape[1] for f in factors]
    t = np.asarray(x, dtype=float).reshape(shape)
    for axis, f in enumerate(factors):
        t = np.moveaxis(np.tensordot(f, t, axes=([1], [axis])), 0, axis)
    return t.reshape(-1)


@dataclass
class KroneckerSystem:
    """``(K_1 kron ... kron K_d + noise I)`` for per-axis covariance factors."""

    factors: list
    noise: float
    grids: list | None = None

    def __post_init__(self):
        self.factors = [np.asarray(f, dtype=float) for f in self.factors]
        for f in self.factors:
            if f.ndim != 2 or f.shape[0] != f.shape[1]:
                raise ConfigError("Kronecker factors must be square matrices")

    @classmethod
    def from_grids(cls, grids, kernels, noise):
        grids = [gpc._as_inputs(g) for g in grids]
        if len(grids) != len(kernels):
            raise ConfigError("need one kernel per grid axis")
        return cls([k.K(g, g) for g, k in zip(grids, kernels)], noise, grids)

    @property
    def shape(self):
        return tuple(f.shape[0] for f in self.factors)

    @property
    def n(self):
        return int(np.prod(self.shape))

    def dense(self):
        out = self.factors[0]
        for f in self.factors[1:]:
            out = np.kron(out, f)
        return out + self.noise * np.eye(out.shape[0])

    def eig(self):
        vals, vecs = [], []
        for f in self.factors:
            try:
                w, Q = np.linalg.eigh(f)
            except np.linalg.LinAlgError as err:
                raise EigenFailure(str(err)) from err
            vals.append(np.maximum(w, 0.0))
            vecs.append(Q)
        lam = vals[0]
        for w in vals[1:]:
            lam = np.multiply.outer(lam, w)
        return vals, vecs, np.asarray(lam).reshape(-1)


def kronecker_solve(sys, rhs):
    """Solve ``(K_1 kron ... kron K_d + noise I) x = rhs`` by per-axis eigendecomposition."""
    if not sys.noise > 0:
        raise ConfigError("Kronecker solve needs a positive noise variance")
    rhs = np.asarray(rhs, dtype=float).ravel()
    if rhs.size != sys.n:
        raise DataError(f"rhs has {rhs.size} entries, grid has {sys.n}")
    _, vecs, lam = sys.eig()
    t = kron_mvm([Q.T for Q in vecs], rhs)
    t /= lam + sys.noise
    return kron_mvm(vecs, t)


@dataclass
class KroneckerGP:
    """Exact GP on a Cartesian grid with a product kernel (one leaf per axis)."""

    kernel: kern.KernelExpr
    noise: kern.HyperParam
    grids: list
    axis_dims: list
    y_grid: np.ndarray | None = None

    def axis_kernels(self):
        return list(self.kernel.children) if isinstance(self.kernel, kern.Product) else [self.kernel]

    def system(self):
        return KroneckerSystem.from_grids(self.grids, self.axis_kernels(), self.noise.value)

    def to_dict(self):
        return {"kernel": kern.to_dict(self.kernel), "noise": self.noise.to_dict(),
                "grids": [g.tolist() for g in self.grids], "axis_dims": [list(d) for d in self.axis_dims],
                "y_grid": None if self.y_grid is None else self.y_grid.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(kern.from_dict(d["kernel"]), kern.HyperParam.from_dict(d["noise"]),
                   [np.array(g, dtype=float) for g in d["grids"]], [tuple(a) for a in d["axis_dims"]],
                   None if d["y_grid"] is None else np.array(d["y_grid"]))


def grid_structure(X, kernel):
    """Map rows of ``X`` onto a Cartesian grid whose axes are the kernel's factors.

    Returns ``(grids, axis_dims, order)`` where ``order[j]`` is the row of X
    at grid position ``j`` (row-major).  Each leaf of a product kernel is an
    axis; its grid holds the distinct values of the leaf's features (full
    width rows, other columns zero).
    """
    X = gpc._as_inputs(X)
    leaves = list(kernel.children) if isinstance(kernel, kern.Product) else [kernel]
    if not all(isinstance(l, kern.BaseKernel) for l in leaves):
        raise ConfigError("kronecker mode needs a product of base kernels")
    dims = [l.dims for l in leaves]
    flat = [d for ds in dims for d in ds]
    if len(set(flat)) != len(flat):
        raise ConfigError("kronecker axes must use disjoint features")
    grids, idx = [], []
    for ds in dims:
        vals, inv = np.unique(X[:, list(ds)], axis=0, return_inverse=True)
        g = np.zeros((vals.shape[0], X.shape[1]))
        g[:, list(ds)] = vals
        grids.append(g)
        idx.append(inv.ravel())
    shape = tuple(g.shape[0] for g in grids)
    if int(np.prod(shape)) != X.shape[0]:
        raise DataError(f"inputs do not form a full grid: axes {shape} vs {X.shape[0]} rows")
    lin = np.ravel_multi_index(tuple(idx), shape)
    order = np.empty(X.shape[0], dtype=np.int64)
    order[lin] = np.arange(X.shape[0])
    if np.unique(lin).size != X.shape[0]:
        raise DataError("grid has repeated cells")
    return grids, [tuple(d) for d in dims], order


def kronecker_lml_and_grad(kernel, noise, grids, y_grid):
    """Exact LML on the grid and its gradient w.r.t. (kernel params, log noise)."""
    axes = list(kernel.children) if isinstance(kernel, kern.Product) else [kernel]
    sys_ = KroneckerSystem.from_grids(grids, axes, noise)
    vals, vecs, lam = sys_.eig()
    d = lam + noise
    alpha = kron_mvm(vecs, kron_mvm([Q.T for Q in vecs], y_grid) / d)
    n = y_grid.size
    lml = -0.5 * float(y_grid @ alpha) - 0.5 * float(np.sum(np.log(d))) - 0.5 * n * _LOG_2PI
    shape = tuple(w.size for w in vals)
    inv_d = (1.0 / d).reshape(shape)
    grads = []
    for a, (leaf, g) in enumerate(zip(axes, grids)):
        for dK in leaf.grad_matrices(g, g):
            facs = [dK if b == a else sys_.factors[b] for b in range(len(axes))]
            quad = float(alpha @ kron_mvm(facs, alpha))
            # trace of Kn^-1 (K_1 .. dK_a .. K_d) in the joint eigenbasis
            diag_a = np.einsum("ij,ik,kj->j", vecs[a], dK, vecs[a])
            t = inv_d
            for b in range(len(axes)):
                w = diag_a if b == a else vals[b]
                shp = [1] * len(axes)
                shp[b] = -1
                t = t * w.reshape(shp)
            grads.append(0.5 * quad - 0.5 * float(t.sum()))
    gn = (0.5 * float(alpha @ alpha) - 0.5 * float(np.sum(1.0 / d))) * noise
    return lml, np.array(grads), gn


def kronecker_fit(X, y, kernel, noise, cfg=None):
    """Adam on the grid LML; returns a :class:`KroneckerGP`."""
    cfg = cfg or tr.TrainConfig()
    X = gpc._as_inputs(X)
    y = np.asarray(y, dtype=float).ravel()
    grids, axis_dims, order = grid_structure(X, kernel)
    y_grid = y[order]
    model = gpc.GPModel(copy.deepcopy(kernel), copy.deepcopy(noise))

    def objective(m, u):
        mm = m.with_params(u)
        lml, gk, gn = kronecker_lml_and_grad(mm.kernel, mm.noise.value, grids, y_grid)
        g = np.concatenate([gk, np.zeros(len(mm.mean)), [gn]])
        return lml + mm.log_prior(), g + mm.log_prior_grad()

    fitted, trace = tr.run_restarts(model, objective, cfg)
    return KroneckerGP(fitted.kernel, fitted.noise, grids, axis_dims, y_grid), trace


def kronecker_predict(kgp, Xstar):
    Xs = gpc._as_inputs(Xstar)
    axes = kgp.axis_kernels()
    sys_ = kgp.system()
    vals, vecs, lam = sys_.eig()
    d = lam + kgp.noise.value
    alpha_t = kron_mvm([Q.T for Q in vecs], kgp.y_grid) / d  # alpha in the eigenbasis
    shape = tuple(w.size for w in vals)
    mean = np.empty(Xs.shape[0])
    var = np.empty(Xs.shape[0])
    inv_d = (1.0 / d).reshape(shape)
    at = alpha_t.reshape(shape)
    for s in range(0, Xs.shape[0], 256):
        blk = Xs[s:s + 256]
        proj = [Q.T @ k.K(g, blk) for k, g, Q in zip(axes, kgp.grids, vecs)]  # (n_a, b)
        # mean = sum over grid of (kron_a proj_a[:, i]) * alpha_t
        letters = "abcdefgh"[: len(axes)]
        spec_m = ",".join(f"{l}z" for l in letters) + f",{letters}->z"
        mean[s:s + len(blk)] = np.einsum(spec_m, *proj, at)
        sq = [p * p for p in proj]
        var[s:s + len(blk)] = kgp.kernel.diag(blk) - np.einsum(spec_m, *sq, inv_d)
    neg = var < 0
    var[neg] = 0.0
    return gpc.PredictiveDistribution(mean, var, var + kgp.noise.value, int(neg.sum()))
