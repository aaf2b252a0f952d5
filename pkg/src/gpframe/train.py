"""Hyperparameter learning by full-batch Adam on the (penalized) marginal likelihood."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from . import gp as gpc
from .errors import DegenerateData, NonFiniteObjective, NotPositiveDefinite
from .kernels import BaseKernel, Product, Sum

log = logging.getLogger(__name__)

_INIT_SUBSAMPLE = 1000
_VARIANCE_FLOOR = 1e-6


@dataclass
class TrainConfig:
    """Adam settings; defaults follow the case-study setup (lr 0.01, 150 epochs)."""

    learning_rate: float = 0.01
    epochs: int = 150
    restarts: int = 3
    seed: int = 0
    grad_tol: float = 1e-6
    log_every: int = 0
    log_path: str | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class TrainTrace:
    objectives: list
    grad_norms: list
    theta: dict
    converged: bool
    best_restart: int
    restart_objectives: list = field(default_factory=list)
    failed_restarts: list = field(default_factory=list)

    @property
    def best_objective(self):
        return max(self.restart_objectives)

    def to_dict(self):
        return {
            "objectives": list(self.objectives),
            "grad_norms": list(self.grad_norms),
            "theta": dict(self.theta),
            "converged": self.converged,
            "best_restart": self.best_restart,
            "restart_objectives": list(self.restart_objectives),
            "failed_restarts": list(self.failed_restarts),
        }


###############################################################################
# generic Adam driver
###############################################################################


@dataclass
class _Run:
    u: np.ndarray
    objective: float
    objectives: list
    grad_norms: list
    converged: bool


def adam_maximize(fun, u0, free, lo, hi, cfg, sink=None, restart=0):
    """Maximize ``fun(u) -> (value, grad)`` over the free coordinates of ``u``.

    Parameters are projected onto ``[lo, hi]`` after each step.  The best
    iterate seen is returned, so the result never scores below ``u0``.  A
    numerical failure part-way through ends the run at the best iterate so
    far; a failure at ``u0`` propagates.
    """
    u = np.clip(np.array(u0, dtype=float), lo, hi)
    m = np.zeros_like(u)
    v = np.zeros_like(u)
    f, g = fun(u)
    if not math.isfinite(f) or not np.all(np.isfinite(g[free])):
        raise NonFiniteObjective(f"non-finite objective at the initial point (restart {restart})")
    best_u, best_f = u.copy(), f
    objs, gnorms = [f], [_gnorm(g, free)]
    converged = gnorms[-1] < cfg.grad_tol
    for t in range(1, cfg.epochs + 1):
        if converged:
            break
        g = np.where(free, g, 0.0)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** t)
        vhat = v / (1 - cfg.beta2 ** t)
        step = cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
        u = np.where(free, np.clip(u + step, lo, hi), u)
        try:
            f, g = fun(u)
        except NotPositiveDefinite:
            log.warning("restart %d: covariance lost definiteness at epoch %d", restart, t)
            break
        if not math.isfinite(f) or not np.all(np.isfinite(g[free])):
            log.warning("restart %d: non-finite objective at epoch %d", restart, t)
            break
        objs.append(f)
        gnorms.append(_gnorm(g, free))
        if f > best_f:
            best_u, best_f = u.copy(), f
        if sink is not None and cfg.log_every and t % cfg.log_every == 0:
            sink(restart, t, f, gnorms[-1])
        converged = gnorms[-1] < cfg.grad_tol
    return _Run(best_u, best_f, objs, gnorms, converged)


def _gnorm(g, free):
    return float(np.max(np.abs(g[free]))) if np.any(free) else 0.0


def _jitter_lengthscales(model, rng):
    out = copy.deepcopy(model)
    if out.kernel is not None:
        for leaf in out.kernel.leaves():
            for p in leaf.lengthscales:
                if not p.fixed:
                    p.value *= math.exp(rng.uniform(math.log(1 / 3), math.log(3)))
                    p.project()
    return out


def run_restarts(model, objective, cfg, jitter=_jitter_lengthscales):
    """Best-of-``cfg.restarts`` Adam runs of ``objective(model, u)``.

    Restart 0 starts from ``model`` as given; later restarts jitter the
    initial lengthscales log-uniformly in ``[1/3, 3]`` using seeds derived
    from ``cfg.seed``.  Ties go to the lowest restart index.  Returns the
    fitted model and a :class:`TrainTrace`.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
    lo, hi = model.bounds_u()
    free = model.free_mask()
    sink, fh = _make_sink(cfg)
    runs, failures, last_err = [], [], None
    try:
        for r in range(cfg.restarts):
            start = model if r == 0 else jitter(model, np.random.default_rng(seeds[r]))
            try:
                run = adam_maximize(lambda u, s=start: objective(s, u), start.get_params(),
                                    free, lo, hi, cfg, sink, r)
            except (NotPositiveDefinite, NonFiniteObjective) as err:
                log.warning("restart %d failed at its initial point: %s", r, err)
                failures.append(r)
                last_err = err
                runs.append(None)
                continue
            runs.append((start, run))
    finally:
        if fh is not None:
            fh.close()
    scored = [(i, rr) for i, rr in enumerate(runs) if rr is not None]
    if not scored:
        raise NonFiniteObjective(f"all {cfg.restarts} restarts failed: {last_err}")
    best_i, (start, best) = max(scored, key=lambda t: (t[1][1].objective, -t[0]))
    fitted = start.with_params(best.u)
    for p in fitted.hyperparams():
        p.project()
    theta = dict(zip(fitted.param_names(), _constrained(fitted)))
    trace = TrainTrace(
        objectives=best.objectives,
        grad_norms=best.grad_norms,
        theta=theta,
        converged=best.converged,
        best_restart=best_i,
        restart_objectives=[rr[1].objective if rr else -math.inf for rr in runs],
        failed_restarts=failures,
    )
    return fitted, trace


def _constrained(model):
    vals = [p.value for p in model.kernel_params()]
    return vals + list(model.mean.params) + [model.noise.value]


def _make_sink(cfg):
    if not cfg.log_path:
        return None, None
    fh = open(cfg.log_path, "w", encoding="utf-8")

    def sink(restart, epoch, objective, gnorm):
        fh.write(json.dumps({"restart": restart, "epoch": epoch, "objective": objective,
                             "grad_norm": gnorm}) + "\n")

    return sink, fh


###############################################################################
# exact-GP objective
###############################################################################


def map_objective(X, y):
    """Return ``objective(model, u)`` giving LML + log prior and its gradient."""

    def objective(model, u):
        m = model.with_params(u)
        lml, g, _ = gpc.lml_and_grad(m, X, y)
        return lml + m.log_prior(), g + m.log_prior_grad()

    return objective


def optimize(model, X, y, cfg=None):
    """Fit hyperparameters by maximizing LML(theta) + log prior(theta).

    Internally Adam ascends the objective directly (no sign flip).  Returns
    ``(fitted_model, TrainTrace)``.
    """
    cfg = cfg or TrainConfig()
    X = gpc._as_inputs(X)
    y = np.asarray(y, dtype=float).ravel()
    return run_restarts(model, map_objective(X, y), cfg)


###############################################################################
# initialization
###############################################################################


def _median_distance(Z):
    d = pdist(Z)
    return float(np.median(d)) if d.size else 0.0


def initialize_hyperparams(model, X, y, overrides=None, seed=0):
    """Data-driven starting values.

    Lengthscales: median pairwise distance within each leaf's active
    features (per feature for ARD leaves), from at most 1000 rows.
    Variances: ``var(y)`` shared equally between the terms of a top-level
    sum (non-leading factors of a product start at 1).  Noise: ``0.1 var(y)``.
    ``overrides`` maps qualified parameter names (see
    :meth:`GPModel.param_names`) to constrained values and always wins.
    """
    X = gpc._as_inputs(X)
    y = np.asarray(y, dtype=float).ravel()
    overrides = dict(overrides or {})
    out = copy.deepcopy(model)
    rng = np.random.default_rng(seed)
    Xs = X if X.shape[0] <= _INIT_SUBSAMPLE else X[rng.choice(X.shape[0], _INIT_SUBSAMPLE, replace=False)]
    vy = max(float(np.var(y)), _VARIANCE_FLOOR)

    if out.kernel is not None:
        terms = out.kernel.children if isinstance(out.kernel, Sum) else [out.kernel]
        for term in terms:
            _init_term(term, vy / len(terms), Xs)
    if not out.noise.fixed:
        out.noise.value = 0.1 * vy

    names = out.param_names()
    unknown = set(overrides) - set(names)
    if unknown:
        raise KeyError(f"unknown hyperparameters in overrides: {sorted(unknown)}")
    params = out.kernel_params()
    for i, name in enumerate(names):
        if name not in overrides:
            continue
        if i < len(params):
            params[i].value = overrides[name]
        elif name == "noise":
            out.noise.value = overrides[name]
        else:
            out.mean.params[i - len(params)] = overrides[name]
    for p in out.hyperparams():
        p.project()
    return out


def _init_term(node, variance, Xs):
    if isinstance(node, BaseKernel):
        _init_leaf(node, variance, Xs)
    elif isinstance(node, Product):
        _init_term(node.children[0], variance, Xs)
        for c in node.children[1:]:
            _init_term(c, 1.0, Xs)
    else:
        for c in node.children:
            _init_term(c, variance / len(node.children), Xs)


def _init_leaf(leaf, variance, Xs):
    if not leaf.variance.fixed:
        leaf.variance.value = variance
    cols = list(leaf.dims)
    if leaf.ard:
        dists = [_median_distance(Xs[:, [c]]) for c in cols]
    else:
        dists = [_median_distance(Xs[:, cols])]
    if min(dists) <= 0:
        raise DegenerateData(f"all inputs identical on features {leaf.active_features}")
    for p, d in zip(leaf.lengthscales, dists):
        if not p.fixed:
            p.value = d
    if leaf.period is not None and not leaf.period.fixed:
        leaf.period.value = dists[0]


###############################################################################
# gradient verification
###############################################################################


@dataclass
class GradientReport:
    names: list
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    threshold: float

    @property
    def flagged(self):
        return [n for n, e in zip(self.names, self.rel_error) if e > self.threshold]

    @property
    def ok(self):
        return not self.flagged

    @property
    def max_rel_error(self):
        return float(np.max(self.rel_error)) if self.rel_error.size else 0.0

    def to_dict(self):
        return {
            "parameters": {n: {"analytic": float(a), "numeric": float(b), "rel_error": float(e)}
                           for n, a, b, e in zip(self.names, self.analytic, self.numeric, self.rel_error)},
            "threshold": self.threshold,
            "flagged": self.flagged,
            "max_rel_error": self.max_rel_error,
        }


def relative_error(a, b, floor=1e-4):
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps near-zero entries meaningful."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(model, X, y, gradient=None, step=1e-6, threshold=1e-4):
    """Compare the analytic LML gradient with central differences in u-space.

    ``gradient(model, X, y)`` may be supplied to test an alternative
    implementation.  Parameters that are fixed at zero are skipped.
    """
    X = gpc._as_inputs(X)
    y = np.asarray(y, dtype=float).ravel()
    gradient = gradient or gpc.lml_gradient
    g = np.asarray(gradient(model, X, y), dtype=float)
    u = model.get_params()
    mask = np.isfinite(u)
    free_model = _unfix(model)

    def f(v):
        m = free_model.with_params(v)
        return gpc.log_marginal_likelihood(m, gpc.fit_cache(m, X, y))

    numeric = np.zeros_like(u)
    for i in np.flatnonzero(mask):
        up, um = u.copy(), u.copy()
        up[i] += step
        um[i] -= step
        numeric[i] = (f(up) - f(um)) / (2 * step)
    names = [n for n, k in zip(model.param_names(), mask) if k]
    return GradientReport(names, g[mask], numeric[mask], relative_error(g[mask], numeric[mask]),
                          threshold)


def _unfix(model):
    out = copy.deepcopy(model)
    for p in out.hyperparams():
        if p.value > 0:
            p.fixed = False
    out.mean.learnable = out.mean.kind != "zero"
    return out


###############################################################################
# synthetic-data self-check
###############################################################################


@dataclass
class SelfCheckReport:
    names: list
    true: list
    recovered: list
    rel_error: list
    tolerance: float
    trace: TrainTrace

    @property
    def passed(self):
        return all(e <= self.tolerance for e in self.rel_error)

    def to_dict(self):
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "parameters": {n: {"true": t, "recovered": r, "rel_error": e}
                           for n, t, r, e in zip(self.names, self.true, self.recovered, self.rel_error)},
            "final_objective": self.trace.best_objective,
        }


SELF_CHECK_CONFIG = TrainConfig(learning_rate=0.05, epochs=300, restarts=1, grad_tol=1e-4)


def self_check(model, X, seed=0, cfg=None, overrides=None, tolerance=0.3):
    """Refit ``model`` to data simulated from itself and compare hyperparameters.

    Targets are one draw of ``generate_synthetic(model, X)``.  The refit
    starts from :func:`initialize_hyperparams` on the simulated data (with
    ``overrides``), never from the true values.  Every free positive
    hyperparameter must come back within ``tolerance`` relative error.
    """
    cfg = cfg or SELF_CHECK_CONFIG
    X = gpc._as_inputs(X)
    y = gpc.generate_synthetic(model, X, seed)
    start = initialize_hyperparams(model, X, y, overrides, seed)
    fitted, trace = optimize(start, X, y, cfg)
    names, true, rec, err = [], [], [], []
    all_names = model.param_names()
    nk = len(model.kernel_params())
    idx = list(range(nk)) + [len(all_names) - 1]
    for i, p_true, p_fit in zip(idx, model.hyperparams(), fitted.hyperparams()):
        if p_true.fixed:
            continue
        names.append(all_names[i])
        true.append(p_true.value)
        rec.append(p_fit.value)
        err.append(abs(p_fit.value - p_true.value) / p_true.value)
    return SelfCheckReport(names, true, rec, err, tolerance, trace)
