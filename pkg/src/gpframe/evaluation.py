"""Metrics, residual diagnostics and non-GP baselines."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import qr
from scipy.spatial import cKDTree

from .errors import KTooLarge, LengthMismatch, RankDeficient
from .transforms import Z95

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
TAIL_CONVENTION = "tails of the true target: RMSE 5 uses y < P5(y), RMSE 95 uses y > P95(y)"

# metric -> True when larger is better
METRICS = {
    "rmse": False,
    "rmse_p5": False,
    "rmse_p95": False,
    "r2": True,
    "mll": False,
    "mae": False,
    "bias": False,  # ranked by |bias|
    "bic": False,
}


@dataclass
class MetricsReport:
    rmse: float
    rmse_p5: float | None
    rmse_p95: float | None
    r2: float | None
    mll: float | None
    mae: float
    bias: float
    bic: float | None = None
    n_points: int = 0
    n_clamped: int = 0
    n_fallback: int = 0
    n_domain_errors: int = 0

    def to_dict(self):
        d = asdict(self)
        d["n"] = d.pop("n_points")
        return d


def _rmse(r):
    return float(np.sqrt(np.mean(r * r))) if r.size else None


def compute_metrics(y_true, mean, obs_var=None, lml=None, n_params=None, counters=None,
                    log_density=None):
    """Table-style metrics for point or Gaussian predictions.

    ``mll`` (mean negative log predictive density) needs ``obs_var``, or
    ``log_density`` giving per-point log predictive densities directly (used
    when the predictive is Gaussian only on a transformed scale; ``nan``
    entries are left out of the mean and ``mll`` is ``None`` if all are);
    ``bic`` needs the training ``lml`` and parameter count of an exact GP
    (``n`` in the BIC penalty is then the training size, passed as
    ``n_params=(k, n_train)``).
    """
    y = np.asarray(y_true, dtype=float).ravel()
    mu = np.asarray(mean, dtype=float).ravel()
    if y.size != mu.size:
        raise LengthMismatch(f"{y.size} targets but {mu.size} predictions")
    if y.size < 1:
        raise LengthMismatch("need at least one point")
    r = y - mu
    rmse = _rmse(r)
    lo, hi = np.percentile(y, [5, 95])
    tail_lo, tail_hi = y < lo, y > hi
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(r * r)) / ss_tot if ss_tot > 0 else None
    mll = None
    if obs_var is not None:
        v = np.asarray(obs_var, dtype=float).ravel()
        if v.size != y.size:
            raise LengthMismatch("obs_var length mismatch")
        mll = float(np.mean(0.5 * np.log(v) + _HALF_LOG_2PI + 0.5 * r * r / v))
    if log_density is not None:
        ld = np.asarray(log_density, dtype=float).ravel()
        if ld.size != y.size:
            raise LengthMismatch("log_density length mismatch")
        keep = ~np.isnan(ld)
        mll = float(-np.mean(ld[keep])) if keep.any() else None
    bic = None
    if lml is not None and n_params is not None:
        k, n_train = n_params
        bic = -2.0 * float(lml) + k * math.log(n_train)
    counters = counters or {}
    return MetricsReport(
        rmse=rmse,
        rmse_p5=_rmse(r[tail_lo]),
        rmse_p95=_rmse(r[tail_hi]),
        r2=r2,
        mll=mll,
        mae=float(np.mean(np.abs(r))),
        bias=float(np.mean(mu - y)),
        bic=bic,
        n_points=int(y.size),
        n_clamped=int(counters.get("n_clamped", 0)),
        n_fallback=int(counters.get("n_fallback", 0)),
        n_domain_errors=int(counters.get("n_domain_errors", 0)),
    )


@dataclass
class ResidualDiagnostics:
    standardized: np.ndarray
    coverage95: float
    feature_correlations: dict
    quantiles: dict
    residual_std: float

    def to_dict(self):
        return {
            "coverage95": self.coverage95,
            "standardized_residual_std": self.residual_std,
            "feature_correlations": self.feature_correlations,
            "quantiles": self.quantiles,
            "n": int(self.standardized.size),
        }


def residual_diagnostics(y_true, mean, obs_var, features=None, feature_names=None):
    y = np.asarray(y_true, dtype=float).ravel()
    mu = np.asarray(mean, dtype=float).ravel()
    sd = np.sqrt(np.asarray(obs_var, dtype=float).ravel())
    if not (y.size == mu.size == sd.size):
        raise LengthMismatch("y, mean and obs_var differ in length")
    r = y - mu
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, r / sd, np.where(r == 0, 0.0, np.sign(r) * np.inf))
    cover = float(np.mean(np.abs(z) <= Z95))
    corr = {}
    if features is not None:
        F = np.asarray(features, dtype=float)
        if F.ndim == 1:
            F = F[:, None]
        names = feature_names or [f"x{i}" for i in range(F.shape[1])]
        for j, name in enumerate(names):
            f = F[:, j]
            if np.std(f) > 0 and np.std(r) > 0:
                corr[name] = float(np.corrcoef(r, f)[0, 1])
            else:
                corr[name] = None
    qs = (0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99)
    finite = z[np.isfinite(z)]
    quant = {str(q): float(np.quantile(finite, q)) for q in qs} if finite.size else {}
    return ResidualDiagnostics(z, cover, corr, quant, float(np.std(finite)) if finite.size else 0.0)


###############################################################################
# baselines
###############################################################################


def knn_predict(X_train, y_train, Xstar, k=10):
    """Inverse-distance weighted k-nearest-neighbour regression.

    Queries that coincide with training points return the mean target of
    the coincident points.
    """
    X = np.asarray(X_train, dtype=float)
    y = np.asarray(y_train, dtype=float).ravel()
    Xs = np.asarray(Xstar, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Xs.ndim == 1:
        Xs = Xs[:, None]
    if k > X.shape[0] or k < 1:
        raise KTooLarge(f"k={k} invalid for {X.shape[0]} training points")
    dist, idx = cKDTree(X).query(Xs, k=k)
    dist = dist.reshape(Xs.shape[0], k)
    idx = idx.reshape(Xs.shape[0], k)
    zero = dist == 0
    out = np.empty(Xs.shape[0])
    has_zero = zero.any(axis=1)
    if has_zero.any():
        z = zero[has_zero]
        out[has_zero] = (y[idx[has_zero]] * z).sum(1) / z.sum(1)
    rest = ~has_zero
    w = 1.0 / dist[rest]
    out[rest] = (w * y[idx[rest]]).sum(1) / w.sum(1)
    return out


@dataclass
class LinearFit:
    coef: np.ndarray
    intercept: float

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return X @ self.coef + self.intercept


def linreg_fit(X_train, y_train, rtol=1e-10, names=None):
    """Least squares with intercept via column-pivoted QR.

    Raises :class:`RankDeficient` naming the dependent columns.
    """
    X = np.asarray(X_train, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y_train, dtype=float).ravel()
    n, d = X.shape
    if n <= d:
        raise RankDeficient(f"need more rows than features ({n} <= {d})", range(d))
    A = np.column_stack([X, np.ones(n)])
    Q, R, piv = qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rtol * diag[0]))
    if rank < d + 1:
        labels = list(names or [f"x{i}" for i in range(d)]) + ["intercept"]
        raise RankDeficient("design matrix is rank deficient", [labels[j] for j in piv[rank:]])
    beta = np.empty(d + 1)
    beta[piv] = np.linalg.solve(R, Q.T @ y)
    return LinearFit(beta[:-1], float(beta[-1]))


def linreg_predict(X_train, y_train, Xstar):
    return linreg_fit(X_train, y_train).predict(Xstar)


###############################################################################
# comparison
###############################################################################


@dataclass
class Comparison:
    reports: dict
    ranks: dict = field(default_factory=dict)

    def to_dict(self):
        return {name: {**rep.to_dict(), "ranks": self.ranks[name]} for name, rep in self.reports.items()}

    def table(self):
        return format_table(self.reports)


def _rank(values, larger_better):
    """Competition ranking (1, 2, 2, 4); ``None`` values are unranked."""
    present = [(v, i) for i, v in enumerate(values) if v is not None]
    out = [None] * len(values)
    for v, i in present:
        if larger_better:
            better = sum(1 for w, _ in present if w > v)
        else:
            better = sum(1 for w, _ in present if w < v)
        out[i] = better + 1
    return out


def compare_models(predictions, y_true):
    """Metrics and per-metric ranks for several named prediction sets.

    ``predictions`` maps a model name to either a point-prediction array or
    a dict with ``mean`` and optional ``obs_var``, ``lml``, ``n_params``.
    """
    if len(predictions) < 2:
        raise ValueError("compare_models needs at least two models")
    reports = {}
    for name, p in predictions.items():
        if isinstance(p, dict):
            reports[name] = compute_metrics(y_true, p["mean"], p.get("obs_var"), p.get("lml"),
                                            p.get("n_params"), p.get("counters"))
        else:
            reports[name] = compute_metrics(y_true, p)
    return Comparison(reports, rank_reports(reports))


def rank_reports(reports):
    """Per-metric competition ranks for a dict of :class:`MetricsReport`."""
    names = list(reports)
    ranks = {n: {} for n in names}
    for metric, larger in METRICS.items():
        vals = [getattr(reports[n], metric) for n in names]
        if metric == "bias":
            vals = [None if v is None else abs(v) for v in vals]
        for n, rk in zip(names, _rank(vals, larger)):
            ranks[n][metric] = rk
    return ranks


_ROWS = (("RMSE", "rmse"), ("RMSE 5", "rmse_p5"), ("RMSE 95", "rmse_p95"), ("R2", "r2"),
         ("MLL", "mll"), ("MAE", "mae"), ("Bias", "bias"), ("BIC", "bic"), ("n", "n_points"))


def format_table(reports):
    """Plain-text grid with one column per model; absent values print as N/A."""
    names = list(reports)
    width = max(10, *(len(n) + 2 for n in names))
    lines = [f"{'':<10}" + "".join(f"{n:>{width}}" for n in names)]
    for label, key in _ROWS:
        cells = []
        for n in names:
            v = getattr(reports[n], key)
            if v is None:
                cells.append(f"{'N/A':>{width}}")
            elif key == "n_points":
                cells.append(f"{v:>{width}d}")
            else:
                cells.append(f"{v:>{width}.4f}")
        lines.append(f"{label:<10}" + "".join(cells))
    return "\n".join(lines) + "\n"
