"""Invertible per-column transforms: z-score, log and Box-Cox.

Every spec records a fingerprint of the data it was fitted on.  Passing
``fit_fingerprint`` to :func:`apply` asserts that the spec belongs to the
training set currently being fitted, which stops validation or test
statistics from leaking into training.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateColumn, DomainError, LeakageError, NonPositiveAfterShift

KINDS = ("identity", "zscore", "log", "boxcox")
Z95 = 1.959963984540054
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def fingerprint(values):
    """``"<rows>:<sha256 prefix>"`` of the float64 bytes of ``values``."""
    a = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    n = a.shape[0] if a.ndim else 1
    return f"{n}:{hashlib.sha256(a.tobytes()).hexdigest()[:16]}"


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    mean: float = 0.0
    std: float = 1.0
    shift: float = 0.0
    lam: float = 1.0
    fitted_on: str = ""

    def to_dict(self):
        return {"kind": self.kind, "mean": self.mean, "std": self.std, "shift": self.shift,
                "lambda": self.lam, "fitted_on": self.fitted_on}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d["mean"], d["std"], d["shift"], d["lambda"], d["fitted_on"])


def _shift_for(y):
    lo, hi = float(np.min(y)), float(np.max(y))
    eps = 1e-6 * (hi - lo) if hi > lo else 1e-6
    return max(0.0, eps - lo)


def boxcox(y, lam):
    if lam == 0.0:
        return np.log(y)
    return np.expm1(lam * np.log(y)) / lam


def boxcox_profile_loglik(y, lam):
    """Gaussian profile log-likelihood of Box-Cox transformed ``y`` (incl. Jacobian)."""
    z = boxcox(y, lam)
    n = y.size
    return -0.5 * n * math.log(np.var(z)) + (lam - 1.0) * float(np.sum(np.log(y)))


def golden_section_max(f, lo, hi, tol=1e-4):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def fit_transform(values, kind="zscore", fitted_on=None, lam_range=(-2.0, 2.0)):
    """Fit a :class:`TransformSpec` of ``kind`` on training values."""
    y = np.asarray(values, dtype=float).ravel()
    kind = kind.lower()
    if kind not in KINDS:
        raise ValueError(f"unknown transform {kind!r}; expected one of {KINDS}")
    if y.size == 0 or not np.all(np.isfinite(y)):
        raise ValueError("transform needs a nonempty finite column")
    fp = fitted_on if fitted_on is not None else fingerprint(y)
    if kind == "identity":
        return TransformSpec("identity", fitted_on=fp)
    if kind == "zscore":
        sd = float(np.std(y, ddof=1)) if y.size > 1 else 0.0
        if sd < 1e-12:
            raise DegenerateColumn("column has (near-)zero standard deviation")
        return TransformSpec("zscore", mean=float(np.mean(y)), std=sd, fitted_on=fp)
    shift = _shift_for(y)
    ys = y + shift
    if np.min(ys) <= 0:
        raise NonPositiveAfterShift("values not positive after shift")
    if kind == "log":
        return TransformSpec("log", shift=shift, fitted_on=fp)
    if np.ptp(ys) < 1e-12 * max(1.0, abs(float(ys[0]))):
        raise DegenerateColumn("column is constant")
    lam = golden_section_max(lambda l: boxcox_profile_loglik(ys, l), *lam_range)
    return TransformSpec("boxcox", shift=shift, lam=float(lam), fitted_on=fp)


def apply(spec, values, fit_fingerprint=None):
    """Forward transform.

    When ``fit_fingerprint`` is given the call is part of a training-stage
    fit and the spec must have been fitted on that same training data.
    """
    if fit_fingerprint is not None and fit_fingerprint != spec.fitted_on:
        raise LeakageError(
            f"transform fitted on {spec.fitted_on} reused while fitting on {fit_fingerprint}")
    y = np.asarray(values, dtype=float)
    if spec.kind == "identity":
        return y.copy()
    if spec.kind == "zscore":
        return (y - spec.mean) / spec.std
    ys = y + spec.shift
    if np.any(ys <= 0):
        raise DomainError(f"{spec.kind} transform needs values > {-spec.shift}")
    if spec.kind == "log":
        return np.log(ys)
    return boxcox(ys, spec.lam)


def _inverse_boxcox(spec, z):
    lam = spec.lam
    if lam == 0.0:
        return np.exp(z) - spec.shift, np.zeros(z.shape, bool)
    base = 1.0 + lam * z
    bad = base <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.exp(np.log1p(lam * z) / lam) - spec.shift
    # outside the image: the nearest point of the support (-shift or +inf)
    out = np.where(bad, -spec.shift if lam > 0 else np.inf, out)
    return out, bad


def inverse(spec, values, return_mask=False):
    """Inverse transform; out-of-range values map to the support boundary.

    With ``return_mask`` a boolean array marking those points is returned too.
    """
    z = np.asarray(values, dtype=float)
    bad = np.zeros(z.shape, bool)
    if spec.kind == "identity":
        out = z.copy()
    elif spec.kind == "zscore":
        out = z * spec.std + spec.mean
    elif spec.kind == "log":
        out = np.exp(z) - spec.shift
    else:
        out, bad = _inverse_boxcox(spec, z)
    return (out, bad) if return_mask else out


def log_jacobian(spec, values):
    """``log |d apply(spec, y) / dy|`` at original-scale ``values``."""
    y = np.asarray(values, dtype=float)
    if spec.kind == "identity":
        return np.zeros(y.shape)
    if spec.kind == "zscore":
        return np.full(y.shape, -math.log(spec.std))
    ys = y + spec.shift
    if np.any(ys <= 0):
        raise DomainError(f"{spec.kind} transform needs values > {-spec.shift}")
    if spec.kind == "log":
        return -np.log(ys)
    return (spec.lam - 1.0) * np.log(ys)


def inverse_derivative(spec, values):
    """``d inverse(spec, z) / dz`` at model-scale ``values`` (0 outside the image)."""
    z = np.asarray(values, dtype=float)
    if spec.kind == "identity":
        return np.ones(z.shape)
    if spec.kind == "zscore":
        return np.full(z.shape, spec.std)
    if spec.kind == "log" or spec.lam == 0.0:
        return np.exp(z)
    base = 1.0 + spec.lam * z
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.exp((1.0 / spec.lam - 1.0) * np.log(base))
    return np.where(base > 0, d, 0.0)


def is_affine(spec):
    return spec.kind in ("identity", "zscore")


def scale_variance(spec, variance):
    """Map a variance to original units (exact only for affine specs)."""
    if spec.kind == "zscore":
        return np.asarray(variance) * spec.std ** 2
    return np.asarray(variance)


@dataclass
class QuantileBand:
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    domain_errors: np.ndarray

    @property
    def n_domain_errors(self):
        return int(self.domain_errors.sum())


def inverse_predictive(spec, predictive, z=Z95):
    """Back-transform a Gaussian predictive to (median, lower95, upper95).

    Monotone transforms map quantiles to quantiles, so the median is the
    inverse of the mean and the 95% bounds the inverse of mean +/- 1.96 sd
    (observation sd).
    """
    mean = np.asarray(predictive.mean, dtype=float)
    sd = np.sqrt(np.asarray(predictive.observation_variance, dtype=float))
    med, b1 = inverse(spec, mean, return_mask=True)
    lo, b2 = inverse(spec, mean - z * sd, return_mask=True)
    hi, b3 = inverse(spec, mean + z * sd, return_mask=True)
    return QuantileBand(med, lo, hi, b1 | b2 | b3)
