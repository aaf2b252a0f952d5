"""
Covariance kernels and their composition.

Base kernels (SE, Matérn 3/2, Matérn 5/2, Periodic) act on a named subset of
the input columns.  They combine into expression trees with ``+`` and ``*``:

>>> k = Mat32(["x", "y", "elev"], dims=[0, 1, 2]) + Mat32(["ocean_dist"], dims=[3])
>>> K = k(X, X)

All positive hyperparameters are stored as ``value = exp(u)``; the optimizer
and every gradient routine work with ``u``.  Parameters are enumerated
depth-first, left to right, and within a leaf as variance, lengthscale(s),
period.

A small textual DSL mirrors the tree structure::

    expr   := term ('+' term)*
    term   := factor ('*' factor)*
    factor := NAME '(' NAME (',' NAME)* ')' | '(' expr ')'

See :func:`parse_kernel_expr` and :func:`render`.
"""

from __future__ import annotations

import copy
import math
import re

import numpy as np
from scipy.spatial.distance import cdist

from .errors import (
    ArityError,
    DimensionMismatch,
    KernelSyntaxError,
    LengthMismatch,
    NonFiniteInput,
    UnknownFeature,
    UnknownKernel,
)

__all__ = [
    "HyperParam",
    "BaseKernel",
    "Sum",
    "Product",
    "SE",
    "Mat32",
    "Mat52",
    "Periodic",
    "KIND_NAMES",
    "parse_kernel_expr",
    "render",
    "eval_kernel",
    "kernel_gradients",
    "pack_params",
    "unpack_params",
    "log_prior",
    "leaves",
]

_LOG_2PI = math.log(2.0 * math.pi)
_SQRT3 = math.sqrt(3.0)
_SQRT5 = math.sqrt(5.0)

KIND_NAMES = {"se": "SE", "mat32": "Mat32", "mat52": "Mat52", "periodic": "Periodic"}


###############################################################################
# hyperparameters
###############################################################################


class HyperParam:
    """A non-negative hyperparameter with ``value = exp(unconstrained)``.

    ``prior`` is a ``(mean, std)`` pair describing a Gaussian over the
    unconstrained value.  ``bounds`` are in constrained space and are
    enforced by :meth:`project`.  A fixed parameter is never moved by the
    optimizer and may hold the value 0 (e.g. a noise-free likelihood).
    """

    def __init__(self, name, value, prior=None, bounds=None, fixed=False):
        self.name = name
        self.fixed = bool(fixed)
        if prior is not None:
            mu, sd = float(prior[0]), float(prior[1])
            if not sd > 0:
                raise ValueError(f"{name}: prior stddev must be positive")
            prior = (mu, sd)
        self.prior = prior
        if bounds is not None:
            lo, hi = float(bounds[0]), float(bounds[1])
            if not (lo > 0 and hi >= lo):
                raise ValueError(f"{name}: bounds must satisfy 0 < lo <= hi")
            bounds = (lo, hi)
        self.bounds = bounds
        self.value = value

    @property
    def value(self):
        return self._value

    @value.setter
    def value(self, v):
        v = float(v)
        if not (v >= 0 and math.isfinite(v)):
            raise ValueError(f"{self.name}: value must be finite and >= 0, got {v}")
        if v == 0 and not self.fixed:
            raise ValueError(f"{self.name}: only a fixed parameter may be 0")
        self._value = v

    @property
    def unconstrained(self):
        return math.log(self._value) if self._value > 0 else -math.inf

    @unconstrained.setter
    def unconstrained(self, u):
        self.value = math.exp(u)

    def project(self):
        if self.bounds is not None and not self.fixed:
            lo, hi = self.bounds
            self._value = min(max(self._value, lo), hi)

    def log_prior(self):
        if self.prior is None:
            return 0.0
        mu, sd = self.prior
        z = (self.unconstrained - mu) / sd
        return -0.5 * z * z - math.log(sd) - 0.5 * _LOG_2PI

    def log_prior_grad(self):
        if self.prior is None:
            return 0.0
        mu, sd = self.prior
        return -(self.unconstrained - mu) / (sd * sd)

    def to_dict(self):
        d = {"name": self.name, "value": self._value}
        if self.prior is not None:
            d["prior"] = list(self.prior)
        if self.bounds is not None:
            d["bounds"] = list(self.bounds)
        if self.fixed:
            d["fixed"] = True
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["value"], d.get("prior"), d.get("bounds"), d.get("fixed", False))

    def __repr__(self):
        return f"HyperParam({self.name!r}, {self._value!r})"


###############################################################################
# expression tree
###############################################################################


class KernelExpr:
    """Base class of the kernel expression tree."""

    def __add__(self, other):
        return Sum([self, other])

    def __mul__(self, other):
        return Product([self, other])

    def __call__(self, A, B=None):
        return eval_kernel(self, A, B)

    # subclasses implement: params, K, diag, grad_matrices, vjp, input_vjp,
    # diag_vjp, leaves


class BaseKernel(KernelExpr):
    """A leaf kernel over ``active_features`` (column indices ``dims``)."""

    def __init__(self, kind, active_features, dims=None, ard=False, variance=1.0,
                 lengthscale=1.0, period=1.0):
        key = str(kind).lower()
        if key not in KIND_NAMES:
            raise UnknownKernel(f"unknown kernel {kind!r}")
        self.kind = KIND_NAMES[key]
        feats = [str(f) for f in active_features]
        if not feats:
            raise ValueError("a kernel needs at least one active feature")
        if len(set(feats)) != len(feats):
            raise ValueError(f"duplicate features in {feats}")
        if self.kind == "Periodic" and len(feats) != 1:
            raise ArityError(f"Periodic takes exactly one feature, got {len(feats)}")
        self.active_features = tuple(feats)
        self.dims = tuple(int(d) for d in (dims if dims is not None else range(len(feats))))
        if len(self.dims) != len(feats):
            raise ValueError("dims and active_features differ in length")
        self.ard = bool(ard) and len(feats) > 1
        self.variance = HyperParam("variance", variance)
        n_ls = len(feats) if self.ard else 1
        ls = np.atleast_1d(np.asarray(lengthscale, dtype=float))
        if ls.size == 1:
            ls = np.repeat(ls, n_ls)
        if ls.size != n_ls:
            raise LengthMismatch(f"expected {n_ls} lengthscales, got {ls.size}")
        names = [f"lengthscale.{f}" for f in feats] if self.ard else ["lengthscale"]
        self.lengthscales = [HyperParam(nm, v) for nm, v in zip(names, ls)]
        self.period = HyperParam("period", period) if self.kind == "Periodic" else None

    # -- structure -----------------------------------------------------------

    def params(self):
        out = [self.variance, *self.lengthscales]
        if self.period is not None:
            out.append(self.period)
        return out

    def leaves(self):
        return [self]

    def _ls(self):
        return np.array([p.value for p in self.lengthscales])

    # -- evaluation ----------------------------------------------------------

    def _sqdist(self, A, B):
        ls = self._ls()
        return cdist(A[:, list(self.dims)] / ls, B[:, list(self.dims)] / ls, "sqeuclidean")

    def _per_dim_sq(self, A, B):
        """Yield (position in dims, scaled squared difference matrix)."""
        ls = self._ls()
        for j, d in enumerate(self.dims):
            l = ls[j] if self.ard else ls[0]
            yield j, cdist(A[:, [d]] / l, B[:, [d]] / l, "sqeuclidean")

    def _periodic_parts(self, A, B):
        d = self.dims[0]
        delta = A[:, [d]] - B[:, d][None, :]
        p = self.period.value
        return delta, np.sin(np.pi * delta / p)

    def K(self, A, B):
        s2 = self.variance.value
        if self.kind == "Periodic":
            _, s = self._periodic_parts(A, B)
            ell = self.lengthscales[0].value
            return s2 * np.exp(-2.0 * s * s / (ell * ell))
        r2 = self._sqdist(A, B)
        if self.kind == "SE":
            return s2 * np.exp(-0.5 * r2)
        r = np.sqrt(r2)
        if self.kind == "Mat32":
            return s2 * (1.0 + _SQRT3 * r) * np.exp(-_SQRT3 * r)
        return s2 * (1.0 + _SQRT5 * r + (5.0 / 3.0) * r2) * np.exp(-_SQRT5 * r)

    def diag(self, A):
        return np.full(A.shape[0], self.variance.value)

    def _radial_h(self, A, B):
        """Return (K, h) with dk/du_l = h * (scaled sq. distance along l)."""
        s2 = self.variance.value
        r2 = self._sqdist(A, B)
        if self.kind == "SE":
            k = s2 * np.exp(-0.5 * r2)
            return k, k
        r = np.sqrt(r2)
        if self.kind == "Mat32":
            e = np.exp(-_SQRT3 * r)
            return s2 * (1.0 + _SQRT3 * r) * e, 3.0 * s2 * e
        e = np.exp(-_SQRT5 * r)
        k = s2 * (1.0 + _SQRT5 * r + (5.0 / 3.0) * r2) * e
        return k, (5.0 / 3.0) * s2 * (1.0 + _SQRT5 * r) * e

    def grad_matrices(self, A, B):
        """Yield dK/du for each parameter, in pack order."""
        if self.kind == "Periodic":
            delta, s = self._periodic_parts(A, B)
            ell = self.lengthscales[0].value
            p = self.period.value
            k = self.variance.value * np.exp(-2.0 * s * s / (ell * ell))
            yield k
            yield k * (4.0 * s * s / (ell * ell))
            yield k * (2.0 * np.pi * delta * np.sin(2.0 * np.pi * delta / p) / (p * ell * ell))
            return
        k, h = self._radial_h(A, B)
        yield k
        if self.ard:
            for _, sq in self._per_dim_sq(A, B):
                yield h * sq
        else:
            yield h * self._sqdist(A, B)

    def vjp(self, A, B, G):
        return np.array([np.sum(G * dk) for dk in self.grad_matrices(A, B)])

    def diag_vjp(self, A, g):
        out = np.zeros(len(self.params()))
        out[0] = np.sum(g) * self.variance.value
        return out

    def input_vjp(self, A, B, G):
        """sum_j G[i, j] * d k(a_i, b_j) / d a_i, as an n x D array."""
        out = np.zeros_like(A, dtype=float)
        if self.kind == "Periodic":
            delta, s = self._periodic_parts(A, B)
            ell = self.lengthscales[0].value
            p = self.period.value
            k = self.variance.value * np.exp(-2.0 * s * s / (ell * ell))
            dk = -k * (2.0 * np.pi / (p * ell * ell)) * np.sin(2.0 * np.pi * delta / p)
            out[:, self.dims[0]] = np.sum(G * dk, axis=1)
            return out
        _, h = self._radial_h(A, B)
        W = G * h
        rs = W.sum(axis=1)
        ls = self._ls()
        for j, d in enumerate(self.dims):
            l = ls[j] if self.ard else ls[0]
            out[:, d] = -(rs * A[:, d] - W @ B[:, d]) / (l * l)
        return out

    def __repr__(self):
        return f"{self.kind}({', '.join(self.active_features)})"


class _Composite(KernelExpr):
    op = "?"

    def __init__(self, children):
        children = list(children)
        if len(children) < 2:
            raise ValueError(f"{type(self).__name__} needs at least two children")
        self.children = children

    def params(self):
        return [p for c in self.children for p in c.params()]

    def leaves(self):
        return [l for c in self.children for l in c.leaves()]

    def _split(self, v):
        out, i = [], 0
        for c in self.children:
            n = len(c.params())
            out.append(v[i:i + n])
            i += n
        return out

    def __repr__(self):
        return f"{type(self).__name__}({self.children!r})"


class Sum(_Composite):
    op = "+"

    def K(self, A, B):
        out = self.children[0].K(A, B)
        for c in self.children[1:]:
            out = out + c.K(A, B)
        return out

    def diag(self, A):
        return sum(c.diag(A) for c in self.children)

    def grad_matrices(self, A, B):
        for c in self.children:
            yield from c.grad_matrices(A, B)

    def vjp(self, A, B, G):
        return np.concatenate([c.vjp(A, B, G) for c in self.children])

    def diag_vjp(self, A, g):
        return np.concatenate([c.diag_vjp(A, g) for c in self.children])

    def input_vjp(self, A, B, G):
        return sum(c.input_vjp(A, B, G) for c in self.children)


class Product(_Composite):
    op = "*"

    def K(self, A, B):
        out = self.children[0].K(A, B)
        for c in self.children[1:]:
            out = out * c.K(A, B)
        return out

    def diag(self, A):
        out = self.children[0].diag(A)
        for c in self.children[1:]:
            out = out * c.diag(A)
        return out

    @staticmethod
    def _others(mats, i):
        out = None
        for j, m in enumerate(mats):
            if j != i:
                out = m if out is None else out * m
        return out

    def grad_matrices(self, A, B):
        mats = [c.K(A, B) for c in self.children]
        for i, c in enumerate(self.children):
            rest = self._others(mats, i)
            for dk in c.grad_matrices(A, B):
                yield dk * rest

    def vjp(self, A, B, G):
        mats = [c.K(A, B) for c in self.children]
        return np.concatenate([c.vjp(A, B, G * self._others(mats, i))
                               for i, c in enumerate(self.children)])

    def diag_vjp(self, A, g):
        diags = [c.diag(A) for c in self.children]
        return np.concatenate([c.diag_vjp(A, g * self._others(diags, i))
                               for i, c in enumerate(self.children)])

    def input_vjp(self, A, B, G):
        mats = [c.K(A, B) for c in self.children]
        return sum(c.input_vjp(A, B, G * self._others(mats, i))
                   for i, c in enumerate(self.children))


def SE(features, dims=None, **kw):
    return BaseKernel("SE", features, dims, **kw)


def Mat32(features, dims=None, **kw):
    return BaseKernel("Mat32", features, dims, **kw)


def Mat52(features, dims=None, **kw):
    return BaseKernel("Mat52", features, dims, **kw)


def Periodic(features, dims=None, **kw):
    return BaseKernel("Periodic", features, dims, **kw)


def leaves(expr):
    return expr.leaves()


###############################################################################
# evaluation
###############################################################################


def _check_inputs(expr, A, B):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    B = A if B is None else np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if A.ndim != 2 or B.ndim != 2:
        raise DimensionMismatch("inputs must be 2-D arrays")
    need = 1 + max(d for l in expr.leaves() for d in l.dims)
    if A.shape[1] < need or B.shape[1] < need:
        raise DimensionMismatch(
            f"kernel reads column {need - 1} but inputs have {A.shape[1]} and {B.shape[1]} columns")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NonFiniteInput("kernel inputs contain NaN or Inf")
    return A, B


def eval_kernel(expr, A, B=None):
    """Covariance matrix ``K[i, j] = k(A[i], B[j])`` (``B`` defaults to ``A``)."""
    A, B = _check_inputs(expr, A, B)
    return expr.K(A, B)


def kernel_gradients(expr, A, B=None):
    """List of dK/du matrices, one per hyperparameter in pack order."""
    A, B = _check_inputs(expr, A, B)
    return list(expr.grad_matrices(A, B))


def pack_params(expr):
    return np.array([p.unconstrained for p in expr.params()])


def unpack_params(expr, v):
    """Return a copy of ``expr`` with unconstrained parameters set from ``v``."""
    v = np.asarray(v, dtype=float)
    params = expr.params()
    if v.shape != (len(params),):
        raise LengthMismatch(f"expected {len(params)} parameters, got {v.shape}")
    out = copy.deepcopy(expr)
    for p, u in zip(out.params(), v):
        p.unconstrained = u
    return out


def log_prior(expr):
    return float(sum(p.log_prior() for p in expr.params()))


def param_names(expr):
    """Qualified names such as ``k0.variance`` or ``k1.lengthscale.x``."""
    names = []
    for i, leaf in enumerate(expr.leaves()):
        names.extend(f"k{i}.{p.name}" for p in leaf.params())
    return names


###############################################################################
# DSL
###############################################################################

_TOKEN_RE = re.compile(r"\s*(?:([A-Za-z_][A-Za-z0-9_]*)|(.))")


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:  # trailing whitespace only
            break
        if m.group(1) is not None:
            tokens.append(("NAME", m.group(1), m.start(1)))
        elif m.group(2) is not None:
            ch = m.group(2)
            if ch not in "()+*,":
                raise KernelSyntaxError(f"unexpected character {ch!r}", m.start(2), text)
            tokens.append((ch, ch, m.start(2)))
        pos = m.end()
    tokens.append(("EOF", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text, schema):
        self.text = text
        self.schema = list(schema)
        self.index = {n: i for i, n in enumerate(self.schema)}
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind):
        tok = self.tokens[self.i]
        if tok[0] != kind:
            want = "name" if kind == "NAME" else repr(kind)
            got = "end of input" if tok[0] == "EOF" else repr(tok[1])
            raise KernelSyntaxError(f"expected {want}, found {got}", tok[2], self.text)
        self.i += 1
        return tok

    def expr(self):
        terms = [self.term()]
        while self.peek()[0] == "+":
            self.i += 1
            terms.append(self.term())
        return terms[0] if len(terms) == 1 else Sum(terms)

    def term(self):
        factors = [self.factor()]
        while self.peek()[0] == "*":
            self.i += 1
            factors.append(self.factor())
        return factors[0] if len(factors) == 1 else Product(factors)

    def factor(self):
        tok = self.peek()
        if tok[0] == "(":
            self.i += 1
            e = self.expr()
            self.take(")")
            return e
        name = self.take("NAME")
        kind = name[1].lower()
        if kind not in KIND_NAMES:
            raise UnknownKernel(f"unknown kernel {name[1]!r} at position {name[2]}")
        self.take("(")
        feats = [self.take("NAME")]
        while self.peek()[0] == ",":
            self.i += 1
            feats.append(self.take("NAME"))
        self.take(")")
        names = [f[1] for f in feats]
        for f in feats:
            if f[1] not in self.index:
                raise UnknownFeature(f"unknown feature {f[1]!r} at position {f[2]}")
        if len(set(names)) != len(names):
            raise KernelSyntaxError("duplicate feature in kernel", feats[0][2], self.text)
        if KIND_NAMES[kind] == "Periodic" and len(names) != 1:
            raise ArityError(
                f"Periodic takes exactly one feature, got {len(names)} at position {name[2]}")
        return BaseKernel(kind, names, [self.index[n] for n in names])


def parse_kernel_expr(text, schema):
    """Parse a kernel DSL string against the list of feature names ``schema``.

    ``+`` binds looser than ``*``; kernel names are case-insensitive.  Leaves
    start with unit variance/lengthscale and no ARD; the pipeline configures
    them afterwards.

    Raises
    ------
    KernelSyntaxError, UnknownKernel, UnknownFeature, ArityError
    """
    if not text or not text.strip():
        raise KernelSyntaxError("empty kernel expression", 0, text)
    if len(set(schema)) != len(list(schema)):
        raise ValueError("schema contains duplicate feature names")
    p = _Parser(text, schema)
    e = p.expr()
    tok = p.peek()
    if tok[0] != "EOF":
        raise KernelSyntaxError(f"unexpected {tok[1]!r}", tok[2], text)
    return e


def render(expr):
    """Render an expression back to DSL text (parenthesized where needed)."""
    if isinstance(expr, BaseKernel):
        return f"{expr.kind}({','.join(expr.active_features)})"
    parts = []
    for c in expr.children:
        s = render(c)
        if isinstance(c, _Composite) and (type(c) is type(expr) or isinstance(expr, Product)):
            s = f"({s})"
        parts.append(s)
    return f" {expr.op} ".join(parts)


###############################################################################
# serialization
###############################################################################


def to_dict(expr):
    if isinstance(expr, BaseKernel):
        d = {
            "kind": expr.kind,
            "features": list(expr.active_features),
            "dims": list(expr.dims),
            "ard": expr.ard,
            "params": [p.to_dict() for p in expr.params()],
        }
        return d
    return {"op": type(expr).__name__, "children": [to_dict(c) for c in expr.children]}


def from_dict(d):
    if "op" in d:
        cls = {"Sum": Sum, "Product": Product}[d["op"]]
        return cls([from_dict(c) for c in d["children"]])
    leaf = BaseKernel(d["kind"], d["features"], d["dims"], ard=d["ard"])
    for p, pd in zip(leaf.params(), d["params"]):
        restored = HyperParam.from_dict(pd)
        p.__dict__.update(restored.__dict__)
    return leaf
