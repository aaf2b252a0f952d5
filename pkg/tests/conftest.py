import math

import numpy as np
import pytest
from hypothesis import settings

from gpframe import kernels as kern

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

KINDS = ("SE", "Mat32", "Mat52", "Periodic")


def random_leaf(rng, kind, n_features=3, ard=None):
    """Leaf of ``kind`` over a random non-empty subset of ``n_features`` columns."""
    if kind == "Periodic":
        dims = [int(rng.integers(n_features))]
    else:
        size = int(rng.integers(1, n_features + 1))
        dims = sorted(rng.choice(n_features, size, replace=False).tolist())
    ard = bool(rng.integers(2)) if ard is None else ard
    leaf = kern.BaseKernel(kind, [f"x{d}" for d in dims], dims, ard=ard and kind != "Periodic",
                           variance=math.exp(rng.uniform(-1, 1)),
                           lengthscale=np.exp(rng.uniform(-0.5, 0.7, len(dims))) if ard and kind != "Periodic"
                           else math.exp(rng.uniform(-0.5, 0.7)),
                           period=math.exp(rng.uniform(0, 1)))
    return leaf


def random_tree(rng, depth=2, n_features=3):
    if depth == 0 or rng.uniform() < 0.35:
        return random_leaf(rng, KINDS[int(rng.integers(len(KINDS)))], n_features)
    children = [random_tree(rng, depth - 1, n_features) for _ in range(int(rng.integers(2, 4)))]
    return kern.Sum(children) if rng.uniform() < 0.5 else kern.Product(children)


def dense_gp(K, Ks, Kss, y, noise, mean_train=0.0, mean_test=0.0):
    """Direct dense-inverse GP formulas (no Cholesky)."""
    n = K.shape[0]
    Ky = K + noise * np.eye(n)
    Kinv = np.linalg.inv(Ky)
    r = y - mean_train
    mu = Ks.T @ Kinv @ r + mean_test
    var = np.diag(Kss) - np.einsum("ij,ik,kj->j", Ks, Kinv, Ks)
    sign, logdet = np.linalg.slogdet(Ky)
    lml = -0.5 * r @ Kinv @ r - 0.5 * logdet - 0.5 * n * math.log(2 * math.pi)
    return mu, var, lml


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
