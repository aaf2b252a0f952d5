"""End-to-end pipeline: load, split, transform, fit, serialize, predict, evaluate.

A fitted model is a single JSON document holding the resolved configuration,
the package version, the seed, the transform specs and everything needed to
rebuild the predictor (training data in model units, chunk assignment and
expert hyperparameters, inducing inputs and q(u), or grid factors).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import __version__
from . import gp as gpc
from . import kernels as kern
from . import scale
from . import train as tr
from . import transforms as tf
from .data import Chunking, SplitSpec, chunk, load_csv, read_header, split
from .errors import (
    ConfigError,
    DataError,
    MissingColumn,
    RankDeficient,
    SchemaMismatch,
    SizeCapExceeded,
)
from .evaluation import (
    TAIL_CONVENTION,
    compute_metrics,
    format_table,
    knn_predict,
    linreg_fit,
    rank_reports,
    residual_diagnostics,
)

DOC_FORMAT = "gpframe.model/1"
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
SPLIT_LABELS = {
    "train": "training split (in-sample)",
    "val": "validation split (used for model selection)",
    "test": "held-out test split (not iterated over)",
    "external": "external data file",
}


###############################################################################
# data and transforms
###############################################################################


def load_dataset(cfg, path=None, with_target=True, with_track=True):
    d = cfg["data"]
    path = path or d["path"]
    header = read_header(path)
    row_id = d["row_id"] or ("row_id" if "row_id" in header else None)
    track = d["track"] if with_track else None
    return load_csv(path, d["features"], d["target"] if with_target else None, track, row_id)


def _subsample(n, size, seed, stream):
    rng = np.random.default_rng(np.random.SeedSequence([seed, stream]))
    return np.sort(rng.choice(n, size, replace=False))


def prepare_splits(cfg):
    """``{"train", "val", "test"}`` datasets for ``cfg``.

    With ``data.max_train_rows`` the training split is subsampled (seeded);
    validation and test are untouched.
    """
    ds = load_dataset(cfg)
    s = cfg["split"]
    train, val, test = split(ds, SplitSpec(tuple(s["fractions"]), s["unit"], s["seed"]))
    cap = cfg["data"]["max_train_rows"]
    if cap is not None and train.n > cap:
        train = train.subset(_subsample(train.n, cap, s["seed"], 1))
    return {"train": train, "val": val, "test": test}


def train_fingerprint(train):
    return tf.fingerprint(np.column_stack([train.row_ids, train.features, train.target]))


@dataclass
class FittedTransforms:
    features: dict
    target: tf.TransformSpec
    fingerprint: str

    def X(self, features, names, fit_fingerprint=None):
        F = np.asarray(features, dtype=float)
        cols = [tf.apply(self.features[n], F[:, j], fit_fingerprint) for j, n in enumerate(names)]
        return np.column_stack(cols) if cols else np.empty((F.shape[0], 0))

    def y(self, values, fit_fingerprint=None):
        return tf.apply(self.target, values, fit_fingerprint)

    def to_dict(self):
        return {"features": {n: s.to_dict() for n, s in self.features.items()},
                "target": self.target.to_dict(), "fingerprint": self.fingerprint}

    @classmethod
    def from_dict(cls, d):
        return cls({n: tf.TransformSpec.from_dict(s) for n, s in d["features"].items()},
                   tf.TransformSpec.from_dict(d["target"]), d["fingerprint"])


def fit_transforms(cfg, train):
    """Fit every column transform on the training split only."""
    t = cfg["transforms"]
    fp = train_fingerprint(train)
    feats = {}
    for j, name in enumerate(train.feature_names):
        kind = t["columns"].get(name, t["features"])
        feats[name] = tf.fit_transform(train.features[:, j], kind, fitted_on=fp)
    target = tf.fit_transform(train.target, t["target"], fitted_on=fp)
    return FittedTransforms(feats, target, fp)


###############################################################################
# model construction
###############################################################################


def _param_kinds(leaf):
    out = {"variance": [leaf.variance], "lengthscale": list(leaf.lengthscales)}
    if leaf.period is not None:
        out["period"] = [leaf.period]
    return out


def _configure_leaf(leaf, i, lc, default_ard, overrides):
    ard = bool(lc.get("ard", default_ard)) and len(leaf.active_features) > 1
    if ard != leaf.ard:
        leaf.ard = ard
        names = [f"lengthscale.{f}" for f in leaf.active_features] if ard else ["lengthscale"]
        leaf.lengthscales = [kern.HyperParam(n, 1.0) for n in names]
    kinds = _param_kinds(leaf)
    for kind in ("variance", "lengthscale", "period"):
        if kind not in lc:
            continue
        if kind not in kinds:
            raise ConfigError(f"kernel.leaf[{i}]: {leaf.kind} has no {kind}")
        vals = np.atleast_1d(np.asarray(lc[kind], dtype=float))
        params = kinds[kind]
        if vals.size == 1:
            vals = np.repeat(vals, len(params))
        if vals.size != len(params):
            raise ConfigError(f"kernel.leaf[{i}].{kind} needs {len(params)} values, got {vals.size}")
        for p, v in zip(params, vals):
            overrides[f"k{i}.{p.name}"] = float(v)
    for table, attr in (("prior", "prior"), ("bounds", "bounds")):
        for kind, spec in (lc.get(table) or {}).items():
            if kind not in kinds:
                raise ConfigError(f"kernel.leaf[{i}].{table}: unknown parameter {kind!r}")
            for p in kinds[kind]:
                try:
                    # re-run validation through the constructor
                    probe = kern.HyperParam(p.name, 1.0, **{attr: spec})
                except (TypeError, ValueError, IndexError) as err:
                    raise ConfigError(f"kernel.leaf[{i}].{table}.{kind}: {err}") from None
                setattr(p, attr, getattr(probe, attr))
    for kind in lc.get("fixed", []):
        if kind not in kinds:
            raise ConfigError(f"kernel.leaf[{i}].fixed: unknown parameter {kind!r}")
        if kind not in lc:
            raise ConfigError(f"kernel.leaf[{i}]: fixed {kind} needs an explicit value")
        for p in kinds[kind]:
            p.fixed = True


def build_model(cfg, names):
    """Untrained :class:`GPModel` and the explicit initial values from the config.

    Parameters listed as fixed are flagged before initialization, so they
    keep their configured values.
    """
    kc = cfg["kernel"]
    kernel = kern.parse_kernel_expr(kc["expr"], names)
    leaves = kernel.leaves()
    if len(kc["leaf"]) > len(leaves):
        raise ConfigError(f"{len(kc['leaf'])} kernel.leaf tables for {len(leaves)} leaves")
    overrides = {}
    for i, leaf in enumerate(leaves):
        lc = kc["leaf"][i] if i < len(kc["leaf"]) else {}
        _configure_leaf(leaf, i, lc, kc["ard"], overrides)
    nc = kc["noise"]
    if not nc["learnable"] and nc["value"] is None:
        raise ConfigError("kernel.noise: a non-learnable noise needs an explicit value")
    try:
        noise = kern.HyperParam("noise", 1.0, prior=nc["prior"], bounds=nc["bounds"],
                                fixed=not nc["learnable"])
    except (TypeError, ValueError, IndexError) as err:
        raise ConfigError(f"kernel.noise: {err}") from None
    if nc["value"] is not None:
        overrides["noise"] = float(nc["value"])
    mc = cfg["mean"]
    if mc["kind"] == "linear":
        mean = gpc.MeanSpec.linear(len(names), learnable=mc["learnable"])
    else:
        mean = gpc.MeanSpec(mc["kind"], learnable=mc["learnable"])
    try:
        model = gpc.GPModel(kernel, noise, mean, tuple(kc["jitter_ladder"]), kc["max_exact"])
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return model, overrides


def initial_model(cfg, names, X, y):
    model, overrides = build_model(cfg, names)
    try:
        return tr.initialize_hyperparams(model, X, y, overrides, cfg["seed"])
    except ValueError as err:
        raise ConfigError(f"initial value: {err}") from None


def train_config(cfg):
    t = cfg["train"]
    return tr.TrainConfig(
        learning_rate=float(t["learning_rate"]), epochs=int(t["epochs"]), restarts=int(t["restarts"]),
        seed=int(t["seed"]), grad_tol=float(t["grad_tol"]), log_every=int(t["log_every"]),
        log_path=t["log_path"])


###############################################################################
# fit
###############################################################################


def _exact_objective(model, X, y):
    return tr.map_objective(X, y)(model, model.get_params())[0]


def fit(cfg, threads=1):
    """Run the training pipeline for a resolved config.

    Returns ``(document, train_report)``; both are JSON-serializable dicts.
    """
    splits = prepare_splits(cfg)
    train = splits["train"]
    names = list(train.feature_names)
    tfm = fit_transforms(cfg, train)
    X = tfm.X(train.features, names, tfm.fingerprint)
    y = tfm.y(train.target, tfm.fingerprint)
    model = initial_model(cfg, names, X, y)
    tcfg = train_config(cfg)
    mode = cfg["scale"]["mode"]
    n = X.shape[0]

    if mode == "exact":
        if n > model.max_exact:
            raise SizeCapExceeded(
                f"n={n} exceeds the exact-GP cap of {model.max_exact}; use experts or svgp scaling")
        hs = cfg["train"]["hyper_subsample"]
        Xh, yh = X, y
        if hs is not None and n > hs:
            idx = _subsample(n, hs, cfg["seed"], 2)
            Xh, yh = X[idx], y[idx]
        initial = _exact_objective(model, Xh, yh)
        fitted, trace = tr.optimize(model, Xh, yh, tcfg)
        final = trace.best_objective
        state = {"gp": fitted.to_dict(), "X": X.tolist(), "y": y.tolist(),
                 "hyper_rows": int(Xh.shape[0])}
        traces = [trace.to_dict()]
    elif mode == "experts":
        ec = cfg["scale"]["experts"]
        ch = chunk(train, ec["method"], ec["features"], ec["k"], ec["tile_size"], ec["max_iter"],
                   cfg["seed"])
        ens = scale.fit_experts(X, y, ch.assignment, model, tcfg, ec["sharing"], threads,
                                ec["aggregation"])
        chunks = [(X[ch.assignment == c], y[ch.assignment == c]) for c in range(ch.n_chunks)]
        initial = float(sum(_exact_objective(model, Xc, yc) for Xc, yc in chunks))
        if ec["sharing"] == "shared":
            final = ens.experts[0].trace.best_objective
        else:
            final = float(sum(e.trace.best_objective for e in ens.experts))
        state = {"X": X.tolist(), "y": y.tolist(), "chunking": ch.to_dict(),
                 "sharing": ens.sharing, "aggregation": ens.aggregation,
                 "failed_chunks": ens.failed_chunks,
                 "experts": [{"chunk_id": e.chunk_id, "gp": e.model.to_dict()} for e in ens.experts]}
        traces = [e.trace.to_dict() for e in ens.experts]
        if ec["sharing"] == "shared":
            traces = traces[:1]
    elif mode == "svgp":
        if model.mean.kind != "zero":
            raise ConfigError("svgp mode supports only a zero mean")
        sc = cfg["scale"]["svgp"]
        m = min(sc["inducing"], n)
        Z = scale.init_inducing(X, m, cfg["seed"])
        initial = scale.collapsed_bound(model.kernel, model.noise, Z, X, y) + model.log_prior()
        sgp, trace = scale.svgp_fit(X, y, model.kernel, model.noise, Z, tcfg,
                                    sc["optimize_inducing"], model.jitter_ladder)
        final = trace.best_objective
        state = {"sparse": sgp.to_dict()}
        traces = [trace.to_dict()]
    else:
        if model.mean.kind != "zero":
            raise ConfigError("kronecker mode supports only a zero mean")
        grids, _, order = scale.grid_structure(X, model.kernel)
        y_grid = y[order]
        initial = scale.kronecker_lml_and_grad(model.kernel, model.noise.value, grids, y_grid)[0] \
            + model.log_prior()
        kgp, trace = scale.kronecker_fit(X, y, model.kernel, model.noise, tcfg)
        final = trace.best_objective
        state = {"kronecker": kgp.to_dict()}
        traces = [{k: v for k, v in trace.to_dict().items() if k != "theta"}]

    doc = {
        "format": DOC_FORMAT,
        "version": __version__,
        "name": cfg["name"],
        "seed": cfg["seed"],
        "mode": mode,
        "config": cfg,
        "features": names,
        "target": cfg["data"]["target"],
        "split": {k: int(v.n) for k, v in splits.items()},
        "transforms": tfm.to_dict(),
        "state": state,
        "training": {"initial_objective": float(initial), "final_objective": float(final),
                     "traces": traces},
    }
    report = {
        "name": cfg["name"],
        "version": __version__,
        "seed": cfg["seed"],
        "mode": mode,
        "n_train": n,
        "n_dropped": int(splits["train"].n_dropped),
        "initial_objective": float(initial),
        "final_objective": float(final),
        "improved": bool(final >= initial),
        "config": cfg,
    }
    if mode != "kronecker":
        report["theta"] = traces[0]["theta"]
    if mode == "experts":
        report["n_experts"] = len(state["experts"])
        report["failed_chunks"] = state["failed_chunks"]
    return doc, report


###############################################################################
# predictor
###############################################################################


@dataclass
class Prediction:
    """Predictions in original units plus the model-scale Gaussian."""

    median: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray
    latent_std: np.ndarray
    obs_std: np.ndarray
    model_scale: gpc.PredictiveDistribution
    n_domain_errors: int = 0
    n_fallback: int = 0

    @property
    def counters(self):
        return {"n_clamped": self.model_scale.n_clamped, "n_fallback": self.n_fallback,
                "n_domain_errors": self.n_domain_errors}


class Predictor:
    """Rebuilds a fitted model from its document."""

    def __init__(self, doc, threads=1):
        if doc.get("format") != DOC_FORMAT:
            raise SchemaMismatch(f"not a model document (format {doc.get('format')!r})")
        self.doc = doc
        self.threads = threads
        self.mode = doc["mode"]
        self.features = list(doc["features"])
        self.transforms = FittedTransforms.from_dict(doc["transforms"])
        st = doc["state"]
        if self.mode == "exact":
            self.model = gpc.GPModel.from_dict(st["gp"])
            self.X, self.y = np.array(st["X"]), np.array(st["y"])
            self.cache = gpc.fit_cache(self.model, self.X, self.y)
        elif self.mode == "experts":
            X, y = np.array(st["X"]), np.array(st["y"])
            self.X, self.y = X, y
            self.chunking = Chunking.from_dict(st["chunking"])
            experts = []
            for e in st["experts"]:
                m = gpc.GPModel.from_dict(e["gp"])
                rows = self.chunking.assignment == e["chunk_id"]
                experts.append(scale.Expert(e["chunk_id"], m, gpc.fit_cache(m, X[rows], y[rows])))
            self.ensemble = scale.ExpertEnsemble(experts, st["sharing"], st["aggregation"],
                                                 st["failed_chunks"])
        elif self.mode == "svgp":
            self.sparse = scale.SparseGP.from_dict(st["sparse"])
        elif self.mode == "kronecker":
            self.kron = scale.KroneckerGP.from_dict(st["kronecker"])
        else:
            raise SchemaMismatch(f"unknown mode {self.mode!r}")

    @classmethod
    def load(cls, path, threads=1):
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"model document {path} not found") from None
        except json.JSONDecodeError as err:
            raise SchemaMismatch(f"{path} is not valid JSON: {err}") from None
        return cls(doc, threads)

    @property
    def config(self):
        return self.doc["config"]

    def predict_model_scale(self, Xz):
        if self.mode == "exact":
            return gpc.predict(self.model, self.cache, Xz)
        if self.mode == "experts":
            return scale.aggregate_predict(self.ensemble, Xz, self.threads)
        if self.mode == "svgp":
            return scale.svgp_predict(self.sparse, Xz)
        return scale.kronecker_predict(self.kron, Xz)

    def predict(self, features):
        """Predict at raw (untransformed) feature rows."""
        Xz = self.transforms.X(features, self.features)
        dist = self.predict_model_scale(Xz)
        spec = self.transforms.target
        band = tf.inverse_predictive(spec, dist)
        slope = np.abs(tf.inverse_derivative(spec, dist.mean))
        return Prediction(band.median, band.lower, band.upper, dist.latent_std * slope,
                          dist.obs_std * slope, dist, band.n_domain_errors,
                          int(getattr(dist, "n_fallback", 0)))

    def log_density(self, y, prediction):
        """Per-point log predictive density of original-scale ``y``.

        Points outside the target transform's domain, or with zero predictive
        variance, get ``nan``.
        """
        spec = self.transforms.target
        y = np.asarray(y, dtype=float)
        ok = np.ones(y.shape, bool) if spec.kind in ("identity", "zscore") else (y + spec.shift > 0)
        out = np.full(y.shape, np.nan)
        d = prediction.model_scale
        z = tf.apply(spec, y[ok])
        v = d.observation_variance[ok]
        r = z - d.mean[ok]
        with np.errstate(divide="ignore", invalid="ignore"):  # zero variance gives nan
            out[ok] = -0.5 * np.log(v) - _HALF_LOG_2PI - 0.5 * r * r / v + tf.log_jacobian(spec, y[ok])
        return out

    def exact_parts(self):
        """``(GPModel, X, y)`` triples of the exact GPs inside the predictor."""
        if self.mode == "exact":
            return [(self.model, self.X, self.y)]
        if self.mode == "experts":
            a = self.chunking.assignment
            return [(e.model, self.X[a == e.chunk_id], self.y[a == e.chunk_id])
                    for e in self.ensemble.experts]
        if self.mode == "svgp":
            return [(gpc.GPModel(self.sparse.kernel, self.sparse.noise), None, None)]
        return [(gpc.GPModel(self.kron.kernel, self.kron.noise), None, None)]

    def bic_terms(self, train):
        """``(lml, n_free, n)`` on the original target scale, exact mode only."""
        if self.mode != "exact":
            return None
        lml = gpc.log_marginal_likelihood(self.model, self.cache)
        lml += float(np.sum(tf.log_jacobian(self.transforms.target, train.target)))
        return lml, int(np.sum(self.model.free_mask())), int(self.y.size)

    def sample_latent(self, Xz, count, seed):
        """Posterior latent sample paths (model scale) at ``Xz``.

        Experts mode samples the expert whose chunk centre is nearest to the
        middle of ``Xz``, since committee aggregation has no joint covariance.
        """
        rng = np.random.default_rng(seed)
        if self.mode == "exact":
            return gpc.sample(self.model, Xz, count, rng, condition=self.cache)
        if self.mode == "experts":
            e = self._nearest_expert(Xz)
            return gpc.sample(e.model, Xz, count, rng, condition=e.cache)
        if self.mode == "svgp":
            mean, cov = _svgp_joint(self.sparse, Xz)
        else:
            mean, cov = _kron_joint(self.kron, Xz)
        L, _ = gpc.jittered_cholesky(cov)
        return (mean[:, None] + L @ rng.standard_normal((mean.size, count))).T

    def _nearest_expert(self, Xz):
        mid = Xz[Xz.shape[0] // 2]
        best, best_d = None, math.inf
        for e in self.ensemble.experts:
            d = float(np.min(np.sum((e.cache.train_inputs - mid) ** 2, axis=1)))
            if d < best_d:
                best, best_d = e, d
        return best


def _svgp_joint(sgp, Xs):
    m = sgp.m
    Kmm = sgp.kernel.K(sgp.Z, sgp.Z) + sgp.jitter * np.eye(m)
    L = np.linalg.cholesky(Kmm)
    Kms = sgp.kernel.K(sgp.Z, Xs)
    A = np.linalg.solve(Kmm, Kms)
    W = np.linalg.solve(L, Kms)
    V = sgp.q_factor.T @ A
    cov = sgp.kernel.K(Xs, Xs) - W.T @ W + V.T @ V
    return A.T @ sgp.q_mean, 0.5 * (cov + cov.T)


def _kron_joint(kgp, Xs):
    sys_ = kgp.system()
    cross = np.column_stack([kron_col for kron_col in _kron_cross(kgp, Xs)])
    solved = np.column_stack([scale.kronecker_solve(sys_, c) for c in cross.T])
    mean = cross.T @ scale.kronecker_solve(sys_, kgp.y_grid)
    cov = kgp.kernel.K(Xs, Xs) - cross.T @ solved
    return mean, 0.5 * (cov + cov.T)


def _kron_cross(kgp, Xs):
    """Columns k(grid, x*) for each row of ``Xs`` (grid in row-major order)."""
    per_axis = [k.K(g, Xs) for k, g in zip(kgp.axis_kernels(), kgp.grids)]
    for j in range(Xs.shape[0]):
        col = per_axis[0][:, j]
        for f in per_axis[1:]:
            col = np.kron(col, f[:, j])
        yield col


###############################################################################
# predict / evaluate / baselines / diagnose
###############################################################################


def read_inputs(predictor, path):
    """Features (and row ids) of a CSV for prediction; schema errors exit as data errors."""
    cfg = predictor.config
    header = read_header(path)
    missing = [f for f in predictor.features if f not in header]
    if missing:
        raise SchemaMismatch(f"input {path} lacks feature column(s) {missing}")
    row_id = cfg["data"]["row_id"] or ("row_id" if "row_id" in header else None)
    try:
        return load_csv(path, predictor.features, None, None, row_id)
    except MissingColumn as err:
        raise SchemaMismatch(str(err)) from None


def _labelled(cfg, which, data_path, unlock_test, fingerprint=None):
    if data_path is not None:
        try:
            ds = load_dataset(cfg, data_path, with_track=False)
        except MissingColumn as err:
            raise SchemaMismatch(str(err)) from None
        return ds, None, "external"
    if which == "test" and not unlock_test:
        raise ConfigError("test split is locked; pass --unlock-test to evaluate on it")
    splits = prepare_splits(cfg)
    if fingerprint is not None and train_fingerprint(splits["train"]) != fingerprint:
        raise DataError("training split no longer matches the model document (data file changed?)")
    return splits[which], splits["train"], which


def _unique_name(name, taken):
    out, i = name, 2
    while out in taken:
        out = f"{name}#{i}"
        i += 1
    return out


def _select(metrics_dict, keep):
    drop = set(("rmse", "rmse_p5", "rmse_p95", "r2", "mll", "mae", "bias", "bic")) - set(keep)
    return {k: v for k, v in metrics_dict.items() if k not in drop}


def baseline_predictions(cfg, train, ds):
    """k-NN and linear-regression point predictions on z-scored inputs."""
    names = cfg["baseline"]["features"] or list(train.feature_names)
    Xtr, Xte = train.columns(names), ds.columns(names)
    specs = [tf.fit_transform(Xtr[:, j], "zscore") for j in range(len(names))]
    Ztr = np.column_stack([tf.apply(s, Xtr[:, j]) for j, s in enumerate(specs)])
    Zte = np.column_stack([tf.apply(s, Xte[:, j]) for j, s in enumerate(specs)])
    out, errors = {}, {}
    out["knn"] = knn_predict(Ztr, train.target, Zte, cfg["baseline"]["k"])
    try:
        out["linreg"] = linreg_fit(Ztr, train.target, names=names).predict(Zte)
    except RankDeficient as err:
        errors["linreg"] = str(err)
    return out, errors


def evaluate(predictors, which="val", data_path=None, unlock_test=False, baselines=False,
             baseline_cfg=None):
    """Metrics report for fitted models and/or baselines on one labelled set.

    Returns ``(report, table_text)``.  All models must share the evaluated
    data; it is taken from the first model's config (or ``baseline_cfg``).
    """
    cfg0 = predictors[0].config if predictors else baseline_cfg
    if cfg0 is None:
        raise ConfigError("nothing to evaluate")
    fp0 = predictors[0].transforms.fingerprint if predictors else None
    ds, train, label = _labelled(cfg0, which, data_path, unlock_test, fp0)
    preds, meta_models = {}, {}
    for p in predictors:
        if not set(p.features) <= set(ds.feature_names):
            raise SchemaMismatch(f"model {p.doc['name']} expects features {p.features}")
        name = _unique_name(p.doc["name"], preds)
        pr = p.predict(ds.columns(p.features))
        ld = p.log_density(ds.target, pr)
        bad = ~np.isfinite(ld)
        counters = dict(pr.counters)
        counters["n_domain_errors"] += int(bad.sum())
        entry = {"mean": pr.median, "counters": counters, "log_density": np.where(bad, np.nan, ld)}
        ptrain = train
        if ptrain is None and p.mode == "exact":
            ptrain = _labelled(p.config, "train", None, False, p.transforms.fingerprint)[0]
        bic = p.bic_terms(ptrain) if ptrain is not None else None
        if bic is not None:
            entry["lml"], k, n = bic
            entry["n_params"] = (k, n)
        preds[name] = entry
        meta_models[name] = {"mode": p.mode, "seed": p.doc["seed"], "version": p.doc["version"],
                             "kernel": p.config["kernel"]["expr"], "config": p.config}
        if p.mode == "experts":
            meta_models[name]["aggregation"] = p.doc["state"]["aggregation"]
            meta_models[name]["sharing"] = p.doc["state"]["sharing"]
            meta_models[name]["n_experts"] = len(p.doc["state"]["experts"])
    baseline_errors = {}
    if baselines:
        btrain = train if train is not None else prepare_splits(cfg0)["train"]
        bpreds, baseline_errors = baseline_predictions(cfg0, btrain, ds)
        for name, mu in bpreds.items():
            key = _unique_name(name, preds)
            preds[key] = {"mean": mu}
            meta_models[key] = {"mode": "baseline",
                                "features": cfg0["baseline"]["features"] or list(btrain.feature_names)}
    if not preds:
        raise ConfigError("nothing to evaluate")

    # mll covers in-domain points only; the rest are counted in n_domain_errors
    reports = {name: compute_metrics(ds.target, e["mean"], lml=e.get("lml"),
                                     n_params=e.get("n_params"), counters=e.get("counters"),
                                     log_density=e.get("log_density"))
               for name, e in preds.items()}
    keep = cfg0["eval"]["metrics"]
    report = {name: _select(r.to_dict(), keep) for name, r in reports.items()}
    ranks = rank_reports(reports) if len(reports) >= 2 else None
    report["_meta"] = {
        "version": __version__,
        "split": label,
        "split_description": SPLIT_LABELS[label],
        "n": int(ds.n),
        "tail_convention": TAIL_CONVENTION,
        "metrics": list(keep),
        "models": meta_models,
        "ranks": ranks,
        "baseline_errors": baseline_errors,
    }
    header = f"# {SPLIT_LABELS[label]}, n = {ds.n}\n# {TAIL_CONVENTION}\n"
    return report, header + format_table(reports)


def diagnose(predictor, which="val", data_path=None, unlock_test=False, seed=0, slice_feature=None,
             n_paths=5, n_slice=100, grad_rows=100, self_check_rows=500):
    """Residual diagnostics, posterior sample paths, gradient check and self-check.

    Returns ``(bundle, samples)`` where ``samples`` is a dict of columns
    (slice value, mean and paths in original units).
    """
    cfg = predictor.config
    ds, train, label = _labelled(cfg, which, data_path, unlock_test, predictor.transforms.fingerprint)
    if train is None:
        train = prepare_splits(cfg)["train"]
    names = predictor.features
    spec = predictor.transforms.target

    pr = predictor.predict(ds.columns(names))
    d = pr.model_scale
    z_true = tf.apply(spec, ds.target) if spec.kind in ("identity", "zscore") else _safe_apply(spec, ds.target)
    ok = np.isfinite(z_true)
    resid = residual_diagnostics(z_true[ok], d.mean[ok], d.observation_variance[ok],
                                 ds.columns(names)[ok], names)

    # 1-D slice through the training medians
    sf = slice_feature or names[0]
    if sf not in names:
        raise ConfigError(f"slice feature {sf!r} is not a model feature")
    j = names.index(sf)
    Ftr = train.columns(names)
    grid = np.linspace(Ftr[:, j].min(), Ftr[:, j].max(), n_slice)
    base = np.median(Ftr, axis=0)
    F = np.tile(base, (n_slice, 1))
    F[:, j] = grid
    Xz = predictor.transforms.X(F, names)
    paths_z = predictor.sample_latent(Xz, n_paths, seed)
    mean_z = predictor.predict_model_scale(Xz).mean
    samples = {sf: grid, "mean": tf.inverse(spec, mean_z)}
    for i in range(n_paths):
        samples[f"path{i}"] = tf.inverse(spec, paths_z[i])

    # gradient check on the first exact component (subsampled)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    gmodel, gX, gy = predictor.exact_parts()[0]
    if gX is None:
        gX = predictor.transforms.X(Ftr, names)
        gy = predictor.transforms.y(train.target)
    if gX.shape[0] > grad_rows:
        idx = np.sort(rng.choice(gX.shape[0], grad_rows, replace=False))
        gX, gy = gX[idx], gy[idx]
    grad = tr.check_gradients(gmodel, gX, gy)

    # self-check: refit the fitted (exact) component on data simulated from itself
    Xtr_z = predictor.transforms.X(Ftr, names)
    if Xtr_z.shape[0] > self_check_rows:
        Xtr_z = Xtr_z[np.sort(rng.choice(Xtr_z.shape[0], self_check_rows, replace=False))]
    sc = tr.self_check(gmodel, Xtr_z, seed)

    bundle = {
        "version": __version__,
        "model": predictor.doc["name"],
        "mode": predictor.mode,
        "seed": seed,
        "split": label,
        "split_description": SPLIT_LABELS[label],
        "residuals": resid.to_dict(),
        "sample_paths": {"feature": sf, "n_paths": n_paths, "fixed_at_training_median":
                         {n: float(v) for n, v in zip(names, base) if n != sf}},
        "gradient_check": {**grad.to_dict(), "passed": grad.ok, "rows": int(gX.shape[0])},
        "self_check": sc.to_dict(),
        "config": cfg,
    }
    return bundle, samples


def _safe_apply(spec, y):
    y = np.asarray(y, dtype=float)
    out = np.full(y.shape, np.nan)
    ok = y + spec.shift > 0
    out[ok] = tf.apply(spec, y[ok])
    return out
