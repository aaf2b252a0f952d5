"""Pipeline configuration: a TOML document resolved against documented defaults.

Every section is optional except ``[data]`` (``path``, ``features``,
``target``) and ``[kernel]`` (``expr``).  Unknown keys are rejected so that
typos cannot silently fall back to defaults.  The resolved configuration is a
plain nested dict that is embedded verbatim in model documents and reports.

Example::

    name = "framework"
    seed = 0

    [data]
    path = "glacier.csv"
    features = ["x", "y", "elev", "ocean_dist"]
    target = "target"
    track = "track"

    [kernel]
    expr = "Mat32(x,y,elev) + Mat32(ocean_dist)"

    [[kernel.leaf]]          # optional, one table per leaf in expression order
    lengthscale = 0.5
    prior = { lengthscale = [0.0, 1.0] }   # Gaussian on log(value)

    [scale]
    mode = "experts"
    [scale.experts]
    features = ["x", "y"]
    k = 16

Hyperparameter values, priors and bounds are in model units, i.e. after the
input and target transforms.
"""

from __future__ import annotations

import copy
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .gp import DEFAULT_JITTER_LADDER, DEFAULT_MAX_EXACT
from .transforms import KINDS

MODES = ("exact", "experts", "svgp", "kronecker")
METRIC_NAMES = ("rmse", "rmse_p5", "rmse_p95", "r2", "mll", "mae", "bias", "bic")

REQUIRED = object()

DEFAULTS = {
    "name": "gp",
    "seed": 0,
    "data": {
        "path": REQUIRED,
        "features": REQUIRED,
        "target": REQUIRED,
        "track": None,
        "row_id": None,
        "max_train_rows": None,
    },
    "split": {"fractions": [0.7, 0.1, 0.2], "unit": None, "seed": None},
    "transforms": {"features": "zscore", "target": "zscore", "columns": {}},
    "kernel": {
        "expr": REQUIRED,
        "ard": False,
        "leaf": [],
        "noise": {"value": None, "learnable": True, "prior": None, "bounds": None},
        "jitter_ladder": list(DEFAULT_JITTER_LADDER),
        "max_exact": DEFAULT_MAX_EXACT,
    },
    "mean": {"kind": "zero", "learnable": True},
    "train": {
        "learning_rate": 0.01,
        "epochs": 150,
        "restarts": 3,
        "seed": None,
        "grad_tol": 1e-6,
        "log_every": 0,
        "log_path": None,
        "hyper_subsample": None,
    },
    "scale": {
        "mode": "exact",
        "experts": {
            "method": "kmeans",
            "k": 16,
            "tile_size": None,
            "features": None,
            "sharing": "independent",
            "aggregation": "rbcm",
            "max_iter": 100,
        },
        "svgp": {"inducing": 1000, "optimize_inducing": True},
        "kronecker": {},
    },
    "eval": {"split": "val", "metrics": list(METRIC_NAMES), "report": "report"},
    "baseline": {"features": None, "k": 10},
}

LEAF_KEYS = {"ard", "variance", "lengthscale", "period", "prior", "bounds", "fixed"}


def _merge(defaults, given, where):
    if not isinstance(given, dict):
        raise ConfigError(f"{where or 'config'} must be a table")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{where or 'top level'}]")
    out = {}
    for key, dv in defaults.items():
        path = f"{where}.{key}" if where else key
        if isinstance(dv, dict) and dv and key != "columns":
            out[key] = _merge(dv, given.get(key, {}), path)
        elif key in given:
            out[key] = copy.deepcopy(given[key])
        elif dv is REQUIRED:
            raise ConfigError(f"missing required key {path}")
        else:
            out[key] = copy.deepcopy(dv)
    return out


def _check(cond, message):
    if not cond:
        raise ConfigError(message)


def _positive_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0


def _validate(cfg):
    d = cfg["data"]
    _check(isinstance(d["path"], str) and d["path"], "data.path must be a non-empty string")
    _check(isinstance(d["features"], list) and d["features"]
           and all(isinstance(f, str) for f in d["features"]),
           "data.features must be a non-empty list of column names")
    _check(len(set(d["features"])) == len(d["features"]), "data.features contains duplicates")
    _check(isinstance(d["target"], str), "data.target must be a column name")
    _check(d["target"] not in d["features"], "data.target is also listed as a feature")
    if d["max_train_rows"] is not None:
        _check(isinstance(d["max_train_rows"], int) and d["max_train_rows"] > 0,
               "data.max_train_rows must be a positive integer")

    s = cfg["split"]
    if s["unit"] is None:
        s["unit"] = "track" if d["track"] else "row"
    _check(s["unit"] in ("track", "row"), "split.unit must be 'track' or 'row'")
    f = s["fractions"]
    _check(isinstance(f, list) and len(f) == 3 and all(_positive_number(x) for x in f)
           and abs(sum(f) - 1.0) < 1e-9, "split.fractions must be three positive numbers summing to 1")
    if s["seed"] is None:
        s["seed"] = cfg["seed"]

    t = cfg["transforms"]
    for key in ("features", "target"):
        _check(t[key] in KINDS, f"transforms.{key} must be one of {list(KINDS)}")
    _check(isinstance(t["columns"], dict), "transforms.columns must be a table")
    for col, kind in t["columns"].items():
        _check(col in d["features"], f"transforms.columns names unknown feature {col!r}")
        _check(kind in KINDS, f"transforms.columns.{col} must be one of {list(KINDS)}")

    k = cfg["kernel"]
    _check(isinstance(k["expr"], str), "kernel.expr must be a string")
    _check(isinstance(k["leaf"], list), "kernel.leaf must be an array of tables")
    for i, leaf in enumerate(k["leaf"]):
        _check(isinstance(leaf, dict), f"kernel.leaf[{i}] must be a table")
        unknown = set(leaf) - LEAF_KEYS
        _check(not unknown, f"unknown key(s) {sorted(unknown)} in kernel.leaf[{i}]")
    _check(isinstance(k["max_exact"], int) and k["max_exact"] > 0, "kernel.max_exact must be a positive integer")

    _check(cfg["mean"]["kind"] in ("zero", "constant", "linear"), "mean.kind must be zero, constant or linear")

    tr = cfg["train"]
    _check(_positive_number(tr["learning_rate"]), "train.learning_rate must be positive")
    _check(isinstance(tr["epochs"], int) and tr["epochs"] >= 0, "train.epochs must be a non-negative integer")
    _check(isinstance(tr["restarts"], int) and tr["restarts"] >= 1, "train.restarts must be >= 1")
    if tr["seed"] is None:
        tr["seed"] = cfg["seed"]
    if tr["hyper_subsample"] is not None:
        _check(isinstance(tr["hyper_subsample"], int) and tr["hyper_subsample"] > 0,
               "train.hyper_subsample must be a positive integer")

    sc = cfg["scale"]
    _check(sc["mode"] in MODES, f"scale.mode must be one of {list(MODES)}")
    if sc["mode"] == "experts":
        e = sc["experts"]
        _check(e["method"] in ("kmeans", "grid"), "scale.experts.method must be kmeans or grid")
        _check(isinstance(e["features"], list) and e["features"],
               "scale.experts.features must list the chunking columns")
        for col in e["features"]:
            _check(col in d["features"], f"scale.experts.features names unknown feature {col!r}")
        if e["method"] == "grid":
            _check(e["tile_size"] is not None, "scale.experts.tile_size is required for grid chunking")
        else:
            _check(isinstance(e["k"], int) and e["k"] >= 1, "scale.experts.k must be a positive integer")
        _check(e["sharing"] in ("independent", "shared"), "scale.experts.sharing must be independent or shared")
        _check(e["aggregation"] in ("bcm", "rbcm"), "scale.experts.aggregation must be bcm or rbcm")
    if sc["mode"] == "svgp":
        _check(isinstance(sc["svgp"]["inducing"], int) and sc["svgp"]["inducing"] >= 1,
               "scale.svgp.inducing must be a positive integer")

    ev = cfg["eval"]
    _check(ev["split"] in ("train", "val", "test"), "eval.split must be train, val or test")
    for m in ev["metrics"]:
        _check(m in METRIC_NAMES, f"unknown metric {m!r}; expected one of {list(METRIC_NAMES)}")

    b = cfg["baseline"]
    if b["features"] is not None:
        for col in b["features"]:
            _check(col in d["features"], f"baseline.features names unknown feature {col!r}")
    _check(isinstance(b["k"], int) and b["k"] >= 1, "baseline.k must be a positive integer")
    return cfg


def resolve(doc, base_dir=".", seed=None):
    """Merge ``doc`` with :data:`DEFAULTS`, validate and return the resolved dict.

    ``seed`` (the ``--seed`` flag) replaces the top-level seed before the
    per-section seeds default to it.  ``data.path`` is made absolute
    relative to ``base_dir``.
    """
    cfg = _merge(DEFAULTS, doc, "")
    if seed is not None:
        cfg["seed"] = int(seed)
    _check(isinstance(cfg["seed"], int) and not isinstance(cfg["seed"], bool), "seed must be an integer")
    if isinstance(cfg["data"]["path"], str) and cfg["data"]["path"]:
        cfg["data"]["path"] = os.path.abspath(os.path.join(base_dir, cfg["data"]["path"]))
    return _validate(cfg)


def load(path, seed=None):
    """Read and resolve a TOML config file."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"invalid TOML in {path}: {err}") from None
    return resolve(doc, os.path.dirname(os.path.abspath(path)), seed)
