"""Datasets, CSV I/O, track-based splitting, chunking and a synthetic glacier generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist

from .errors import (
    DataError,
    EmptyDataset,
    KTooLarge,
    MissingColumn,
    MissingTrackIds,
    NoSpatialFeatures,
    ParseError,
    TooFewTracks,
)

PREDICTION_COLUMNS = ("row_id", "prediction", "latent_std", "obs_std", "lower95", "upper95")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    feature_names: tuple
    target: np.ndarray
    row_ids: np.ndarray
    track_id: np.ndarray | None = None
    n_dropped: int = 0
    has_target: bool = True

    def __post_init__(self):
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DataError(f"duplicate feature names {self.feature_names}")
        n = self.features.shape[0]
        if self.target.shape != (n,) or self.row_ids.shape != (n,):
            raise DataError("features, target and row_ids disagree in length")
        if self.track_id is not None and self.track_id.shape != (n,):
            raise DataError("track_id length mismatch")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n(self):
        return len(self)

    def subset(self, idx):
        idx = np.asarray(idx)
        return replace(
            self,
            features=self.features[idx],
            target=self.target[idx],
            row_ids=self.row_ids[idx],
            track_id=None if self.track_id is None else self.track_id[idx],
            n_dropped=0,
        )

    def columns(self, names):
        """Feature submatrix for ``names`` in the given order."""
        pos = {n: i for i, n in enumerate(self.feature_names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise MissingColumn(f"unknown feature(s) {missing}")
        return self.features[:, [pos[n] for n in names]]


###############################################################################
# CSV
###############################################################################


def _fmt(x):
    return repr(float(x))


def read_header(path):
    with open(path, newline="", encoding="utf-8") as fh:
        try:
            return [h.strip() for h in next(csv.reader(fh))]
        except StopIteration:
            raise EmptyDataset(f"{path}: file is empty") from None


def load_csv(path, features, target, track=None, row_id=None):
    """Read a UTF-8 comma-separated file with a header row.

    ``target=None`` loads features only (``has_target`` is then False and
    the target vector is zero).

    Rows with an empty, unparseable or non-finite value in any selected
    column are dropped and counted in ``Dataset.n_dropped``.  A row with the
    wrong number of fields raises :class:`ParseError`.  Row ids come from
    the ``row_id`` column when given, otherwise from the data-row index.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        pos = {h: i for i, h in enumerate(header)}
        wanted = list(features) + ([target] if target else []) + ([track] if track else []) + (
            [row_id] if row_id else [])
        for col in wanted:
            if col not in pos:
                raise MissingColumn(f"column {col!r} not found in {path}")
        fcols = [pos[f] for f in features]
        X, y, tr, ids = [], [], [], []
        n_rows = dropped = 0
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: expected {len(header)} fields, got {len(row)}",
                                 row=line_no, column=None)
            idx = n_rows
            n_rows += 1
            try:
                xs = [float(row[c]) for c in fcols]
                t = float(row[pos[target]]) if target else 0.0
                k = int(float(row[pos[track]])) if track else 0
                rid = int(float(row[pos[row_id]])) if row_id else idx
            except ValueError:
                dropped += 1
                continue
            if not (all(math.isfinite(v) for v in xs) and math.isfinite(t)):
                dropped += 1
                continue
            X.append(xs)
            y.append(t)
            tr.append(k)
            ids.append(rid)
    if not X:
        raise EmptyDataset(f"{path}: no usable data rows ({dropped} dropped)")
    return Dataset(
        features=np.array(X, dtype=float).reshape(len(X), len(features)),
        feature_names=tuple(features),
        target=np.array(y, dtype=float),
        row_ids=np.array(ids, dtype=np.int64),
        track_id=np.array(tr, dtype=np.int64) if track else None,
        n_dropped=dropped,
        has_target=bool(target),
    )


def write_csv(path, ds, target_name="target", track_name="track"):
    cols = ["row_id", *ds.feature_names, target_name] + ([track_name] if ds.track_id is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(ds.n):
            row = [str(int(ds.row_ids[i]))] + [_fmt(v) for v in ds.features[i]] + [_fmt(ds.target[i])]
            if ds.track_id is not None:
                row.append(str(int(ds.track_id[i])))
            w.writerow(row)


def write_predictions(path, row_ids, prediction, latent_std, obs_std, lower95, upper95):
    cols = (row_ids, prediction, latent_std, obs_std, lower95, upper95)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for i in range(len(row_ids)):
            w.writerow([str(int(row_ids[i]))] + [_fmt(c[i]) for c in cols[1:]])


###############################################################################
# splitting
###############################################################################


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.70, 0.10, 0.20)
    unit: str = "track"
    seed: int = 0

    def __post_init__(self):
        f = tuple(float(x) for x in self.fractions)
        if len(f) != 3 or min(f) <= 0 or abs(sum(f) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be three positive numbers summing to 1, got {f}")
        object.__setattr__(self, "fractions", f)
        if self.unit not in ("track", "row"):
            raise ValueError(f"split unit must be 'track' or 'row', got {self.unit!r}")


def largest_remainder(total, fractions):
    raw = [total * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split(ds, spec=SplitSpec()):
    """Partition ``ds`` into (train, val, test); whole tracks stay together."""
    rng = np.random.default_rng(spec.seed)
    if spec.unit == "track":
        if ds.track_id is None:
            raise MissingTrackIds("track split requested but the dataset has no track ids")
        units = np.unique(ds.track_id)
        if units.size < 3:
            raise TooFewTracks(f"need at least 3 tracks, found {units.size}")
        key = ds.track_id
    else:
        units = np.arange(ds.n)
        if units.size < 3:
            raise TooFewTracks(f"need at least 3 rows, found {units.size}")
        key = units
    perm = rng.permutation(units)
    counts = largest_remainder(units.size, spec.fractions)
    bounds = np.cumsum([0] + counts)
    out = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        members = np.isin(key, perm[a:b])
        out.append(ds.subset(np.flatnonzero(members)))
    return tuple(out)


###############################################################################
# chunking
###############################################################################


@dataclass
class Chunking:
    method: str
    assignment: np.ndarray
    n_chunks: int
    features: tuple
    tile_size: tuple | None = None
    k: int | None = None
    inertia: float | None = None
    inertia_history: list = field(default_factory=list)
    centers: np.ndarray | None = None
    iterations: int = 0

    def members(self, c):
        return np.flatnonzero(self.assignment == c)

    def to_dict(self):
        return {
            "method": self.method,
            "assignment": self.assignment.tolist(),
            "n_chunks": self.n_chunks,
            "features": list(self.features),
            "tile_size": None if self.tile_size is None else list(self.tile_size),
            "k": self.k,
            "inertia": self.inertia,
            "centers": None if self.centers is None else self.centers.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            method=d["method"],
            assignment=np.array(d["assignment"], dtype=np.int64),
            n_chunks=d["n_chunks"],
            features=tuple(d["features"]),
            tile_size=None if d["tile_size"] is None else tuple(d["tile_size"]),
            k=d["k"],
            inertia=d["inertia"],
            centers=None if d["centers"] is None else np.array(d["centers"]),
        )


def _compact(labels):
    uniq, inv = np.unique(labels, return_inverse=True)
    return inv.astype(np.int64).ravel(), uniq.size


def kmeans_pp_init(Z, k, rng):
    n = Z.shape[0]
    centers = [int(rng.integers(n))]
    d2 = cdist(Z, Z[centers[-1:]], "sqeuclidean").ravel()
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(n), centers)
            nxt = int(rng.choice(free))
        centers.append(nxt)
        d2 = np.minimum(d2, cdist(Z, Z[[nxt]], "sqeuclidean").ravel())
    return Z[centers].copy()


def kmeans(Z, k, max_iter=100, seed=0):
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(labels, centers, inertia_history, iterations)``.  Empty
    clusters keep their previous centre.
    """
    Z = np.asarray(Z, dtype=float)
    n = Z.shape[0]
    if k > n:
        raise KTooLarge(f"k={k} exceeds the number of points {n}")
    if k < 1:
        raise KTooLarge("k must be at least 1")
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(Z, k, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = cdist(Z, centers, "sqeuclidean")
        new = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new].sum()))
        if len(history) > 1:
            assert history[-1] <= history[-2] * (1 + 1e-12) + 1e-12, "k-means inertia increased"
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            mask = labels == c
            if mask.any():
                centers[c] = Z[mask].mean(axis=0)
        history.append(float(((Z - centers[labels]) ** 2).sum()))
        assert history[-1] <= history[-2] * (1 + 1e-12) + 1e-12, "k-means inertia increased"
    return labels, centers, history, it


def chunk(ds, method="kmeans", features=None, k=16, tile_size=None, max_iter=100, seed=0):
    """Assign every row of ``ds`` to exactly one chunk.

    ``grid`` floors each spatial coordinate by its tile size; ``kmeans``
    runs Lloyd's algorithm on the chosen features.  Empty chunks are dropped
    and ids compacted to ``0..M-1``.
    """
    features = tuple(features or ())
    if not features:
        raise NoSpatialFeatures("chunking needs at least one spatial feature")
    Z = ds.columns(features) if isinstance(ds, Dataset) else np.asarray(ds, dtype=float)
    if method == "grid":
        ts = np.broadcast_to(np.asarray(tile_size, dtype=float), (len(features),))
        if np.any(ts <= 0):
            raise ValueError("tile sizes must be positive")
        cells = np.floor(Z / ts).astype(np.int64)
        _, inv = np.unique(cells, axis=0, return_inverse=True)
        assignment, m = _compact(inv)
        return Chunking("grid", assignment, m, features, tile_size=tuple(ts.tolist()))
    if method == "kmeans":
        labels, centers, hist, it = kmeans(Z, k, max_iter, seed)
        assignment, m = _compact(labels)
        used = np.unique(labels)
        return Chunking("kmeans", assignment, m, features, k=k, inertia=hist[-1],
                        inertia_history=hist, centers=centers[used], iterations=it)
    raise ValueError(f"unknown chunking method {method!r}")


###############################################################################
# synthetic glacier-like data
###############################################################################

# Frozen generator constants (km, m, m/yr).
DOMAIN_KM = 600.0
POINTS_PER_TRACK = 200
DOME_HEIGHT_M = 3000.0
DOME_RADIUS_KM = 330.0
COAST_AMPLITUDE = 2.0        # a: peak thinning at the coast, m/yr
COAST_DECAY_KM = 40.0        # b: e-folding distance from the coast
FIELD_AMPLITUDE = 0.1        # smooth regional field, fades inland
FIELD_DECAY_KM = 150.0
NOISE_SD = 0.02
GLACIER_FEATURES = ("x", "y", "elev", "ocean_dist", "slope", "aspect", "velocity")


def glacier_signal(x, y):
    """Noise-free target of :func:`synthesize_glacier` at coordinates (x, y)."""
    od = ocean_distance(x, y)
    coast = -COAST_AMPLITUDE * np.exp(-od / COAST_DECAY_KM)
    field_ = (FIELD_AMPLITUDE * np.exp(-od / FIELD_DECAY_KM)
              * np.sin(2 * np.pi * x / 250.0) * np.cos(2 * np.pi * y / 200.0))
    return coast + field_


def ocean_distance(x, y):
    return np.minimum.reduce([x, DOMAIN_KM - x, y, DOMAIN_KM - y])


def synthesize_glacier(n=20_000, seed=0):
    """Desk-scale stand-in for satellite elevation-change data.

    Points lie on near-vertical tracks (denser towards high ``y``) over a
    square ice sheet.  The target is ``-a exp(-ocean_dist / b)`` plus a
    small regional field and Gaussian noise; see the module constants.
    """
    if n < 100:
        raise ValueError("synthesize_glacier needs n >= 100")
    rng = np.random.default_rng(seed)
    n_tracks = max(10, n // POINTS_PER_TRACK)
    spacing = DOMAIN_KM / n_tracks
    x0 = (np.arange(n_tracks) + 0.5) * spacing + rng.normal(0, 0.1 * spacing, n_tracks)
    tilt = rng.normal(0, 0.02, n_tracks)
    track = np.sort(rng.integers(0, n_tracks, n))
    y = DOMAIN_KM * np.sqrt(rng.uniform(0, 1, n))
    x = x0[track] + tilt[track] * (y - DOMAIN_KM / 2) + rng.normal(0, 0.3, n)
    x = np.clip(x, 0.0, DOMAIN_KM)
    order = np.lexsort((y, track))
    x, y, track = x[order], y[order], track[order]

    cx = cy = DOMAIN_KM / 2
    r = np.hypot(x - cx, y - cy)
    q = np.clip(1 - (r / DOME_RADIUS_KM) ** 2, 0.0, None)
    elev = DOME_HEIGHT_M * np.sqrt(q) + rng.normal(0, 5.0, n)
    # |d elev / d r| in m/km, finite at the rim
    grad = DOME_HEIGHT_M * (r / DOME_RADIUS_KM ** 2) / np.sqrt(np.maximum(q, 1e-3))
    slope = np.degrees(np.arctan(grad / 1000.0)) * np.exp(rng.normal(0, 0.2, n))
    aspect = np.mod(np.degrees(np.arctan2(y - cy, x - cx)) + rng.normal(0, 10.0, n), 360.0)
    od = ocean_distance(x, y)
    velocity = np.exp(np.log(5.0 + 100.0 * np.exp(-od / 60.0)) + rng.normal(0, 0.5, n))
    target = glacier_signal(x, y) + rng.normal(0, NOISE_SD, n)

    feats = np.column_stack([x, y, elev, od, slope, aspect, velocity])
    return Dataset(feats, GLACIER_FEATURES, target, np.arange(n, dtype=np.int64), track.astype(np.int64))
