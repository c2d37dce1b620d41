"""Exact Local Outlier Factor with tie-inclusive neighbourhoods.

The k-distance neighbourhood of a point is the closed ball of radius
k-distance(p), so it holds *every* point tied at that radius and can be
larger than k. Means over the neighbourhood are taken over that full set.

Duplicates get special treatment: a point whose neighbourhood lies entirely
on top of it has mean reachability distance 0, hence infinite local
reachability density. When a point and all its neighbours have infinite
density its LOF is defined as 1.

Neighbour search runs over the unique coordinates (weighted by how often each
occurs) using a KD-tree for candidates and exact distances for every
decision, so the result is identical to the quadratic definition but does
not blow up on data with many repeated values.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_n_neighbors, check_points, check_threshold

logger = logging.getLogger(__name__)

DEFAULT_K = 20
DEFAULT_THRESHOLD = 1.5
AUTO_PERCENTILE = 99.9
BRUTE_FORCE_LIMIT = 10_000
MODEL_FORMAT = "iec104lof-model"
MODEL_VERSION = 1


def distance(p, o) -> float:
    """Euclidean distance between two points."""
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    o = np.atleast_1d(np.asarray(o, dtype=np.float64))
    if p.shape != o.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {o.shape}")
    return float(np.sqrt(np.sum((p - o) ** 2)))


def _row_distances(X, x):
    return np.sqrt(((X - x) ** 2).sum(axis=1))


def k_distance(X, i: int, k: int) -> tuple[float, np.ndarray]:
    """k-distance of point ``i`` of ``X`` and its k-distance neighbourhood.

    Computed by direct counting over every other point: the radius is the
    k-th smallest distance, and the neighbourhood is every point (other than
    ``i``) no farther than that radius.
    """
    X = check_points(X)
    check_n_neighbors(k, len(X))
    d = _row_distances(X, X[i])
    others = np.delete(np.arange(len(X)), i)
    d_others = d[others]
    radius = np.sort(d_others)[k - 1]
    return float(radius), others[d_others <= radius]


def reach_dist(d_po: float, k_distance_o: float) -> float:
    """Reachability distance of p w.r.t. o: ``max(k-distance(o), d(p, o))``."""
    return max(k_distance_o, d_po)


def _density_ratio(lrd_neighbors, lrd_self):
    lrd_neighbors = np.asarray(lrd_neighbors, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = lrd_neighbors / lrd_self
    ratio = np.where(np.isinf(lrd_neighbors) & np.isinf(lrd_self), 1.0, ratio)
    return ratio


def _inverse(mean_reach):
    with np.errstate(divide="ignore"):
        return 1.0 / np.asarray(mean_reach, dtype=np.float64)


class _GroupIndex:
    """Unique coordinates with multiplicities plus a KD-tree over them."""

    def __init__(self, X, n_jobs=None):
        self.unique, inverse, self.counts = np.unique(
            X, axis=0, return_inverse=True, return_counts=True)
        self.inverse = inverse.reshape(-1)
        self.tree = cKDTree(self.unique)
        self.n_jobs = n_jobs
        order = np.argsort(self.inverse, kind="stable")
        bounds = np.concatenate([[0], np.cumsum(self.counts)])
        self._members = [order[bounds[g]:bounds[g + 1]] for g in range(len(self.unique))]

    def __len__(self):
        return len(self.unique)

    def members(self, g):
        return self._members[g]

    def _weights(self, groups, own):
        w = self.counts[groups].copy()
        if own is not None:
            w[groups == own] -= 1
        return w

    def _radius(self, coords, groups, k, own):
        d = _row_distances(self.unique[groups], coords)
        w = self._weights(groups, own)
        order = np.argsort(d, kind="stable")
        cum = np.cumsum(w[order])
        return d[order][np.searchsorted(cum, k)]

    def neighbourhood(self, coords, k, own=None):
        """Return (radius, groups, distances, weights) for a location.

        ``own`` is the group of the point being queried, which is then not
        counted as its own neighbour.
        """
        n_first = min(k + (own is not None), len(self))
        _, first = self.tree.query(coords, k=n_first, workers=self._workers)
        first = np.atleast_1d(first)
        estimate = self._radius(coords, first, k, own)
        groups = np.asarray(self.tree.query_ball_point(coords, estimate * (1 + 1e-9)),
                            dtype=np.intp)
        radius = self._radius(coords, groups, k, own)
        d = _row_distances(self.unique[groups], coords)
        w = self._weights(groups, own)
        keep = (d <= radius) & (w > 0)
        return float(radius), groups[keep], d[keep], w[keep]

    @property
    def _workers(self):
        return 1 if self.n_jobs is None else self.n_jobs


@dataclass(eq=False)
class NeighborhoodTable:
    """Neighbourhoods of every training point, stored per unique coordinate.

    ``k_distance`` is per point. Neighbour sets are expanded to point ids on
    request through :meth:`neighbors`.
    """

    k: int
    k_distance: np.ndarray
    _index: _GroupIndex = field(repr=False)
    _groups: list = field(repr=False)
    _dists: list = field(repr=False)
    _weights: list = field(repr=False)

    def _group_of(self, i):
        return self._index.inverse[i]

    def neighbors(self, i: int) -> np.ndarray:
        g = self._group_of(i)
        ids = np.concatenate([self._index.members(h) for h in self._groups[g]])
        return np.sort(ids[ids != i])

    def distances(self, i: int) -> dict[int, float]:
        g = self._group_of(i)
        out = {}
        for h, d in zip(self._groups[g], self._dists[g]):
            for j in self._index.members(h):
                if j != i:
                    out[int(j)] = float(d)
        return out

    def reach_dists(self, i: int) -> dict[int, float]:
        return {j: reach_dist(d, float(self.k_distance[j]))
                for j, d in self.distances(i).items()}

    def neighborhood_size(self, i: int) -> int:
        return int(self._weights[self._group_of(i)].sum())


@dataclass(eq=False)
class LofModel:
    """A fitted LOF model. Treat as immutable; safe to share between scorers."""

    points: np.ndarray
    k: int
    k_distance: np.ndarray
    lrd: np.ndarray
    lof: np.ndarray
    threshold: float
    table: Optional[NeighborhoodTable] = None

    def __post_init__(self):
        self._index = self.table._index if self.table is not None else _GroupIndex(self.points)
        first = np.array([self._index.members(g)[0] for g in range(len(self._index))],
                         dtype=np.intp)
        self._group_kdist = self.k_distance[first]
        self._group_lrd = self.lrd[first]

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_features(self) -> int:
        return self.points.shape[1]

    def outliers(self) -> np.ndarray:
        return np.flatnonzero(self.lof > self.threshold)

    def score(self, Q) -> np.ndarray:
        return score(self, Q)


def auto_threshold(lof_values, percentile: float = AUTO_PERCENTILE) -> float:
    """Threshold at a high percentile of training scores, never below 1."""
    finite = np.asarray(lof_values, dtype=np.float64)
    finite = finite[np.isfinite(finite)]
    if finite.size == 0:
        return float(np.nextafter(1.0, 2.0))
    value = float(np.percentile(finite, percentile))
    return max(value, float(np.nextafter(1.0, 2.0)))


def fit_lof(X, k: int = DEFAULT_K, threshold=DEFAULT_THRESHOLD, n_jobs=None) -> LofModel:
    """Compute k-distance, reachability distances, lrd and LOF for every point.

    ``threshold`` is a number > 1 or ``"auto"`` (99.9th percentile of the
    training scores).
    """
    X = check_points(X)
    k = check_n_neighbors(k, len(X))
    threshold = check_threshold(threshold)
    index = _GroupIndex(X, n_jobs=n_jobs)
    n_groups = len(index)

    group_kdist = np.empty(n_groups)
    groups, dists, weights = [], [], []
    for g in range(n_groups):
        radius, nbr, d, w = index.neighbourhood(index.unique[g], k, own=g)
        group_kdist[g] = radius
        groups.append(nbr)
        dists.append(d)
        weights.append(w)

    mean_reach = np.array([
        np.dot(w, np.maximum(group_kdist[nbr], d)) / w.sum()
        for nbr, d, w in zip(groups, dists, weights)
    ])
    group_lrd = _inverse(mean_reach)
    group_lof = np.array([
        np.dot(w, _density_ratio(group_lrd[nbr], group_lrd[g])) / w.sum()
        for g, (nbr, w) in enumerate(zip(groups, weights))
    ])

    kdist = group_kdist[index.inverse]
    table = NeighborhoodTable(k, kdist, index, groups, dists, weights)
    lof = group_lof[index.inverse]
    if threshold == "auto":
        threshold = auto_threshold(lof)
    return LofModel(X, k, kdist, group_lrd[index.inverse], lof, threshold, table)


def score(model: LofModel, Q) -> np.ndarray:
    """LOF-style score of new points against a fitted model, without refitting.

    Each query's neighbourhood is taken among the training points (a
    training point with identical coordinates counts as a neighbour).
    """
    Q = check_points(Q, name="Q")
    if Q.shape[1] != model.n_features:
        raise ValueError(f"model has {model.n_features} features, got {Q.shape[1]}")
    index = model._index
    out = np.empty(len(Q))
    for i, q in enumerate(Q):
        _, nbr, d, w = index.neighbourhood(q, model.k)
        reach = np.maximum(model._group_kdist[nbr], d)
        lrd_q = _inverse(np.dot(w, reach) / w.sum())
        out[i] = np.dot(w, _density_ratio(model._group_lrd[nbr], lrd_q)) / w.sum()
    return out


def brute_force_lof(X, k: int) -> np.ndarray:
    """Reference LOF by direct application of the definitions (quadratic)."""
    X = check_points(X)
    n = len(X)
    k = check_n_neighbors(k, n)
    if n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force is limited to {BRUTE_FORCE_LIMIT} points")
    kdist = np.empty(n)
    neighbors = []
    for i in range(n):
        kdist[i], ids = k_distance(X, i, k)
        neighbors.append(ids)
    lrd = np.empty(n)
    for i, ids in enumerate(neighbors):
        d = _row_distances(X[ids], X[i])
        reach = np.maximum(kdist[ids], d)
        lrd[i] = _inverse(reach.mean())
    lof = np.empty(n)
    for i, ids in enumerate(neighbors):
        if np.isinf(lrd[i]):
            ratios = np.where(np.isinf(lrd[ids]), 1.0, 0.0)
        else:
            ratios = lrd[ids] / lrd[i]
        lof[i] = ratios.mean()
    return lof


def save_model(model: LofModel, path) -> None:
    """Write a model to a versioned ``.npz`` file.

    Layout: ``format``, ``version``, ``k``, ``n_points``, ``points`` (n x d),
    ``k_distance``, ``lrd``, ``lof`` (length n) and ``threshold``.
    """
    buf = io.BytesIO()
    np.savez(
        buf,
        format=np.array(MODEL_FORMAT),
        version=np.array(MODEL_VERSION),
        k=np.array(model.k),
        n_points=np.array(model.n_points),
        points=model.points,
        k_distance=model.k_distance,
        lrd=model.lrd,
        lof=model.lof,
        threshold=np.array(model.threshold),
    )
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> LofModel:
    with np.load(Path(path), allow_pickle=False) as data:
        if str(data["format"]) != MODEL_FORMAT:
            raise ValueError(f"{path}: not a model file")
        version = int(data["version"])
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported model version {version}")
        points = data["points"]
        if int(data["n_points"]) != len(points):
            raise ValueError(f"{path}: point count does not match stored points")
        return LofModel(points, int(data["k"]), data["k_distance"], data["lrd"],
                        data["lof"], float(data["threshold"]))


class LocalOutlierFactor(OutlierMixin, BaseEstimator):
    """Exact LOF outlier detector with a fixed decision threshold.

    Parameters
    ----------
    n_neighbors : int, default=20
        k, the neighbourhood size.
    threshold : float or "auto", default=1.5
        Points with LOF strictly above this are outliers. ``"auto"`` uses the
        99.9th percentile of the training scores.
    n_jobs : int, optional
        Worker count for the KD-tree queries.

    Attributes
    ----------
    model_ : LofModel
    lof_ : ndarray of shape (n_samples,)
        LOF of each training point.
    negative_outlier_factor_ : ndarray
        ``-lof_``, for parity with scikit-learn.
    threshold_ : float

    Unlike scikit-learn's estimator, neighbourhoods include every point tied
    at the k-distance and :meth:`predict` on new data uses the same threshold
    as on training data.
    """

    def __init__(self, n_neighbors=DEFAULT_K, threshold=DEFAULT_THRESHOLD, n_jobs=None):
        self.n_neighbors = n_neighbors
        self.threshold = threshold
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        X = check_points(X)
        self.model_ = fit_lof(X, self.n_neighbors, self.threshold, self.n_jobs)
        self.lof_ = self.model_.lof
        self.negative_outlier_factor_ = -self.lof_
        self.threshold_ = self.model_.threshold
        self.n_features_in_ = X.shape[1]
        return self

    def lof_score(self, X):
        """Positive LOF score of new points (about 1 for inliers)."""
        check_is_fitted(self)
        return score(self.model_, X)

    def score_samples(self, X):
        """Opposite of the LOF score; lower means more abnormal."""
        return -self.lof_score(X)

    def decision_function(self, X):
        """Negative for outliers, non-negative for inliers."""
        return self.score_samples(X) + self.threshold_

    def predict(self, X):
        """+1 for inliers, -1 for outliers."""
        return np.where(self.lof_score(X) > self.threshold_, -1, 1)

    def fit_predict(self, X, y=None):
        """Label the training points by their own LOF."""
        self.fit(X)
        return np.where(self.lof_ > self.threshold_, -1, 1)
