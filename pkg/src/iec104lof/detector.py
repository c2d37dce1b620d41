"""Windowed LOF detection over inter-arrival-time series."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_n_neighbors, check_points, check_threshold
from .features import FeatureSeries, split_series
from .lof import DEFAULT_K, DEFAULT_THRESHOLD, LofModel, auto_threshold, fit_lof, score

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 5000
BATCH = "batch_per_window"
TRAIN_THEN_SCORE = "train_then_score"
MODES = (BATCH, TRAIN_THEN_SCORE)
INLIER = "inlier"
OUTLIER = "outlier"


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = DEFAULT_WINDOW
    k: int = DEFAULT_K
    threshold: float | str = DEFAULT_THRESHOLD
    mode: str = BATCH

    def __post_init__(self):
        check_n_neighbors(self.k)
        check_threshold(self.threshold)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.window_size <= self.k + 1:
            raise ValueError(
                f"window_size ({self.window_size}) must exceed k + 1 ({self.k + 1})")

    def as_dict(self) -> dict:
        return asdict(self)


def partition_windows(n: int, window_size: int, k: int) -> list[tuple[int, int]]:
    """Tumbling windows over ``n`` samples as (start, stop) pairs.

    A trailing window of ``k + 1`` samples or fewer is folded into the
    previous one so that every sample gets a verdict.
    """
    if n < k + 2:
        raise ValueError(f"series of {n} samples is shorter than k + 2 = {k + 2}")
    bounds = [(s, min(s + window_size, n)) for s in range(0, n, window_size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] <= k + 1:
        tail = bounds.pop()
        bounds[-1] = (bounds[-1][0], tail[1])
    return bounds


@dataclass
class DetectionReport:
    """Per-sample scores and verdicts plus summary counts.

    ``thresholds`` holds one threshold per window; a sample is an outlier
    when its score is strictly greater than its window's threshold.
    """

    indices: np.ndarray
    window_ids: np.ndarray
    scores: np.ndarray
    thresholds: np.ndarray
    config: dict = field(default_factory=dict)

    @property
    def sample_thresholds(self) -> np.ndarray:
        return self.thresholds[self.window_ids] if len(self.window_ids) else np.empty(0)

    @property
    def is_outlier(self) -> np.ndarray:
        return self.scores > self.sample_thresholds

    @property
    def verdicts(self) -> list[str]:
        return [OUTLIER if o else INLIER for o in self.is_outlier]

    @property
    def n_outliers(self) -> int:
        return int(self.is_outlier.sum())

    @property
    def n_windows(self) -> int:
        return len(self.thresholds)

    def per_window_outliers(self) -> list[int]:
        return np.bincount(self.window_ids[self.is_outlier], minlength=self.n_windows).tolist()

    def summary(self) -> dict:
        return {
            "total": int(len(self.scores)),
            "outliers": self.n_outliers,
            "windows": self.n_windows,
            "per_window_outliers": self.per_window_outliers(),
            "thresholds": [float(t) for t in self.thresholds],
        }

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "summary": self.summary()}, indent=2,
                          sort_keys=True)


def _fit_window(values, cfg: WindowConfig) -> LofModel:
    return fit_lof(values.reshape(-1, 1), cfg.k, cfg.threshold)


def detect_windowed(series: FeatureSeries, cfg: WindowConfig = WindowConfig(),
                    n_jobs: Optional[int] = None,
                    window_order: Optional[Sequence[int]] = None) -> DetectionReport:
    """Score every sample of ``series`` window by window.

    ``batch_per_window``: LOF is fitted independently on each window and each
    sample is judged by its own LOF. ``train_then_score``: the first window is
    fitted and every later sample is scored against that model.

    ``window_order`` only changes the processing order (results are assembled
    by window id); ``n_jobs`` runs windows in parallel via joblib.
    """
    bounds = partition_windows(len(series), cfg.window_size, cfg.k)
    order = list(range(len(bounds))) if window_order is None else list(window_order)
    if sorted(order) != list(range(len(bounds))):
        raise ValueError("window_order must be a permutation of the window ids")
    iat = series.iat
    scores = np.empty(len(iat))
    thresholds = np.empty(len(bounds))

    if cfg.mode == BATCH:
        models = Parallel(n_jobs=n_jobs)(
            delayed(_fit_window)(iat[bounds[w][0]:bounds[w][1]], cfg) for w in order)
        for w, model in zip(order, models):
            start, stop = bounds[w]
            scores[start:stop] = model.lof
            thresholds[w] = model.threshold
    else:
        base = _fit_window(iat[bounds[0][0]:bounds[0][1]], cfg)
        scored = Parallel(n_jobs=n_jobs)(
            delayed(score)(base, iat[bounds[w][0]:bounds[w][1]].reshape(-1, 1))
            for w in order if w != 0)
        scores[bounds[0][0]:bounds[0][1]] = base.lof
        for w, s in zip([w for w in order if w != 0], scored):
            scores[bounds[w][0]:bounds[w][1]] = s
        thresholds[:] = base.threshold

    window_ids = np.empty(len(iat), dtype=np.intp)
    for w, (start, stop) in enumerate(bounds):
        window_ids[start:stop] = w
    return DetectionReport(series.indices, window_ids, scores, thresholds, cfg.as_dict())


@dataclass
class ValidationResult:
    """Outcome of the train/test protocol.

    ``false_positives`` counts flagged test samples that are not labelled as
    attacks (all flagged samples when the series is unlabelled).
    ``detected``/``attack_samples``/``detection_rate`` are ``None`` unless
    the series carries labels.
    """

    train_samples: int
    test_samples: int
    false_positives: int
    threshold: float
    test_indices: np.ndarray
    test_scores: np.ndarray
    attack_samples: Optional[int] = None
    detected: Optional[int] = None
    config: dict = field(default_factory=dict)

    @property
    def normal_samples(self) -> int:
        return self.test_samples - (self.attack_samples or 0)

    @property
    def fp_rate(self) -> float:
        return self.false_positives / self.normal_samples if self.normal_samples else 0.0

    @property
    def detection_rate(self) -> Optional[float]:
        if not self.attack_samples:
            return None
        return self.detected / self.attack_samples

    def summary(self) -> dict:
        out = {
            "train_samples": self.train_samples,
            "test_samples": self.test_samples,
            "false_positives": self.false_positives,
            "fp_rate": self.fp_rate,
            "threshold": self.threshold,
        }
        if self.attack_samples is not None:
            out.update(attack_samples=self.attack_samples, detected=self.detected,
                       detection_rate=self.detection_rate)
        return out

    def to_text(self) -> str:
        return "\n".join(f"{key}={value}" for key, value in self.summary().items())

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "summary": self.summary()},
                          indent=2, sort_keys=True)


class WindowedLOFDetector(OutlierMixin, BaseEstimator):
    """Learns one LOF model per training window and scores new samples.

    A new sample's score is its lowest score across the window models: it is
    normal if it fits any learned block of normal traffic.

    Parameters
    ----------
    window_size : int, default=5000
    n_neighbors : int, default=20
    threshold : float or "auto", default=1.5
        ``"auto"`` takes the 99.9th percentile of all training LOF values.
    n_jobs : int, optional
    """

    def __init__(self, window_size=DEFAULT_WINDOW, n_neighbors=DEFAULT_K,
                 threshold=DEFAULT_THRESHOLD, n_jobs=None):
        self.window_size = window_size
        self.n_neighbors = n_neighbors
        self.threshold = threshold
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        X = check_points(X)
        if X.shape[1] != 1:
            raise ValueError("expected a single inter-arrival-time column")
        cfg = WindowConfig(self.window_size, self.n_neighbors, 1.5, BATCH)
        bounds = partition_windows(len(X), cfg.window_size, cfg.k)
        self.models_ = Parallel(n_jobs=self.n_jobs)(
            delayed(_fit_window)(X[a:b, 0], cfg) for a, b in bounds)
        threshold = check_threshold(self.threshold)
        if threshold == "auto":
            threshold = auto_threshold(np.concatenate([m.lof for m in self.models_]))
        self.threshold_ = threshold
        self.window_bounds_ = bounds
        self.n_features_in_ = 1
        return self

    def lof_score(self, X):
        check_is_fitted(self)
        X = check_points(X)
        per_model = Parallel(n_jobs=self.n_jobs)(delayed(score)(m, X) for m in self.models_)
        return np.min(per_model, axis=0)

    def score_samples(self, X):
        return -self.lof_score(X)

    def decision_function(self, X):
        return self.score_samples(X) + self.threshold_

    def predict(self, X):
        return np.where(self.lof_score(X) > self.threshold_, -1, 1)


def validate(series: FeatureSeries, cfg: WindowConfig = WindowConfig(),
             train_fraction: float = 2 / 3, n_jobs: Optional[int] = None) -> ValidationResult:
    """Train on the leading part of ``series`` and score the rest.

    The training part is cut into windows of ``cfg.window_size`` with one LOF
    model each (see :class:`WindowedLOFDetector`). Every flagged test sample
    not labelled as an attack is a false positive.
    """
    train, test = split_series(series, train_fraction)
    detector = WindowedLOFDetector(cfg.window_size, cfg.k, cfg.threshold, n_jobs)
    detector.fit(train.as_points())
    scores = detector.lof_score(test.as_points())
    flagged = scores > detector.threshold_
    attack_samples = detected = None
    if test.labels is not None:
        attack_samples = int(test.labels.sum())
        detected = int((flagged & test.labels).sum())
        false_positives = int((flagged & ~test.labels).sum())
    else:
        false_positives = int(flagged.sum())
    config = cfg.as_dict() | {"train_fraction": train_fraction}
    return ValidationResult(len(train), len(test), false_positives, float(detector.threshold_),
                            test.indices, scores, attack_samples, detected, config)


PLOT_COLUMNS = ("sample_index", "iat_seconds", "score", "verdict")


def emit_plot_data(report: DetectionReport, series: FeatureSeries, path) -> int:
    """Write one row per sample: index, iat, score, verdict. Returns row count."""
    if len(report.indices) != len(series) or not np.array_equal(report.indices, series.indices):
        raise ValueError("report and series are not aligned")
    verdicts = report.verdicts
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PLOT_COLUMNS)
        for idx, iat, s, v in zip(report.indices, series.iat, report.scores, verdicts):
            writer.writerow([int(idx), repr(float(iat)), repr(float(s)), v])
    return len(verdicts)
