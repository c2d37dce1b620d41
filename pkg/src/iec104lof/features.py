"""Inter-arrival-time series built from packet records."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .ingest import Conversation, PacketRecord, to_microseconds

ATTACK = "attack"
NORMAL = "normal"


@dataclass(frozen=True)
class FeatureSeries:
    """Inter-arrival times of one conversation, in arrival order.

    Sample ``i`` (1-based, ``indices[i-1]``) is the gap between packet ``i-1``
    and packet ``i`` of the conversation; ``timestamps`` holds the arrival time
    of the later packet. ``conversation`` is ``None`` when all traffic has been
    merged into one series. ``labels`` marks attack samples when ground truth
    is known (a sample inherits the label of its later packet).
    """

    conversation: Optional[Conversation]
    iat: np.ndarray
    timestamps: np.ndarray
    start_index: int = 1
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        iat = np.asarray(self.iat, dtype=np.float64)
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if iat.ndim != 1 or ts.shape != iat.shape:
            raise ValueError("iat and timestamps must be 1-D arrays of equal length")
        if np.any(iat < 0):
            raise ValueError("inter-arrival times must be non-negative")
        object.__setattr__(self, "iat", iat)
        object.__setattr__(self, "timestamps", ts)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=bool)
            if labels.shape != iat.shape:
                raise ValueError("labels must align with samples")
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.iat)

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.start_index, self.start_index + len(self.iat))

    def as_points(self) -> np.ndarray:
        """Samples as an ``(n, 1)`` matrix, the layout the LOF estimators take."""
        return self.iat.reshape(-1, 1)

    def slice(self, start: int, stop: int) -> "FeatureSeries":
        return FeatureSeries(
            self.conversation,
            self.iat[start:stop],
            self.timestamps[start:stop],
            self.start_index + start,
            None if self.labels is None else self.labels[start:stop],
        )


def _series_from(conversation, stamps_us: list[int], labels: Optional[list[bool]]):
    order = np.argsort(np.asarray(stamps_us, dtype=np.int64), kind="stable")
    us = np.asarray(stamps_us, dtype=np.int64)[order]
    iat = np.diff(us) / 1_000_000
    ts = us[1:] / 1_000_000
    lab = None
    if labels is not None:
        lab = np.asarray(labels, dtype=bool)[order][1:]
    return FeatureSeries(conversation, iat, ts, 1, lab)


def extract_features(records: Iterable[PacketRecord], merge: bool = False,
                     labels: Optional[Sequence[str]] = None
                     ) -> dict[Optional[Conversation], FeatureSeries]:
    """Group records by conversation and difference consecutive arrival times.

    Both directions of a conversation are interleaved before differencing.
    Differences are taken on integer microseconds, so a zero-jitter capture
    gives exactly equal gaps. With ``merge=True`` all records form a single
    series keyed by ``None``.

    ``labels`` (``"attack"``/``"normal"`` per record) become per-sample flags.
    """
    stamps: dict[Optional[Conversation], list[int]] = {}
    flags: dict[Optional[Conversation], list[bool]] = {}
    keys: dict[tuple, Conversation] = {}
    for i, record in enumerate(records):
        if merge:
            conv = None
        else:
            pair = (record.src, record.dst)
            conv = keys.get(pair)
            if conv is None:
                conv = keys[pair] = Conversation.of(record)
        stamps.setdefault(conv, []).append(to_microseconds(record.timestamp))
        if labels is not None:
            flags.setdefault(conv, []).append(labels[i] == ATTACK)
    return {
        conv: _series_from(conv, us, flags.get(conv) if labels is not None else None)
        for conv, us in stamps.items()
        if len(us) >= 2
    }


def select_series(series_map: dict, conversation: Optional[Conversation] = None) -> FeatureSeries:
    """Pick one series: the requested conversation, or the longest one."""
    if not series_map:
        raise ValueError("no conversation has two or more packets")
    if conversation is not None:
        try:
            return series_map[conversation]
        except KeyError:
            raise ValueError(f"conversation {conversation} not found") from None
    return max(series_map.values(), key=len)


def split_series(series: FeatureSeries, train_fraction: float = 2 / 3
                 ) -> tuple[FeatureSeries, FeatureSeries]:
    """Temporal split: the first ``floor(fraction * n)`` samples train, the rest test."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(series)
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    cut = int(np.floor(train_fraction * n + 1e-12))
    return series.slice(0, cut), series.slice(cut, n)


def write_series_csv(series: FeatureSeries, path) -> int:
    """Two-column export (index, iat_seconds) for external plotting."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "iat_seconds"])
        for idx, value in zip(series.indices, series.iat):
            writer.writerow([int(idx), repr(float(value))])
    return len(series)
