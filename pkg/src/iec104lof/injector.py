"""Synthetic IEC 104 traffic and labelled attack emulation.

:func:`generate_normal` produces a periodic master/slave exchange and
:func:`inject` perturbs a record stream according to an
:class:`AttackScenario`, returning a label (``"normal"``/``"attack"``) for
every output record. These are emulations shaped to stress the
inter-arrival-time feature, not protocol-faithful attack reproductions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .features import ATTACK, NORMAL
from .ingest import IEC104_PORT, PacketRecord, to_microseconds

logger = logging.getLogger(__name__)

MASTER = ("192.168.10.1", 49152)
SLAVE = ("192.168.10.20", IEC104_PORT)
DEFAULT_START = 1_544_400_000.0  # 2018-12-10

# (type id, ASDU length) per direction of the normal poll/response cycle
_POLL = (100, 10)       # C_IC_NA_1 interrogation
_RESPONSE = (13, 14)    # M_ME_NC_1 short float measurement
_FLOOD = (100, 10)
_INJECTED = (45, 10)    # C_SC_NA_1 single command

KINDS = ("flood", "delay", "injection", "outage")


def _record(us: int, src, dst, asdu) -> PacketRecord:
    type_id, length = asdu
    return PacketRecord(us / 1_000_000, src[0], dst[0], src[1], dst[1], "I", type_id, length)


def generate_normal(period: float = 1.0, jitter_fraction: float = 0.0, count: int = 1000,
                    seed: int = 0, start: float = DEFAULT_START,
                    master=MASTER, slave=SLAVE) -> list[PacketRecord]:
    """Periodic traffic alternating master->slave and slave->master.

    Gaps are ``period * (1 + u)`` with ``u ~ U(-jitter_fraction, jitter_fraction)``,
    rounded to whole microseconds.
    """
    if not period > 0:
        raise ValueError("period must be positive")
    if not 0 <= jitter_fraction < 1:
        raise ValueError("jitter_fraction must lie in [0, 1)")
    if count < 2:
        raise ValueError("count must be at least 2")
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-jitter_fraction, jitter_fraction, count - 1) if jitter_fraction else np.zeros(count - 1)
    gaps_us = np.round(period * 1_000_000 * (1 + jitter)).astype(np.int64)
    stamps = to_microseconds(start) + np.concatenate([[0], np.cumsum(gaps_us)])
    out = []
    for i, us in enumerate(stamps.tolist()):
        if i % 2 == 0:
            out.append(_record(us, master, slave, _POLL))
        else:
            out.append(_record(us, slave, master, _RESPONSE))
    return out


@dataclass(frozen=True)
class AttackScenario:
    """One emulated attack.

    ``start`` and ``duration`` are record indices/counts in the input stream.
    ``magnitude`` means, per kind: flood, extra records per normal interval;
    delay, seconds added to each affected gap; injection, offset in seconds
    of the foreign record after its predecessor; outage, silence in seconds.
    """

    kind: str
    start: int
    duration: int
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        if self.duration < 1:
            raise ValueError("duration must be >= 1")
        if not self.magnitude > 0:
            raise ValueError("magnitude must be > 0")
        if self.start < 1:
            raise ValueError("start must be >= 1 (the first record has no predecessor)")

    def check_bounds(self, n_records: int):
        last = self.start + self.duration
        # flood/injection use intervals start..last-1, which need record `last`;
        # outage needs a survivor after the removed block
        need = last if self.kind in ("flood", "injection", "outage") else last - 1
        if need >= n_records:
            raise ValueError(
                f"{self.kind} scenario [{self.start}, {last}) does not fit in {n_records} records")


def inject(records: Sequence[PacketRecord], scenario: AttackScenario,
           labels: Optional[Sequence[str]] = None) -> tuple[list[PacketRecord], list[str]]:
    """Apply ``scenario`` and return the new stream with per-record labels.

    Existing ``labels`` are carried through, so scenarios can be stacked.
    Timestamps stay non-decreasing.
    """
    records = list(records)
    labels = list(labels) if labels is not None else [NORMAL] * len(records)
    if len(labels) != len(records):
        raise ValueError("labels must align with records")
    scenario.check_bounds(len(records))
    us = [to_microseconds(r.timestamp) for r in records]
    apply = {
        "flood": _flood,
        "delay": _delay,
        "injection": _injection,
        "outage": _outage,
    }[scenario.kind]
    out, out_labels = apply(records, us, labels, scenario)
    logger.debug("%s: %d -> %d records", scenario.kind, len(records), len(out))
    return out, out_labels


def _shifted(record: PacketRecord, us: int) -> PacketRecord:
    return PacketRecord(us / 1_000_000, record.src_addr, record.dst_addr, record.src_port,
                        record.dst_port, record.apci_type, record.asdu_type_id, record.asdu_length)


def _like(record: PacketRecord, us: int, asdu) -> PacketRecord:
    return _record(us, record.src, record.dst, asdu)


def _flood(records, us, labels, sc):
    rng = np.random.default_rng(sc.seed)
    extra = max(1, int(round(sc.magnitude)))
    out, out_labels = [], []
    for i, record in enumerate(records):
        out.append(record)
        out_labels.append(labels[i])
        if sc.start <= i < sc.start + sc.duration:
            lo, hi = us[i], us[i + 1]
            offsets = np.sort(rng.integers(lo, hi, size=extra, endpoint=True))
            for t in offsets.tolist():
                out.append(_like(record, t, _FLOOD))
                out_labels.append(ATTACK)
    return out, out_labels


def _injection(records, us, labels, sc):
    offset = to_microseconds(sc.magnitude)
    out, out_labels = [], []
    for i, record in enumerate(records):
        out.append(record)
        out_labels.append(labels[i])
        if sc.start <= i < sc.start + sc.duration:
            t = min(us[i] + offset, us[i + 1])
            out.append(_like(record, t, _INJECTED))
            out_labels.append(ATTACK)
    return out, out_labels


def _delay(records, us, labels, sc):
    step = to_microseconds(sc.magnitude)
    end = sc.start + sc.duration
    out, out_labels = [], []
    for i, record in enumerate(records):
        if i < sc.start:
            out.append(record)
            out_labels.append(labels[i])
        elif i < end:
            out.append(_shifted(record, us[i] + step * (i - sc.start + 1)))
            out_labels.append(ATTACK)
        else:
            out.append(_shifted(record, us[i] + step * sc.duration))
            out_labels.append(labels[i])
    return out, out_labels


def _outage(records, us, labels, sc):
    end = sc.start + sc.duration
    shift = us[sc.start - 1] + to_microseconds(sc.magnitude) - us[end]
    out = list(records[:sc.start])
    out_labels = list(labels[:sc.start])
    for i in range(end, len(records)):
        out.append(_shifted(records[i], us[i] + shift))
        out_labels.append(ATTACK if i == end else labels[i])
    return out, out_labels


def _coerce(raw: dict) -> AttackScenario:
    return AttackScenario(
        kind=str(raw["kind"]).strip(),
        start=int(raw["start"]),
        duration=int(raw["duration"]),
        magnitude=float(raw["magnitude"]),
        seed=int(raw.get("seed", 0)),
    )


def load_scenarios(path) -> list[AttackScenario]:
    """Read scenarios from JSON (object or list) or key=value blocks.

    In the key=value form, scenarios are separated by blank lines and ``#``
    starts a comment.
    """
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith(("{", "[")):
        data = json.loads(text)
        items = data if isinstance(data, list) else [data]
        return [_coerce(item) for item in items]
    scenarios, block = [], {}
    for line in text.splitlines() + [""]:
        line = line.split("#", 1)[0].strip()
        if not line:
            if block:
                scenarios.append(_coerce(block))
                block = {}
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: expected key=value, got {line!r}")
        block[key.strip()] = value.strip()
    return scenarios


def scenario_dict(scenario: AttackScenario) -> dict:
    return asdict(scenario)
