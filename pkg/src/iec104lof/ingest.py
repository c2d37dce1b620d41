"""Reading and writing IEC 60870-5-104 packet records.

One :class:`PacketRecord` is emitted per APCI unit (APDU) seen on the wire,
not per TCP segment. PCAP input goes through a small per-direction TCP
reassembler so APDUs split across segments are recovered; CSV input is the
flat dialect produced by :func:`write_csv`.
"""

from __future__ import annotations

import csv
import ipaddress
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Optional, Sequence

logger = logging.getLogger(__name__)

IEC104_PORT = 2404
START_BYTE = 0x68
APCI_LENGTH = 6
MAX_APDU_LENGTH = 253
REORDER_LIMIT = 64
TIMESTAMP_REGRESSION_LIMIT = 1.0

CSV_COLUMNS = (
    "timestamp",
    "src_addr",
    "dst_addr",
    "src_port",
    "dst_port",
    "apci_type",
    "asdu_type_id",
    "asdu_length",
)
LABEL_COLUMN = "label"

_PCAP_MAGIC = {
    b"\xd4\xc3\xb2\xa1": ("<", False),
    b"\xa1\xb2\xc3\xd4": (">", False),
    b"\x4d\x3c\xb2\xa1": ("<", True),
    b"\xa1\xb2\x3c\x4d": (">", True),
}
LINKTYPE_ETHERNET = 1
_ETH_IPV4 = 0x0800
_ETH_VLAN = (0x8100, 0x88A8)
_SEQ_MOD = 1 << 32


class IngestError(Exception):
    """Fatal problem with an input or output file."""


class PcapFormatError(IngestError):
    pass


class CsvFormatError(IngestError):
    pass


def quantize_timestamp(seconds: float) -> float:
    """Snap a timestamp to microsecond resolution (nearest double of the decimal)."""
    return round(seconds * 1_000_000) / 1_000_000


def to_microseconds(seconds: float) -> int:
    return round(seconds * 1_000_000)


@dataclass(frozen=True, slots=True)
class PacketRecord:
    """One captured APDU.

    ``asdu_type_id`` is ``None`` for S and U frames, whose ``asdu_length``
    is always 0.
    """

    timestamp: float
    src_addr: str
    dst_addr: str
    src_port: int
    dst_port: int
    apci_type: str
    asdu_type_id: Optional[int]
    asdu_length: int

    def __post_init__(self):
        if not self.timestamp >= 0:
            raise ValueError(f"timestamp must be non-negative, got {self.timestamp!r}")
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 0xFFFF:
                raise ValueError(f"port out of range: {port}")
        if self.apci_type not in ("I", "S", "U"):
            raise ValueError(f"apci_type must be I, S or U, got {self.apci_type!r}")
        if self.apci_type == "I":
            if self.asdu_type_id is None:
                raise ValueError("I-frame record requires asdu_type_id")
            if not 0 <= self.asdu_type_id <= 255:
                raise ValueError(f"asdu_type_id out of range: {self.asdu_type_id}")
            if self.asdu_length < 0:
                raise ValueError("asdu_length must be >= 0")
        elif self.asdu_type_id is not None or self.asdu_length != 0:
            raise ValueError(f"{self.apci_type}-frame record cannot carry an ASDU")

    @property
    def src(self) -> tuple[str, int]:
        return (self.src_addr, self.src_port)

    @property
    def dst(self) -> tuple[str, int]:
        return (self.dst_addr, self.dst_port)


def _endpoint_key(endpoint: tuple[str, int]):
    return (int(ipaddress.IPv4Address(endpoint[0])), endpoint[1])


@dataclass(frozen=True, slots=True)
class Conversation:
    """Unordered (addr, port) pair; ``endpoint_a`` sorts before ``endpoint_b``."""

    endpoint_a: tuple[str, int]
    endpoint_b: tuple[str, int]

    @classmethod
    def between(cls, a: tuple[str, int], b: tuple[str, int]) -> "Conversation":
        if _endpoint_key(b) < _endpoint_key(a):
            a, b = b, a
        return cls(tuple(a), tuple(b))

    @classmethod
    def of(cls, record: PacketRecord) -> "Conversation":
        return cls.between(record.src, record.dst)

    def __str__(self):
        (a_addr, a_port), (b_addr, b_port) = self.endpoint_a, self.endpoint_b
        return f"{a_addr}:{a_port}<->{b_addr}:{b_port}"


@dataclass
class ParseStats:
    """Counters filled in while a file is being parsed."""

    frames: int = 0
    segments: int = 0
    records: int = 0
    truncated: int = 0
    parse_errors: int = 0
    retransmissions: int = 0
    reorder_dropped: int = 0
    stream_gaps: int = 0
    skipped_rows: int = 0
    timestamp_regressions: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def warning_count(self) -> int:
        return (self.truncated + self.parse_errors + self.reorder_dropped
                + self.stream_gaps + self.skipped_rows + self.timestamp_regressions)

    def warn(self, message: str, limit: int = 20):
        if len(self.warnings) < limit:
            self.warnings.append(message)
        logger.debug(message)


# ---------------------------------------------------------------------------
# APCI framing
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class ApciUnit:
    apci_type: str
    asdu_type_id: Optional[int]
    asdu_length: int


def classify_control(first_octet: int) -> str:
    if first_octet & 0x01 == 0:
        return "I"
    if first_octet & 0x03 == 0x01:
        return "S"
    return "U"


class ApciStream:
    """Splits a byte stream from one TCP direction into APCI units.

    Bytes may arrive in arbitrary chunks; a unit is emitted once all of its
    bytes are present, stamped with the time of the chunk that completed it.
    Garbage or an implausible length field drops bytes up to the next 0x68
    and counts one parse error.
    """

    def __init__(self, stats: Optional[ParseStats] = None):
        self.buffer = bytearray()
        self.stats = stats if stats is not None else ParseStats()

    def reset(self):
        self.buffer.clear()

    def feed(self, data: bytes, timestamp: float) -> list[tuple[float, ApciUnit]]:
        self.buffer += data
        units = []
        buf = self.buffer
        while buf:
            if buf[0] != START_BYTE:
                self._resync()
                continue
            if len(buf) < 2:
                break
            length = buf[1]
            if length < 4 or length > MAX_APDU_LENGTH:
                self._resync()
                continue
            total = length + 2
            if len(buf) < APCI_LENGTH:
                break
            kind = classify_control(buf[2])
            if (kind == "I" and length < 5) or (kind != "I" and length != 4):
                self._resync()
                continue
            if len(buf) < total:
                break
            if kind == "I":
                unit = ApciUnit("I", buf[APCI_LENGTH], total - APCI_LENGTH)
            else:
                unit = ApciUnit(kind, None, 0)
            del buf[:total]
            units.append((timestamp, unit))
        return units

    def _resync(self):
        nxt = self.buffer.find(START_BYTE, 1)
        dropped = len(self.buffer) if nxt < 0 else nxt
        del self.buffer[:dropped]
        self.stats.parse_errors += 1
        self.stats.warn(f"APCI framing error: resynchronised after dropping {dropped} bytes")


def split_apci(data: bytes) -> list[ApciUnit]:
    """Parse a complete byte string into APCI units (framing errors are skipped)."""
    return [unit for _, unit in ApciStream().feed(data, 0.0)]


class _DirectionStream:
    """In-order reassembly for one TCP direction with a bounded reorder buffer."""

    def __init__(self, stats: ParseStats):
        self.stats = stats
        self.next_seq: Optional[int] = None
        self.pending: dict[int, bytes] = {}
        self.apci = ApciStream(stats)

    def push(self, seq: int, payload: bytes, syn: bool, timestamp: float):
        if syn:
            self.next_seq = (seq + 1) % _SEQ_MOD
            self.pending.clear()
            self.apci.reset()
            seq = self.next_seq
        if not payload:
            return []
        if self.next_seq is None:
            self.next_seq = seq
        offset = (seq - self.next_seq) % _SEQ_MOD
        if offset >= _SEQ_MOD // 2:
            # starts before the expected byte: drop the already-consumed part
            behind = _SEQ_MOD - offset
            if behind >= len(payload):
                self.stats.retransmissions += 1
                return []
            payload = payload[behind:]
            seq = self.next_seq
            offset = 0
        if offset > 0:
            if seq in self.pending and len(self.pending[seq]) >= len(payload):
                self.stats.retransmissions += 1
                return []
            self.pending[seq] = payload
            if len(self.pending) > REORDER_LIMIT:
                return self._skip_gap(timestamp)
            return []
        out = self._consume(payload, timestamp)
        out.extend(self._drain(timestamp))
        return out

    def _consume(self, payload: bytes, timestamp: float):
        self.next_seq = (self.next_seq + len(payload)) % _SEQ_MOD
        return self.apci.feed(payload, timestamp)

    def _drain(self, timestamp: float):
        # held-back bytes become usable only now, so they take the current time
        out = []
        while self.pending:
            hit = None
            for seq in self.pending:
                offset = (seq - self.next_seq) % _SEQ_MOD
                if offset == 0 or offset >= _SEQ_MOD // 2:
                    hit = seq
                    break
            if hit is None:
                break
            payload = self.pending.pop(hit)
            behind = (self.next_seq - hit) % _SEQ_MOD
            if behind >= len(payload):
                self.stats.retransmissions += 1
                continue
            out.extend(self._consume(payload[behind:], timestamp))
        return out

    def _skip_gap(self, timestamp: float):
        # missing bytes never arrived: abandon the partial APDU and jump ahead
        earliest = min(self.pending, key=lambda s: (s - self.next_seq) % _SEQ_MOD)
        self.stats.stream_gaps += 1
        self.stats.reorder_dropped += 1
        self.stats.warn(f"TCP gap of {(earliest - self.next_seq) % _SEQ_MOD} bytes; "
                        "reorder buffer full, skipping ahead")
        self.apci.reset()
        self.next_seq = earliest
        return self._drain(timestamp)


# ---------------------------------------------------------------------------
# PCAP
# ---------------------------------------------------------------------------

def _read_exact(fh: IO[bytes], n: int) -> bytes:
    data = fh.read(n)
    return data if data is not None else b""


def _parse_frame(frame: bytes):
    """Return (src, dst, sport, dport, seq, syn, payload) for IPv4/TCP frames, else None.

    Raises ``ValueError`` when the frame is cut short.
    """
    if len(frame) < 14:
        raise ValueError("ethernet header")
    offset = 12
    ethertype = struct.unpack_from(">H", frame, offset)[0]
    offset += 2
    while ethertype in _ETH_VLAN:
        if len(frame) < offset + 4:
            raise ValueError("vlan tag")
        ethertype = struct.unpack_from(">H", frame, offset + 2)[0]
        offset += 4
    if ethertype != _ETH_IPV4:
        return None
    if len(frame) < offset + 20:
        raise ValueError("ipv4 header")
    ver_ihl = frame[offset]
    if ver_ihl >> 4 != 4:
        return None
    ihl = (ver_ihl & 0x0F) * 4
    total_length = struct.unpack_from(">H", frame, offset + 2)[0]
    flags_frag = struct.unpack_from(">H", frame, offset + 6)[0]
    proto = frame[offset + 9]
    if proto != 6 or flags_frag & 0x3FFF:
        return None
    src = str(ipaddress.IPv4Address(frame[offset + 12:offset + 16]))
    dst = str(ipaddress.IPv4Address(frame[offset + 16:offset + 20]))
    ip_end = offset + total_length
    if ip_end > len(frame) or ihl < 20:
        raise ValueError("ipv4 payload")
    tcp = offset + ihl
    if ip_end < tcp + 20:
        raise ValueError("tcp header")
    sport, dport, seq = struct.unpack_from(">HHI", frame, tcp)
    data_offset = (frame[tcp + 12] >> 4) * 4
    flags = frame[tcp + 13]
    if ip_end < tcp + data_offset:
        raise ValueError("tcp options")
    payload = bytes(frame[tcp + data_offset:ip_end])
    return src, dst, sport, dport, seq, bool(flags & 0x02), payload


def read_pcap_frames(path, stats: Optional[ParseStats] = None) -> Iterator[tuple[float, bytes]]:
    """Yield (timestamp, frame bytes) from a classic PCAP file.

    Timestamps are truncated to microseconds.
    """
    stats = stats if stats is not None else ParseStats()
    path = Path(path)
    with path.open("rb") as fh:
        header = _read_exact(fh, 24)
        if len(header) < 24 or header[:4] not in _PCAP_MAGIC:
            raise PcapFormatError(f"{path}: not a classic PCAP file")
        endian, nanos = _PCAP_MAGIC[header[:4]]
        linktype = struct.unpack(endian + "I", header[20:24])[0] & 0x0FFFFFFF
        if linktype != LINKTYPE_ETHERNET:
            raise PcapFormatError(f"{path}: unsupported link type {linktype}")
        rec_fmt = endian + "IIII"
        while True:
            rec = _read_exact(fh, 16)
            if not rec:
                return
            if len(rec) < 16:
                stats.truncated += 1
                stats.warn(f"{path}: truncated record header at end of file")
                return
            ts_sec, ts_frac, incl_len, orig_len = struct.unpack(rec_fmt, rec)
            frame = _read_exact(fh, incl_len)
            if len(frame) < incl_len:
                stats.truncated += 1
                stats.warn(f"{path}: truncated packet at end of file")
                return
            stats.frames += 1
            micros = ts_frac // 1000 if nanos else ts_frac
            yield (ts_sec * 1_000_000 + micros) / 1_000_000, frame


def parse_pcap(path, port: int = IEC104_PORT,
               stats: Optional[ParseStats] = None) -> Iterator[PacketRecord]:
    """Yield one :class:`PacketRecord` per APDU carried on ``port``.

    Segments are handled in capture order. Per direction, APDUs split across
    segments are reassembled; retransmissions are discarded and up to
    ``REORDER_LIMIT`` early segments are held back waiting for the gap to fill.
    """
    stats = stats if stats is not None else ParseStats()
    streams: dict[tuple, _DirectionStream] = {}
    for timestamp, frame in read_pcap_frames(path, stats):
        try:
            parsed = _parse_frame(frame)
        except ValueError as exc:
            stats.truncated += 1
            stats.warn(f"frame {stats.frames}: truncated ({exc})")
            continue
        if parsed is None:
            continue
        src, dst, sport, dport, seq, syn, payload = parsed
        if sport != port and dport != port:
            continue
        stats.segments += 1
        key = (src, sport, dst, dport)
        stream = streams.get(key)
        if stream is None:
            stream = streams[key] = _DirectionStream(stats)
        for ts, unit in stream.push(seq, payload, syn, timestamp):
            stats.records += 1
            yield PacketRecord(ts, src, dst, sport, dport,
                               unit.apci_type, unit.asdu_type_id, unit.asdu_length)
    leftovers = sum(1 for s in streams.values() if s.apci.buffer)
    if leftovers:
        stats.truncated += leftovers
        stats.warn(f"{leftovers} stream(s) ended inside an APDU")


def build_apdu(record: PacketRecord, send_seq: int = 0, recv_seq: int = 0) -> bytes:
    """Encode a record back into APDU bytes (ASDU body is zero-filled)."""
    if record.apci_type == "I":
        if record.asdu_length < 1 or record.asdu_length > MAX_APDU_LENGTH - 4:
            raise ValueError("I-frame asdu_length must be in [1, 249]")
        control = struct.pack("<HH", (send_seq << 1) & 0xFFFE, (recv_seq << 1) & 0xFFFE)
        asdu = bytes([record.asdu_type_id]) + bytes(record.asdu_length - 1)
    elif record.apci_type == "S":
        control = struct.pack("<HH", 0x0001, (recv_seq << 1) & 0xFFFE)
        asdu = b""
    else:
        control = bytes([0x43, 0, 0, 0])  # TESTFR act
        asdu = b""
    return bytes([START_BYTE, 4 + len(asdu)]) + control + asdu


def _ethernet_frame(src: str, dst: str, sport: int, dport: int, seq: int,
                    payload: bytes, flags: int = 0x18) -> bytes:
    tcp = struct.pack(">HHIIBBHHH", sport, dport, seq, 0, 5 << 4, flags, 0xFFFF, 0, 0)
    total = 20 + len(tcp) + len(payload)
    ip = struct.pack(">BBHHHBBH4s4s", 0x45, 0, total, 0, 0x4000, 64, 6, 0,
                     ipaddress.IPv4Address(src).packed, ipaddress.IPv4Address(dst).packed)
    eth = b"\x00\x00\x00\x00\x00\x02" + b"\x00\x00\x00\x00\x00\x01" + struct.pack(">H", _ETH_IPV4)
    return eth + ip + tcp + payload


class PcapWriter:
    """Minimal classic-PCAP writer (little-endian, microsecond, Ethernet)."""

    def __init__(self, fh: IO[bytes], nanoseconds: bool = False):
        self.fh = fh
        self.nanoseconds = nanoseconds
        magic = 0xA1B23C4D if nanoseconds else 0xA1B2C3D4
        fh.write(struct.pack("<IHHiIII", magic, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))

    def write_frame(self, timestamp: float, frame: bytes):
        micros = to_microseconds(timestamp)
        sec, frac = divmod(micros, 1_000_000)
        if self.nanoseconds:
            frac *= 1000
        self.fh.write(struct.pack("<IIII", sec, frac, len(frame), len(frame)))
        self.fh.write(frame)

    def write_segment(self, timestamp: float, src: tuple[str, int], dst: tuple[str, int],
                      seq: int, payload: bytes, flags: int = 0x18):
        self.write_frame(timestamp, _ethernet_frame(src[0], dst[0], src[1], dst[1],
                                                    seq % _SEQ_MOD, payload, flags))


def write_pcap(records: Iterable[PacketRecord], path, nanoseconds: bool = False,
               isn: int = 1000) -> int:
    """Write each record as its own TCP segment. Returns the number of segments."""
    seqs: dict[tuple, int] = {}
    counters: dict[tuple, int] = {}
    count = 0
    with Path(path).open("wb") as fh:
        writer = PcapWriter(fh, nanoseconds)
        for record in records:
            key = (record.src, record.dst)
            seq = seqs.get(key, isn)
            n_sent = counters.get(key, 0)
            payload = build_apdu(record, n_sent, 0)
            writer.write_segment(record.timestamp, record.src, record.dst, seq, payload)
            seqs[key] = seq + len(payload)
            counters[key] = n_sent + (record.apci_type == "I")
            count += 1
    return count


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _format_row(record: PacketRecord) -> list[str]:
    return [
        f"{record.timestamp:.6f}",
        record.src_addr,
        record.dst_addr,
        str(record.src_port),
        str(record.dst_port),
        record.apci_type,
        "" if record.asdu_type_id is None else str(record.asdu_type_id),
        str(record.asdu_length),
    ]


def write_csv(records: Iterable[PacketRecord], path,
              labels: Optional[Sequence[str]] = None) -> int:
    """Write records in the CSV dialect read by :func:`parse_csv`.

    With ``labels`` an extra ``label`` column is appended. Returns the number
    of data rows.
    """
    path = Path(path)
    count = 0
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
            header = list(CSV_COLUMNS) + ([LABEL_COLUMN] if labels is not None else [])
            writer.writerow(header)
            for i, record in enumerate(records):
                row = _format_row(record)
                if labels is not None:
                    row.append(labels[i])
                writer.writerow(row)
                count += 1
    except OSError as exc:
        logger.warning("write to %s failed after %d rows; partial file may remain", path, count)
        raise IngestError(f"cannot write {path}: {exc}") from exc
    if labels is not None and count != len(labels):
        raise ValueError(f"{len(labels)} labels for {count} records")
    return count


def _row_to_record(row: dict) -> PacketRecord:
    type_id = row["asdu_type_id"].strip()
    return PacketRecord(
        timestamp=quantize_timestamp(float(row["timestamp"])),
        src_addr=str(ipaddress.IPv4Address(row["src_addr"].strip())),
        dst_addr=str(ipaddress.IPv4Address(row["dst_addr"].strip())),
        src_port=int(row["src_port"]),
        dst_port=int(row["dst_port"]),
        apci_type=row["apci_type"].strip(),
        asdu_type_id=int(type_id) if type_id else None,
        asdu_length=int(row["asdu_length"]),
    )


def _iter_csv(path, stats: ParseStats, with_labels: bool):
    path = Path(path)
    try:
        fh = path.open("r", newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CsvFormatError(f"{path}: missing header row")
        missing = [c for c in CSV_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise CsvFormatError(f"{path}: missing required column(s): {', '.join(missing)}")
        has_labels = LABEL_COLUMN in reader.fieldnames
        last_ts = None
        for line_no, row in enumerate(reader, start=2):
            try:
                record = _row_to_record(row)
            except (ValueError, TypeError, AttributeError) as exc:
                stats.skipped_rows += 1
                stats.warn(f"{path}:{line_no}: skipped row ({exc})")
                continue
            if last_ts is not None and record.timestamp < last_ts:
                if last_ts - record.timestamp > TIMESTAMP_REGRESSION_LIMIT:
                    raise CsvFormatError(
                        f"{path}:{line_no}: timestamp goes back "
                        f"{last_ts - record.timestamp:.6f}s; extract looks corrupt")
                stats.timestamp_regressions += 1
                stats.warn(f"{path}:{line_no}: small timestamp regression")
            last_ts = record.timestamp if last_ts is None else max(last_ts, record.timestamp)
            stats.records += 1
            if with_labels:
                yield record, (row.get(LABEL_COLUMN) or "").strip() if has_labels else None
            else:
                yield record


def parse_csv(path, stats: Optional[ParseStats] = None) -> Iterator[PacketRecord]:
    """Yield records from a CSV extract, skipping (and counting) bad rows."""
    stats = stats if stats is not None else ParseStats()
    yield from _iter_csv(path, stats, with_labels=False)


def read_labeled_csv(path, stats: Optional[ParseStats] = None
                     ) -> tuple[list[PacketRecord], Optional[list[str]]]:
    """Read a CSV that may carry a ``label`` column.

    Returns the records and their labels, or ``None`` for labels when the
    column is absent.
    """
    stats = stats if stats is not None else ParseStats()
    records, labels = [], []
    for record, label in _iter_csv(path, stats, with_labels=True):
        records.append(record)
        labels.append(label)
    if not labels or any(label is None for label in labels):
        return records, None
    return records, labels
