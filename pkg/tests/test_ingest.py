import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MASTER, SLAVE, i_frame, s_frame, u_frame
from iec104lof.ingest import (ApciStream, Conversation, CsvFormatError, PacketRecord,
                              ParseStats, PcapFormatError, REORDER_LIMIT, parse_csv,
                              parse_pcap, read_labeled_csv, split_apci, write_csv, write_pcap)
from iec104lof.injector import generate_normal


def records_of(path, **kw):
    stats = ParseStats()
    return list(parse_pcap(path, stats=stats, **kw)), stats


class TestPcap:
    def test_single_s_frame(self, pcap_path):
        path = pcap_path([(1.5, MASTER, SLAVE, 100, bytes.fromhex("680401000200"))])
        recs, stats = records_of(path)
        assert len(recs) == 1
        r = recs[0]
        assert (r.apci_type, r.asdu_type_id, r.asdu_length) == ("S", None, 0)
        assert r.timestamp == 1.5
        assert (r.src, r.dst) == (MASTER, SLAVE)
        assert stats.warning_count == 0

    def test_two_i_frames_in_one_segment_share_timestamp(self, pcap_path):
        payload = i_frame(13, 13, 0) + i_frame(36, 20, 1)
        recs, _ = records_of(pcap_path([(7.25, SLAVE, MASTER, 1, payload)]))
        assert [r.asdu_type_id for r in recs] == [13, 36]
        assert [r.asdu_length for r in recs] == [14, 21]
        assert recs[0].timestamp == recs[1].timestamp == 7.25

    def test_u_frame(self, pcap_path):
        recs, _ = records_of(pcap_path([(1.0, MASTER, SLAVE, 1, u_frame(0x07))]))
        assert recs[0].apci_type == "U"

    def test_apdu_split_across_segments(self, pcap_path):
        frame = i_frame(13, 30)
        segs = [(1.0, SLAVE, MASTER, 500, frame[:10]),
                (1.2, SLAVE, MASTER, 510, frame[10:] + s_frame())]
        recs, stats = records_of(pcap_path(segs))
        assert [r.apci_type for r in recs] == ["I", "S"]
        assert recs[0].timestamp == 1.2  # stamped when the unit completes
        assert stats.parse_errors == 0

    def test_retransmission_is_deduplicated(self, pcap_path):
        segs = [(1.0, MASTER, SLAVE, 10, s_frame()),
                (1.1, MASTER, SLAVE, 10, s_frame()),
                (2.0, MASTER, SLAVE, 16, s_frame(2))]
        recs, stats = records_of(pcap_path(segs))
        assert len(recs) == 2
        assert stats.retransmissions == 1

    def test_partial_overlap_is_trimmed(self, pcap_path):
        a, b = i_frame(13, 10), i_frame(13, 10, 1)
        data = a + b
        segs = [(1.0, MASTER, SLAVE, 0, data[:20]),
                (1.1, MASTER, SLAVE, 10, data[10:])]
        recs, _ = records_of(pcap_path(segs))
        assert len(recs) == 2

    def test_out_of_order_segment_reassembled(self, pcap_path):
        frames = [i_frame(13, 5, n) for n in range(3)]
        size = len(frames[0])
        segs = [(1.0, MASTER, SLAVE, 0, frames[0]),
                (1.1, MASTER, SLAVE, 2 * size, frames[2]),
                (1.2, MASTER, SLAVE, size, frames[1])]
        recs, stats = records_of(pcap_path(segs))
        assert len(recs) == 3
        assert stats.stream_gaps == 0
        assert [r.timestamp for r in recs] == [1.0, 1.2, 1.2]

    def test_reorder_buffer_overflow_skips_gap(self, pcap_path):
        size = len(s_frame())
        segs = [(1.0, MASTER, SLAVE, 0, s_frame())]
        # segment 1 is lost; the rest arrive
        segs += [(1.0 + i, MASTER, SLAVE, i * size, s_frame()) for i in range(2, REORDER_LIMIT + 4)]
        recs, stats = records_of(pcap_path(segs))
        assert stats.stream_gaps == 1
        assert stats.reorder_dropped == 1
        assert len(recs) == 1 + (REORDER_LIMIT + 2)

    def test_syn_sets_initial_sequence(self, pcap_path):
        segs = [(0.5, MASTER, SLAVE, 999, b"", 0x02),
                (1.0, MASTER, SLAVE, 1000, u_frame())]
        recs, _ = records_of(pcap_path(segs))
        assert len(recs) == 1

    def test_sequence_wraparound(self, pcap_path):
        seq = (1 << 32) - 3
        frame = s_frame()
        segs = [(1.0, MASTER, SLAVE, seq, frame),
                (2.0, MASTER, SLAVE, (seq + len(frame)) % (1 << 32), frame)]
        recs, _ = records_of(pcap_path(segs))
        assert len(recs) == 2

    def test_garbage_resynchronises(self, pcap_path):
        payload = b"\x00\x11" + s_frame() + b"\x68\x02\x00\x00" + i_frame()
        recs, stats = records_of(pcap_path([(1.0, MASTER, SLAVE, 0, payload)]))
        assert [r.apci_type for r in recs] == ["S", "I"]
        assert stats.parse_errors == 2

    def test_other_ports_ignored_and_port_override(self, pcap_path):
        segs = [(1.0, ("10.0.0.1", 40000), ("10.0.0.9", 502), 0, s_frame()),
                (2.0, MASTER, SLAVE, 0, s_frame())]
        path = pcap_path(segs)
        assert len(records_of(path)[0]) == 1
        assert len(records_of(path, port=502)[0]) == 1

    def test_nanosecond_capture_truncates_to_microseconds(self, tmp_path):
        path = tmp_path / "ns.pcap"
        frame_bytes = _frame_bytes(s_frame())
        with path.open("wb") as fh:
            fh.write(struct.pack("<IHHiIII", 0xA1B23C4D, 2, 4, 0, 0, 65535, 1))
            fh.write(struct.pack("<IIII", 100, 123456789, len(frame_bytes), len(frame_bytes)))
            fh.write(frame_bytes)
        recs, _ = records_of(path)
        assert recs[0].timestamp == 100.123456

    def test_big_endian_capture(self, tmp_path):
        path = tmp_path / "be.pcap"
        frame_bytes = _frame_bytes(s_frame())
        with path.open("wb") as fh:
            fh.write(struct.pack(">IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1))
            fh.write(struct.pack(">IIII", 5, 250000, len(frame_bytes), len(frame_bytes)))
            fh.write(frame_bytes)
        recs, _ = records_of(path)
        assert recs[0].timestamp == 5.25

    def test_vlan_tagged_frame(self, tmp_path):
        path = tmp_path / "vlan.pcap"
        plain = _frame_bytes(s_frame())
        tagged = plain[:12] + b"\x81\x00\x00\x05" + plain[12:]
        with path.open("wb") as fh:
            fh.write(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1))
            fh.write(struct.pack("<IIII", 1, 0, len(tagged), len(tagged)))
            fh.write(tagged)
        assert len(records_of(path)[0]) == 1

    def test_truncated_packet_counted(self, pcap_path):
        path = pcap_path([(1.0, MASTER, SLAVE, 0, s_frame()), (2.0, MASTER, SLAVE, 6, s_frame())])
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        recs, stats = records_of(path)
        assert len(recs) == 1
        assert stats.truncated == 1

    def test_snaplen_cut_frame_skipped(self, tmp_path):
        path = tmp_path / "snap.pcap"
        frame_bytes = _frame_bytes(i_frame())[:40]
        with path.open("wb") as fh:
            fh.write(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 40, 1))
            fh.write(struct.pack("<IIII", 1, 0, len(frame_bytes), 80))
            fh.write(frame_bytes)
        recs, stats = records_of(path)
        assert recs == []
        assert stats.truncated == 1

    @pytest.mark.parametrize("header", [b"", b"\x00" * 24, b"\x0a\x0d\x0d\x0a" + b"\x00" * 20])
    def test_bad_header_is_fatal(self, tmp_path, header):
        path = tmp_path / "bad.pcap"
        path.write_bytes(header)
        with pytest.raises(PcapFormatError):
            records_of(path)

    def test_non_ethernet_linktype_is_fatal(self, tmp_path):
        path = tmp_path / "raw.pcap"
        path.write_bytes(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 101))
        with pytest.raises(PcapFormatError):
            records_of(path)


def _frame_bytes(payload):
    from iec104lof.ingest import _ethernet_frame
    return _ethernet_frame(MASTER[0], SLAVE[0], MASTER[1], SLAVE[1], 0, payload)


class TestCsv:
    def test_header_only(self, tmp_path):
        path = tmp_path / "empty.csv"
        assert write_csv([], path) == 0
        assert path.read_text() == ("timestamp,src_addr,dst_addr,src_port,dst_port,"
                                    "apci_type,asdu_type_id,asdu_length\n")
        stats = ParseStats()
        assert list(parse_csv(path, stats)) == []
        assert stats.warning_count == 0

    def test_three_records_round_trip(self, tmp_path):
        recs = generate_normal(count=3)
        path = tmp_path / "three.csv"
        assert write_csv(recs, path) == 3
        assert list(parse_csv(path)) == recs

    def test_thousand_record_fixture(self, tmp_path):
        recs = generate_normal(period=0.5, jitter_fraction=0.1, count=1000, seed=3)
        assert write_csv(recs, tmp_path / "k.csv") == 1000

    def test_i_frame_without_type_is_skipped(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("timestamp,src_addr,dst_addr,src_port,dst_port,apci_type,asdu_type_id,asdu_length\n"
                        "1.0,10.0.0.1,10.0.0.2,50000,2404,I,,10\n"
                        "2.0,10.0.0.1,10.0.0.2,50000,2404,S,,0\n")
        stats = ParseStats()
        recs = list(parse_csv(path, stats))
        assert [r.apci_type for r in recs] == ["S"]
        assert stats.skipped_rows == 1

    def test_missing_column_is_fatal(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("timestamp,src_addr,dst_addr,src_port,dst_port,apci_type,asdu_length\n")
        with pytest.raises(CsvFormatError, match="asdu_type_id"):
            list(parse_csv(path))

    def test_large_timestamp_regression_is_fatal(self, tmp_path):
        recs = generate_normal(count=4)
        path = tmp_path / "r.csv"
        write_csv([recs[0], recs[3], recs[1]], path)
        with pytest.raises(CsvFormatError, match="goes back"):
            list(parse_csv(path))

    def test_small_regression_is_a_warning(self, tmp_path):
        a = PacketRecord(10.5, "10.0.0.1", "10.0.0.2", 1, 2404, "S", None, 0)
        b = PacketRecord(10.0, "10.0.0.1", "10.0.0.2", 1, 2404, "S", None, 0)
        path = tmp_path / "r.csv"
        write_csv([a, b], path)
        stats = ParseStats()
        assert len(list(parse_csv(path, stats))) == 2
        assert stats.timestamp_regressions == 1

    def test_labels_round_trip(self, tmp_path):
        recs = generate_normal(count=4)
        labels = ["normal", "attack", "normal", "normal"]
        path = tmp_path / "l.csv"
        write_csv(recs, path, labels=labels)
        got, got_labels = read_labeled_csv(path)
        assert got == recs and got_labels == labels
        assert list(parse_csv(path)) == recs

    def test_unlabelled_file_gives_no_labels(self, tmp_path):
        path = tmp_path / "u.csv"
        write_csv(generate_normal(count=3), path)
        assert read_labeled_csv(path)[1] is None

    def test_unwritable_path(self, tmp_path):
        from iec104lof.ingest import IngestError
        with pytest.raises(IngestError):
            write_csv(generate_normal(count=3), tmp_path / "missing" / "x.csv")


class TestRecordTypes:
    def test_conversation_is_symmetric(self):
        a, b = ("10.0.0.9", 2404), ("10.0.0.10", 5000)
        assert Conversation.between(a, b) == Conversation.between(b, a)
        # numeric, not string, address order
        assert Conversation.between(a, b).endpoint_a == a

    @pytest.mark.parametrize("kwargs", [
        dict(apci_type="I", asdu_type_id=None, asdu_length=5),
        dict(apci_type="S", asdu_type_id=3, asdu_length=0),
        dict(apci_type="U", asdu_type_id=None, asdu_length=4),
        dict(apci_type="X", asdu_type_id=None, asdu_length=0),
    ])
    def test_record_invariants(self, kwargs):
        with pytest.raises(ValueError):
            PacketRecord(1.0, "10.0.0.1", "10.0.0.2", 1, 2, **kwargs)

    def test_negative_timestamp_rejected(self):
        with pytest.raises(ValueError):
            PacketRecord(-1.0, "10.0.0.1", "10.0.0.2", 1, 2, "S", None, 0)


apdus = st.one_of(
    st.builds(i_frame, st.integers(0, 255), st.integers(0, 200), st.integers(0, 100)),
    st.builds(s_frame, st.integers(0, 1000)),
    st.sampled_from([u_frame(c) for c in (0x07, 0x0B, 0x13, 0x23, 0x43, 0x83)]),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(apdus, min_size=1, max_size=15), st.data())
def test_apci_split_is_boundary_invariant(frames, data):
    stream = b"".join(frames)
    cuts = sorted(data.draw(st.sets(st.integers(1, len(stream) - 1), max_size=12))) if len(stream) > 1 else []
    pieces = [stream[a:b] for a, b in zip([0] + cuts, cuts + [len(stream)])]
    parser = ApciStream()
    units = []
    for piece in pieces:
        units.extend(u for _, u in parser.feed(piece, 0.0))
    assert units == split_apci(stream)
    assert len(units) == len(frames)
    assert parser.stats.parse_errors == 0


record_strategy = st.builds(
    lambda us, src, dst, sp, dp, kind, tid, length: PacketRecord(
        us / 1_000_000, src, dst, sp, dp, kind,
        tid if kind == "I" else None, length if kind == "I" else 0),
    st.integers(0, 2_000_000_000 * 10**6),
    st.ip_addresses(v=4).map(str), st.ip_addresses(v=4).map(str),
    st.integers(0, 65535), st.integers(0, 65535),
    st.sampled_from("ISU"), st.integers(0, 255), st.integers(0, 249),
)


@settings(max_examples=100, deadline=None)
@given(st.lists(record_strategy, max_size=20))
def test_csv_round_trip_property(tmp_path_factory, recs):
    recs = sorted(recs, key=lambda r: r.timestamp)
    path = tmp_path_factory.mktemp("rt") / "r.csv"
    assert write_csv(recs, path) == len(recs)
    assert list(parse_csv(path)) == recs


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.floats(0.0, 0.5), st.integers(0, 10**6), st.booleans())
def test_pcap_csv_round_trip_property(tmp_path_factory, count, jitter, seed, nanos):
    recs = generate_normal(period=0.2, jitter_fraction=jitter, count=count, seed=seed)
    d = tmp_path_factory.mktemp("pc")
    write_pcap(recs, d / "g.pcap", nanoseconds=nanos)
    parsed = list(parse_pcap(d / "g.pcap"))
    write_csv(parsed, d / "g.csv")
    assert list(parse_csv(d / "g.csv")) == parsed == recs
