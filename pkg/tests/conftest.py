import struct

import pytest

from iec104lof.ingest import PcapWriter

MASTER = ("10.0.0.1", 50000)
SLAVE = ("10.0.0.2", 2404)

ACCEPTANCE_LINES = []


@pytest.fixture
def pcap_path(tmp_path):
    """Build a PCAP from (timestamp, src, dst, seq, payload[, flags]) tuples."""

    def build(segments, name="capture.pcap", nanoseconds=False):
        path = tmp_path / name
        with path.open("wb") as fh:
            writer = PcapWriter(fh, nanoseconds=nanoseconds)
            for seg in segments:
                writer.write_segment(*seg)
        return path

    return build


def s_frame(recv=1):
    return bytes([0x68, 0x04, 0x01, 0x00]) + struct.pack("<H", recv << 1)


def i_frame(type_id=13, body=13, send=0):
    asdu = bytes([type_id]) + bytes(body)
    return bytes([0x68, 4 + len(asdu)]) + struct.pack("<HH", send << 1, 0) + asdu


def u_frame(code=0x43):
    return bytes([0x68, 0x04, code, 0, 0, 0])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
