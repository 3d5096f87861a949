import io
import random
import socket
import struct
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wcps.errors import FrameError, OrderingError, PeerLost, SessionError, TimetagParseError
from wcps.io import (
    FRAME_BATCH,
    FRAME_HEARTBEAT,
    FRAME_SERVED,
    HEADER_SIZE,
    ExchangeSession,
    FrameDecoder,
    TimetagWriter,
    decode_frames,
    encode_batch,
    encode_heartbeat,
    encode_served,
    iter_timetags,
    parse_timetags,
    read_timetags,
    run_initiator,
    run_responder,
    write_timetags,
)
from wcps.peaktrack import Tracker, TrackerConfig, track
from wcps.timetag import EventStream

GOLDEN_HEADER = b"WCPT" + b"\x01\x00" + b"\x03" + b"\x00" + (1_000_000).to_bytes(8, "little")


def encoded(ticks, channel=3):
    buf = io.BytesIO()
    write_timetags(EventStream(ticks, channel=channel), buf)
    return buf.getvalue()


class TrackingReader(io.BytesIO):
    """BytesIO that remembers the furthest byte ever requested."""

    def __init__(self, data):
        super().__init__(data)
        self.furthest = 0

    def read(self, n=-1):
        out = super().read(n)
        self.furthest = max(self.furthest, self.tell())
        return out


def test_empty_stream_golden_bytes():
    data = encoded([])
    assert data == GOLDEN_HEADER + (0).to_bytes(8, "little")
    assert len(data) == HEADER_SIZE == 24


def test_three_ticks_golden_bytes():
    data = encoded([0, 1, 2])
    assert len(data) == 24 + 24
    assert data[:24] == GOLDEN_HEADER + (3).to_bytes(8, "little")
    assert data[24:] == (b"\x00" + b"\x00" * 7) + (b"\x01" + b"\x00" * 7) + (b"\x02" + b"\x00" * 7)


def test_negative_ticks_are_twos_complement():
    data = encoded([-1])
    assert data[24:] == b"\xff" * 8
    assert parse_timetags(data).ticks.tolist() == [-1]


def test_round_trip_million_events(tmp_path):
    rng = np.random.default_rng(0)
    ticks = np.cumsum(rng.integers(0, 10**7, 10**6)) - 10**9
    path = tmp_path / "a.wcpt"
    n = write_timetags(EventStream(ticks, channel=1), path)
    assert n == path.stat().st_size == 24 + 8 * 10**6
    back = read_timetags(path)
    assert back.channel == 1
    assert back.ticks.tobytes() == ticks.astype("<i8").tobytes()


def test_streaming_read_yields_blocks():
    data = encoded(np.arange(10))
    it = iter_timetags(io.BytesIO(data), block=4)
    hdr = next(it)
    assert hdr.count == 10
    assert [b.size for b in it] == [4, 4, 2]


def test_incremental_writer(tmp_path):
    path = tmp_path / "w.wcpt"
    with TimetagWriter(path, channel=2) as w:
        w.write([1, 2])
        w.write([])
        w.write([2, 9])
        with pytest.raises(OrderingError):
            w.write([3])
    s = read_timetags(path)
    assert s.ticks.tolist() == [1, 2, 2, 9] and s.channel == 2


def test_write_failure_carries_context(tmp_path):
    with pytest.raises(OSError, match="missing"):
        write_timetags(EventStream([1]), tmp_path / "missing" / "x.wcpt")


def test_corrupted_magic_reports_offset_zero():
    data = bytearray(encoded([1, 2]))
    data[0] = ord("X")
    with pytest.raises(TimetagParseError) as exc:
        parse_timetags(bytes(data))
    assert exc.value.offset == 0


def test_bad_version_and_resolution():
    data = bytearray(encoded([1]))
    data[4] = 2
    with pytest.raises(TimetagParseError) as exc:
        parse_timetags(bytes(data))
    assert exc.value.offset == 4
    data = bytearray(encoded([1]))
    data[8] = 0
    with pytest.raises(TimetagParseError) as exc:
        parse_timetags(bytes(data))
    assert exc.value.offset == 8


def test_truncated_payload_names_counts():
    data = encoded([1, 2, 3, 4])[:-12]
    with pytest.raises(TimetagParseError) as exc:
        parse_timetags(data)
    assert exc.value.expected == 4 and exc.value.actual == 2
    assert "4" in str(exc.value) and "2" in str(exc.value)


def test_truncated_header():
    with pytest.raises(TimetagParseError) as exc:
        parse_timetags(GOLDEN_HEADER[:10])
    assert exc.value.offset == 10


def test_non_monotone_records_report_offset():
    data = bytearray(encoded([1, 5, 9]))
    data[24 + 16 : 24 + 24] = (2).to_bytes(8, "little")
    with pytest.raises(TimetagParseError) as exc:
        parse_timetags(bytes(data))
    assert exc.value.offset == 24 + 16


def test_trailing_bytes_rejected():
    with pytest.raises(TimetagParseError):
        parse_timetags(encoded([1]) + b"\x00")


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_file_parser_fuzz_never_over_reads(blob):
    f = TrackingReader(blob)
    try:
        read_timetags(f)
    except TimetagParseError:
        pass
    if len(blob) >= HEADER_SIZE:
        count = int.from_bytes(blob[16:24], "little")
        # one extra byte is read to detect trailing garbage
        assert f.furthest <= HEADER_SIZE + 8 * count + 1


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-(2**63), 2**63 - 1), max_size=50).map(sorted), st.integers(0, 255))
def test_file_round_trip_property(ticks, channel):
    s = parse_timetags(encoded(ticks, channel))
    assert s.ticks.tolist() == ticks and s.channel == channel


def test_frame_golden_bytes():
    assert encode_heartbeat() == b"\x00\x00\x00\x00\x02"
    assert encode_batch(1, [5]) == b"\x09\x00\x00\x00\x00" + b"\x01" + b"\x05" + b"\x00" * 7
    # du in units of 1e-15
    assert encode_served(-2, 4e-6) == (
        b"\x10\x00\x00\x00\x01" + struct.pack("<q", -2) + struct.pack("<q", 4_000_000_000)
    )


def test_frames_round_trip():
    stream = encode_batch(2, [1, 2, 3]) + encode_heartbeat() + encode_served(123, -1.5e-8)
    frames = decode_frames(stream)
    assert [f.kind for f in frames] == [FRAME_BATCH, FRAME_HEARTBEAT, FRAME_SERVED]
    assert frames[0].channel == 2 and frames[0].ticks.tolist() == [1, 2, 3]
    assert frames[2].tau_ps == 123 and frames[2].du == pytest.approx(-1.5e-8, abs=1e-15)


def test_decoder_handles_byte_by_byte_delivery():
    stream = encode_batch(1, [7, 8]) + encode_served(1, 0.0)
    dec = FrameDecoder()
    got = []
    for i in range(len(stream)):
        got += dec.feed(stream[i : i + 1])
    assert len(got) == 2 and dec.pending == 0


@pytest.mark.parametrize(
    "blob",
    [
        b"\x01\x00\x00\x00\x07\x00",  # unknown type
        b"\x03\x00\x00\x00\x00abc",  # batch not 1 + 8n
        b"\x02\x00\x00\x00\x01\x00\x00",  # served size
        b"\x01\x00\x00\x00\x02\x00",  # heartbeat with payload
        b"\xff\xff\xff\xff\x00",  # oversized length
        encode_batch(1, [5, 3]),  # out of order
        encode_heartbeat()[:3],  # partial frame
    ],
)
def test_malformed_frames_raise(blob):
    with pytest.raises(FrameError):
        decode_frames(blob)


def test_decoder_stops_at_declared_length():
    frame = encode_served(1, 0.0)
    dec = FrameDecoder()
    frames = dec.feed(frame + b"\x05\x00")
    assert len(frames) == 1 and dec.pending == 2


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=64))
def test_frame_fuzz_parses_or_errors(blob):
    dec = FrameDecoder()
    try:
        frames = dec.feed(blob)
    except FrameError:
        return
    consumed = len(blob) - dec.pending
    assert sum(5 + _payload_size(f) for f in frames) == consumed


def _payload_size(f):
    if f.kind == FRAME_BATCH:
        return 1 + 8 * f.ticks.size
    return 16 if f.kind == FRAME_SERVED else 0


def _pair(**kw):
    s1, s2 = socket.socketpair()
    return ExchangeSession("initiator", s1, **kw), ExchangeSession("responder", s2, **kw)


def test_loopback_batch_is_received_intact():
    x, y = _pair()
    try:
        x.send_batch(1, [1, 2, 3])
        x.send_served(42, 1e-8)
        f = y.receive(timeout=5)
        assert f.kind == FRAME_BATCH and f.ticks.tolist() == [1, 2, 3]
        f = y.receive(timeout=5)
        assert f.tau_ps == 42
    finally:
        x.close()
        y.close()


def test_peer_close_ends_receive():
    x, y = _pair()
    x.close()
    assert y.receive(timeout=5) is None
    y.close()


def test_silent_peer_is_lost():
    s1, s2 = socket.socketpair()
    sess = ExchangeSession("initiator", s1, heartbeat=0.1, peer_timeout=0.3)
    try:
        t0 = time.monotonic()
        with pytest.raises(PeerLost):
            sess.receive(timeout=5)
        assert time.monotonic() - t0 < 2
    finally:
        sess.close()
        s2.close()


def test_heartbeats_keep_session_alive():
    x, y = _pair(heartbeat=0.05, peer_timeout=0.3)
    try:
        with pytest.raises(TimeoutError):
            y.receive(timeout=0.8)
    finally:
        x.close()
        y.close()


def test_malformed_bytes_raise_session_error():
    s1, s2 = socket.socketpair()
    sess = ExchangeSession("responder", s1)
    try:
        s2.sendall(b"\x00\x00\x00\x00\x09")
        with pytest.raises(SessionError):
            sess.receive(timeout=5)
    finally:
        sess.close()
        s2.close()


def test_interleaved_batches_keep_per_channel_order():
    rng = random.Random(3)
    x, y = _pair()
    data = {1: np.cumsum(np.arange(3000)), 2: np.cumsum(np.arange(2000)) * 3}
    received = {1: [], 2: []}

    def sender(sess, ch, seed):
        r = random.Random(seed)
        t = data[ch]
        i = 0
        while i < t.size:
            n = r.randint(1, 300)
            sess.send_batch(ch, t[i : i + n])
            i += n
            time.sleep(r.random() * 0.002)
        sess.send_end(ch)

    def receiver(sess, ch_remote):
        while True:
            f = sess.receive(timeout=10)
            if f.ticks.size == 0:
                return
            received[ch_remote].append(f.ticks)

    threads = [
        threading.Thread(target=sender, args=(x, 1, rng.random())),
        threading.Thread(target=sender, args=(y, 2, rng.random())),
        threading.Thread(target=receiver, args=(y, 1)),
        threading.Thread(target=receiver, args=(x, 2)),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    x.close()
    y.close()
    for ch in (1, 2):
        assert np.array_equal(np.concatenate(received[ch]), data[ch])


def test_live_tracking_matches_file_tracking():
    rng = np.random.default_rng(4)
    a = np.sort(rng.integers(0, 3 * 10**12, 300_000))
    b = a - 50_000
    offline = track(a, b)
    x, y = _pair()
    out = {}

    def respond():
        out["remote"], out["served"] = run_responder(y, b, batch=1000)

    th = threading.Thread(target=respond)
    th.start()
    tracker = run_initiator(x, a, Tracker(TrackerConfig()), batch=1500)
    x.close()
    th.join(30)
    y.close()
    assert tracker.samples == offline.samples
    assert np.array_equal(out["remote"][1], a)
    assert [s[0] for s in out["served"]] == [int(round(s.tau)) for s in offline.samples]
