"""Timestamp files and the framed exchange protocol.

File layout (little-endian)::

    offset  size  field
    0       4     magic b"WCPT"
    4       2     version (1)
    6       1     channel id
    7       1     reserved (0)
    8       8     tick resolution in femtoseconds (1_000_000)
    16      8     record count
    24      8*n   int64 tick values, non-decreasing

Frame layout: ``u32 payload length``, ``u8 frame type``, payload.  Types:
0 = timestamp batch (``u8 channel`` + int64 ticks), 1 = served offset
(``int64 tau_ps`` + ``int64 du * 1e15``), 2 = heartbeat (empty).
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import FrameError, OrderingError, PeerLost, SessionError, TimetagParseError
from .timetag import EventStream, _ticks_of

log = logging.getLogger(__name__)

MAGIC = b"WCPT"
VERSION = 1
RESOLUTION_FS = 1_000_000
HEADER = struct.Struct("<4sHBBQQ")
HEADER_SIZE = HEADER.size  # 24
RECORD = np.dtype("<i8")
READ_BLOCK = 1 << 16  # records per read

FRAME_HEADER = struct.Struct("<IB")
FRAME_BATCH, FRAME_SERVED, FRAME_HEARTBEAT = 0, 1, 2
MAX_FRAME = 1 << 26
DU_SCALE = 10**15


def encode_header(channel: int, count: int) -> bytes:
    if not 0 <= channel <= 255:
        raise ValueError(f"channel id must fit in one byte, got {channel}")
    return HEADER.pack(MAGIC, VERSION, channel, 0, RESOLUTION_FS, count)


def write_timetags(stream, sink, channel: int | None = None) -> int:
    """Write ``stream`` to a path or binary file object; returns bytes written."""
    ticks = _ticks_of(stream)
    if channel is None:
        channel = stream.channel if isinstance(stream, EventStream) else 0
    header = encode_header(channel, ticks.size)
    body = ticks.astype(RECORD, copy=False).tobytes()
    if isinstance(sink, (str, bytes)) or hasattr(sink, "__fspath__"):
        try:
            with open(sink, "wb") as fh:
                fh.write(header)
                fh.write(body)
        except OSError as exc:
            raise OSError(f"cannot write timetag file {sink}: {exc}") from exc
    else:
        try:
            sink.write(header)
            sink.write(body)
        except OSError as exc:
            raise OSError(f"timetag sink write failed: {exc}") from exc
    return len(header) + len(body)


class TimetagWriter:
    """Append-only writer for streams too large to hold in memory.

    The record count is patched into the header on :meth:`close`, so the
    sink must be seekable.
    """

    def __init__(self, path, channel: int = 0):
        self.path = path
        self.channel = channel
        self.count = 0
        self.last = None
        self.fh = open(path, "wb")
        self.fh.write(encode_header(channel, 0))

    def write(self, ticks):
        t = np.asarray(ticks, dtype=np.int64)
        if t.size == 0:
            return
        if (self.last is not None and t[0] < self.last) or np.any(t[1:] < t[:-1]):
            raise OrderingError(f"records for {self.path} must be non-decreasing")
        self.fh.write(t.astype(RECORD, copy=False).tobytes())
        self.count += t.size
        self.last = int(t[-1])

    def close(self):
        if self.fh.closed:
            return
        self.fh.seek(0)
        self.fh.write(encode_header(self.channel, self.count))
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _read_exact(fh, n):
    buf = fh.read(n)
    return buf if buf is not None else b""


@dataclass
class TimetagHeader:
    version: int
    channel: int
    resolution_fs: int
    count: int


def read_header(fh) -> TimetagHeader:
    raw = _read_exact(fh, HEADER_SIZE)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise TimetagParseError("bad magic, expected b'WCPT'", offset=0, expected=MAGIC, actual=raw[:4])
    if len(raw) < HEADER_SIZE:
        raise TimetagParseError(
            "truncated header", offset=len(raw), expected=HEADER_SIZE, actual=len(raw)
        )
    magic, version, channel, reserved, res, count = HEADER.unpack(raw)
    if version != VERSION:
        raise TimetagParseError(f"unsupported version {version}", offset=4, expected=VERSION, actual=version)
    if reserved != 0:
        raise TimetagParseError("reserved byte must be zero", offset=7, expected=0, actual=reserved)
    if res != RESOLUTION_FS:
        raise TimetagParseError(
            f"unsupported tick resolution {res} fs", offset=8, expected=RESOLUTION_FS, actual=res
        )
    return TimetagHeader(version, channel, res, count)


def iter_timetags(source, block: int = READ_BLOCK) -> Iterator[np.ndarray]:
    """Yield validated blocks of ticks without loading the whole file.

    The first item yielded is the :class:`TimetagHeader`.
    """
    own = isinstance(source, (str, bytes)) or hasattr(source, "__fspath__")
    fh = open(source, "rb") if own else source
    try:
        hdr = read_header(fh)
        yield hdr
        remaining = hdr.count
        prev = None
        index = 0
        while remaining:
            n = min(block, remaining)
            raw = _read_exact(fh, n * 8)
            if len(raw) < n * 8:
                got = index + len(raw) // 8
                raise TimetagParseError(
                    f"truncated payload: header declares {hdr.count} records, found {got}",
                    offset=HEADER_SIZE + index * 8 + len(raw),
                    expected=hdr.count,
                    actual=got,
                )
            ticks = np.frombuffer(raw, dtype=RECORD).astype(np.int64)
            bad = np.flatnonzero(ticks[1:] < ticks[:-1])
            if prev is not None and ticks[0] < prev:
                bad = np.concatenate(([-1], bad))
            if bad.size:
                i = index + int(bad[0]) + 1
                raise TimetagParseError(
                    f"records not time ordered at record {i}", offset=HEADER_SIZE + i * 8,
                    expected="non-decreasing", actual=i,
                )
            prev = int(ticks[-1])
            index += n
            remaining -= n
            yield ticks
        extra = fh.read(1)
        if extra:
            raise TimetagParseError(
                "trailing bytes after declared records", offset=HEADER_SIZE + hdr.count * 8,
                expected=hdr.count, actual="more",
            )
    finally:
        if own:
            fh.close()


def read_timetags(source) -> EventStream:
    """Parse a timetag file (path or binary file object) into an :class:`EventStream`."""
    it = iter_timetags(source)
    hdr = next(it)
    blocks = list(it)
    ticks = np.concatenate(blocks) if blocks else np.empty(0, dtype=np.int64)
    return EventStream(ticks, channel=hdr.channel)


def parse_timetags(data: bytes) -> EventStream:
    """Parse an in-memory timetag file."""
    import io as _io

    return read_timetags(_io.BytesIO(data))


# -- exchange frames -----------------------------------------------------------


def encode_batch(channel: int, ticks) -> bytes:
    t = np.asarray(ticks, dtype=RECORD)
    payload = bytes([channel]) + t.tobytes()
    return FRAME_HEADER.pack(len(payload), FRAME_BATCH) + payload


def encode_served(tau_ps: int, du: float) -> bytes:
    payload = struct.pack("<qq", int(tau_ps), int(round(du * DU_SCALE)))
    return FRAME_HEADER.pack(len(payload), FRAME_SERVED) + payload


def encode_heartbeat() -> bytes:
    return FRAME_HEADER.pack(0, FRAME_HEARTBEAT)


@dataclass
class Frame:
    kind: int
    channel: int | None = None
    ticks: np.ndarray | None = None
    tau_ps: int | None = None
    du: float | None = None


def decode_payload(kind: int, payload: bytes) -> Frame:
    if kind == FRAME_BATCH:
        if len(payload) < 1 or (len(payload) - 1) % 8:
            raise FrameError(f"batch payload of {len(payload)} bytes is not 1 + 8n")
        ticks = np.frombuffer(payload, dtype=RECORD, offset=1).astype(np.int64)
        if ticks.size > 1 and np.any(ticks[1:] < ticks[:-1]):
            raise FrameError("batch ticks are not time ordered")
        return Frame(FRAME_BATCH, channel=payload[0], ticks=ticks)
    if kind == FRAME_SERVED:
        if len(payload) != 16:
            raise FrameError(f"served payload must be 16 bytes, got {len(payload)}")
        tau, du = struct.unpack("<qq", payload)
        return Frame(FRAME_SERVED, tau_ps=tau, du=du / DU_SCALE)
    if kind == FRAME_HEARTBEAT:
        if payload:
            raise FrameError("heartbeat frame must be empty")
        return Frame(FRAME_HEARTBEAT)
    raise FrameError(f"unknown frame type {kind}")


class FrameDecoder:
    """Incremental decoder; feed bytes, collect complete frames.

    Never looks past a frame's declared length; oversized or malformed frames
    raise :class:`FrameError`.
    """

    def __init__(self, max_frame: int = MAX_FRAME):
        self.buf = bytearray()
        self.max_frame = max_frame

    def feed(self, data: bytes) -> list[Frame]:
        self.buf += data
        out = []
        while len(self.buf) >= FRAME_HEADER.size:
            length, kind = FRAME_HEADER.unpack_from(self.buf, 0)
            if length > self.max_frame:
                raise FrameError(f"frame length {length} exceeds limit {self.max_frame}")
            if kind > FRAME_HEARTBEAT:
                raise FrameError(f"unknown frame type {kind}")
            end = FRAME_HEADER.size + length
            if len(self.buf) < end:
                break
            payload = bytes(self.buf[FRAME_HEADER.size:end])
            del self.buf[:end]
            out.append(decode_payload(kind, payload))
        return out

    @property
    def pending(self) -> int:
        return len(self.buf)


def decode_frames(data: bytes) -> list[Frame]:
    """Decode a complete byte string; leftover partial frames are an error."""
    dec = FrameDecoder()
    frames = dec.feed(data)
    if dec.pending:
        raise FrameError(f"{dec.pending} trailing bytes do not form a complete frame")
    return frames


class ExchangeSession:
    """One end of a timestamp exchange over a connected stream socket.

    Local batches go out with :meth:`send_batch`; remote frames are decoded by
    a reader thread and handed out in arrival order by :meth:`receive`.  A
    heartbeat is sent every ``heartbeat`` seconds while idle, and silence
    longer than ``peer_timeout`` raises :class:`PeerLost`.  An empty batch
    marks the end of a channel's stream.
    """

    def __init__(self, role: str, sock: socket.socket, heartbeat: float = 1.0, peer_timeout: float = 5.0):
        if role not in ("initiator", "responder"):
            raise ValueError("role must be 'initiator' or 'responder'")
        self.role = role
        self.sock = sock
        self.heartbeat = heartbeat
        self.peer_timeout = peer_timeout
        self._inbox: queue.Queue = queue.Queue()
        self._send_lock = threading.Lock()
        self._last_rx = time.monotonic()
        self._last_tx = time.monotonic()
        self._closed = threading.Event()
        self._error: Exception | None = None
        self._reader = threading.Thread(target=self._read_loop, name=f"wcps-{role}-reader", daemon=True)
        self._beater = threading.Thread(target=self._beat_loop, name=f"wcps-{role}-heartbeat", daemon=True)
        self._reader.start()
        self._beater.start()

    def _send(self, data: bytes):
        with self._send_lock:
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise SessionError(f"send failed: {exc}") from exc
            self._last_tx = time.monotonic()

    def send_batch(self, channel: int, ticks):
        self._send(encode_batch(channel, ticks))

    def send_end(self, channel: int):
        self._send(encode_batch(channel, np.empty(0, dtype=np.int64)))

    def send_served(self, tau_ps: int, du: float):
        self._send(encode_served(tau_ps, du))

    def _read_loop(self):
        dec = FrameDecoder()
        try:
            while not self._closed.is_set():
                try:
                    data = self.sock.recv(1 << 16)
                except socket.timeout:
                    continue
                except OSError as exc:
                    if self._closed.is_set():
                        return
                    raise SessionError(f"receive failed: {exc}") from exc
                if not data:
                    self._inbox.put(None)
                    return
                self._last_rx = time.monotonic()
                for f in dec.feed(data):
                    if f.kind != FRAME_HEARTBEAT:
                        self._inbox.put(f)
        except Exception as exc:  # noqa: BLE001
            self._error = exc if isinstance(exc, SessionError) else SessionError(str(exc))
            self._inbox.put(None)

    def _beat_loop(self):
        while not self._closed.wait(self.heartbeat / 4):
            if time.monotonic() - self._last_tx >= self.heartbeat:
                try:
                    self._send(encode_heartbeat())
                except SessionError:
                    return

    def receive(self, timeout: float | None = None) -> Frame | None:
        """Next remote frame, or ``None`` once the peer closed the connection."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            try:
                f = self._inbox.get(timeout=0.05)
            except queue.Empty:
                if self._error is not None:
                    raise self._error
                if time.monotonic() - self._last_rx > self.peer_timeout:
                    raise PeerLost(f"no data from peer for {self.peer_timeout} s")
                if deadline is not None and time.monotonic() > deadline:
                    raise TimeoutError("no frame within timeout")
                continue
            if f is None and self._error is not None:
                raise self._error
            return f

    def close(self):
        self._closed.set()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def stream_batches(stream, batch: int = 4096) -> Iterator[np.ndarray]:
    t = _ticks_of(stream)
    for i in range(0, t.size, batch):
        yield t[i : i + batch]


def run_initiator(session: ExchangeSession, local, tracker, batch: int = 4096, lookahead: int = 10**12,
                  local_channel: int = 1):
    """Track ``local`` against the peer's stream as it arrives.

    Local batches are sent to the peer and fed to ``tracker``; local data is
    held back while it runs more than ``lookahead`` ticks ahead of the remote
    stream, which bounds the tracker's buffers.  Every served sample goes
    back to the peer.  Returns the tracker.
    """
    ticks = _ticks_of(local)
    pos = 0
    local_done = ticks.size == 0
    remote_done = False
    remote_last = None
    if local_done:
        session.send_end(local_channel)
    while not remote_done or not local_done:
        served = []
        if not local_done and (remote_done or remote_last is None
                               or ticks[pos] <= remote_last + lookahead):
            part = ticks[pos : pos + batch]
            pos += part.size
            session.send_batch(local_channel, part)
            served = tracker.feed(local_channel, part)
            if pos >= ticks.size:
                local_done = True
                session.send_end(local_channel)
        else:
            f = session.receive()
            if f is None:
                remote_done = True
                continue
            if f.kind != FRAME_BATCH:
                continue
            if f.ticks.size == 0:
                remote_done = True
                continue
            remote_last = int(f.ticks[-1])
            served = tracker.feed(f.channel, f.ticks)
        for s in served:
            session.send_served(int(round(s.tau)), s.du)
    for s in tracker.close():
        session.send_served(int(round(s.tau)), s.du)
    return tracker


def run_responder(session: ExchangeSession, local, batch: int = 4096, cadence: float = 0.0,
                  local_channel: int = 2):
    """Send ``local`` in batches every ``cadence`` seconds and collect what the peer returns.

    Returns ``(remote_ticks_by_channel, served)`` where ``served`` lists
    ``(tau_ps, du)`` tuples in arrival order.
    """
    ticks = _ticks_of(local)
    errors = []

    def send():
        try:
            for part in stream_batches(ticks, batch):
                session.send_batch(local_channel, part)
                if cadence:
                    time.sleep(cadence)
            session.send_end(local_channel)
        except SessionError as exc:
            errors.append(exc)

    th = threading.Thread(target=send, name="wcps-responder-sender", daemon=True)
    th.start()
    remote: dict = {}
    served = []
    while True:
        f = session.receive()
        if f is None:
            break
        if f.kind == FRAME_BATCH:
            remote.setdefault(f.channel, []).append(f.ticks)
        elif f.kind == FRAME_SERVED:
            served.append((f.tau_ps, f.du))
    th.join()
    if errors:
        raise errors[0]
    out = {ch: np.concatenate(parts) for ch, parts in remote.items()}
    return out, served
