"""Framed byte transport: in-process queues and TCP sockets, one wire format.

A frame is a 4-byte big-endian payload length, a 1-byte message tag, then
the payload.  Payloads above 64 MiB are refused on send and rejected on
receive; a short read raises naming the byte counts, so truncation is never
silent.  The in-process channel moves the same serialized bytes a socket
would, which keeps the two transports observationally equivalent and lets
tests exercise serialization without opening sockets.

Channels can mirror traffic into a transcript: a verbatim, replayable log
of frames prefixed with the sender's role byte.  The leakage audit consumes
these files.
"""

from __future__ import annotations

import socket
import struct
import time
from collections import deque
from dataclasses import dataclass
from typing import BinaryIO, Iterator

from .errors import TransportError

MAX_FRAME_BYTES = 64 * 1024 * 1024
_HEADER = struct.Struct(">IB")

TAG_ENC_ACTIVATION = 0x01
TAG_NOISY_WSUM = 0x02
TAG_DENOISED_WSUM = 0x03
TAG_ENC_WGRAD = 0x04
TAG_BLINDED_WGRAD = 0x05
TAG_ENC_ACT_GRAD = 0x06
TAG_CONTROL = 0x07

VALID_TAGS = frozenset(
    (
        TAG_ENC_ACTIVATION,
        TAG_NOISY_WSUM,
        TAG_DENOISED_WSUM,
        TAG_ENC_WGRAD,
        TAG_BLINDED_WGRAD,
        TAG_ENC_ACT_GRAD,
        TAG_CONTROL,
    )
)

DATA_TAGS = tuple(sorted(VALID_TAGS - {TAG_CONTROL}))

ROLE_ACTIVE = 0x00
ROLE_PASSIVE = 0x01

TRANSCRIPT_MAGIC = b"SPHT"
TRANSCRIPT_VERSION = 0x01


@dataclass(frozen=True)
class Frame:
    tag: int
    payload: bytes

    def encode(self) -> bytes:
        if self.tag not in VALID_TAGS:
            raise TransportError(f"unknown message tag {self.tag:#04x}")
        if len(self.payload) > MAX_FRAME_BYTES:
            raise TransportError(
                f"frame payload of {len(self.payload)} bytes exceeds cap {MAX_FRAME_BYTES}"
            )
        return _HEADER.pack(len(self.payload), self.tag) + self.payload


def decode_frame(header: bytes) -> tuple[int, int]:
    length, tag = _HEADER.unpack(header)
    if tag not in VALID_TAGS:
        raise TransportError(f"unknown message tag {tag:#04x}")
    if length > MAX_FRAME_BYTES:
        raise TransportError(f"declared payload of {length} bytes exceeds cap {MAX_FRAME_BYTES}")
    return length, tag


# ---------------------------------------------------------------------------
# Transcripts
# ---------------------------------------------------------------------------


class TranscriptWriter:
    """Appends (sender-role byte, verbatim frame bytes) records to a stream."""

    def __init__(self, stream: BinaryIO):
        self._stream = stream
        self._stream.write(TRANSCRIPT_MAGIC + bytes([TRANSCRIPT_VERSION]))

    @classmethod
    def to_path(cls, path) -> "TranscriptWriter":
        writer = cls(open(path, "wb"))
        writer._owns_stream = True
        return writer

    def record(self, sender_role: int, frame_bytes: bytes) -> None:
        self._stream.write(bytes([sender_role]))
        self._stream.write(frame_bytes)

    def close(self) -> None:
        if getattr(self, "_owns_stream", False):
            self._stream.close()


def read_transcript(path) -> list[tuple[int, Frame]]:
    """Parse a transcript back into (sender_role, frame) records."""
    entries: list[tuple[int, Frame]] = []
    with open(path, "rb") as src:
        head = src.read(5)
        if head[:4] != TRANSCRIPT_MAGIC or len(head) < 5:
            raise TransportError("not a transcript file (bad magic)")
        if head[4] != TRANSCRIPT_VERSION:
            raise TransportError(f"unsupported transcript version {head[4]:#x}")
        while True:
            role = src.read(1)
            if not role:
                break
            header = src.read(_HEADER.size)
            if len(header) != _HEADER.size:
                raise TransportError("transcript ends mid-frame header")
            length, tag = decode_frame(header)
            payload = src.read(length)
            if len(payload) != length:
                raise TransportError(
                    f"transcript ends mid-frame: expected {length} payload bytes, got {len(payload)}"
                )
            entries.append((role[0], Frame(tag, payload)))
    return entries


def iter_transcript_frames(path) -> Iterator[bytes]:
    """Verbatim frame bytes (header included), for byte-level scans."""
    for _, frame in read_transcript(path):
        yield frame.encode()


# ---------------------------------------------------------------------------
# In-process channel
# ---------------------------------------------------------------------------


class InProcessChannel:
    """One endpoint of a same-process duplex pair; see ``in_process_pair``."""

    def __init__(self, role: int, transcript: TranscriptWriter | None = None):
        self.role = role
        self.transcript = transcript
        self._tx: deque[bytes] | None = None
        self._rx: deque[bytes] = deque()
        self._peer_closed = [False]
        self._closed_flag = [False]
        self.io_seconds = 0.0

    def send(self, frame: Frame) -> None:
        if self._closed_flag[0]:
            raise TransportError("channel is closed")
        if self._peer_closed[0]:
            # Mirror the TCP endpoint's broken-pipe behaviour.
            raise TransportError("peer endpoint is closed")
        raw = frame.encode()
        if self.transcript is not None:
            self.transcript.record(self.role, raw)
        assert self._tx is not None
        self._tx.append(raw)

    def try_recv(self) -> Frame | None:
        """Next pending frame, or None if the queue is empty right now."""
        if not self._rx:
            return None
        return self._decode(self._rx.popleft())

    def recv(self) -> Frame | None:
        """Next frame; None once the peer has closed and the queue drained."""
        if self._rx:
            return self._decode(self._rx.popleft())
        if self._peer_closed[0]:
            return None
        raise TransportError("no pending frame (peer has not replied)")

    def close(self) -> None:
        self._closed_flag[0] = True

    @staticmethod
    def _decode(raw: bytes) -> Frame:
        length, tag = decode_frame(raw[: _HEADER.size])
        return Frame(tag, raw[_HEADER.size :])


def in_process_pair(
    transcript: TranscriptWriter | None = None,
) -> tuple[InProcessChannel, InProcessChannel]:
    """Duplex pair: (active end, passive end) sharing one transcript."""
    a = InProcessChannel(ROLE_ACTIVE, transcript)
    b = InProcessChannel(ROLE_PASSIVE, transcript)
    a._tx = b._rx
    b._tx = a._rx
    a._peer_closed = b._closed_flag
    b._peer_closed = a._closed_flag
    return a, b


# ---------------------------------------------------------------------------
# TCP channel
# ---------------------------------------------------------------------------


class TcpChannel:
    def __init__(
        self,
        sock: socket.socket,
        role: int,
        transcript: TranscriptWriter | None = None,
        record_inbound: bool = False,
    ):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self.role = role
        self.transcript = transcript
        self.record_inbound = record_inbound
        self.io_seconds = 0.0

    def send(self, frame: Frame) -> None:
        raw = frame.encode()
        if self.transcript is not None:
            self.transcript.record(self.role, raw)
        start = time.perf_counter()
        try:
            self._sock.sendall(raw)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc
        self.io_seconds += time.perf_counter() - start

    def recv(self) -> Frame | None:
        start = time.perf_counter()
        header = self._recv_exact(_HEADER.size, allow_eof=True)
        if header is None:
            return None
        length, tag = decode_frame(header)
        payload = self._recv_exact(length, allow_eof=False)
        self.io_seconds += time.perf_counter() - start
        assert payload is not None
        if self.transcript is not None and self.record_inbound:
            self.transcript.record(ROLE_PASSIVE if self.role == ROLE_ACTIVE else ROLE_ACTIVE, header + payload)
        return Frame(tag, payload)

    def _recv_exact(self, count: int, allow_eof: bool) -> bytes | None:
        chunks: list[bytes] = []
        got = 0
        while got < count:
            try:
                chunk = self._sock.recv(count - got)
            except OSError as exc:
                raise TransportError(f"recv failed: {exc}") from exc
            if not chunk:
                if allow_eof and got == 0:
                    return None
                raise TransportError(f"truncated frame: expected {count} bytes, got {got}")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(1)
        self.host, self.port = self._sock.getsockname()[:2]

    def accept(
        self,
        role: int = ROLE_PASSIVE,
        transcript: TranscriptWriter | None = None,
        record_inbound: bool = False,
        timeout: float | None = None,
    ) -> TcpChannel:
        self._sock.settimeout(timeout)
        try:
            conn, _ = self._sock.accept()
        except socket.timeout as exc:
            raise TransportError("timed out waiting for a peer") from exc
        return TcpChannel(conn, role, transcript, record_inbound)

    def close(self) -> None:
        self._sock.close()


def tcp_connect(
    host: str,
    port: int,
    role: int = ROLE_ACTIVE,
    transcript: TranscriptWriter | None = None,
    record_inbound: bool = False,
    attempts: int = 40,
    delay: float = 0.25,
) -> TcpChannel:
    """Connect with retries so either party may start first."""
    last: Exception | None = None
    for _ in range(attempts):
        try:
            sock = socket.create_connection((host, port), timeout=10.0)
            return TcpChannel(sock, role, transcript, record_inbound)
        except OSError as exc:
            last = exc
            time.sleep(delay)
    raise TransportError(f"could not connect to {host}:{port}: {last}")
