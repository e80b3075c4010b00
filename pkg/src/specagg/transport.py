"""Length-prefixed binary protocol between the two peers.

Frame = 6-byte header (type u8, codec u8, body_len u32 LE) + body.  All
multi-byte integers are little-endian; probabilities travel as IEEE binary16.
Codec 1 wraps the body in zlib; the header length is always the on-wire
(compressed) body size, so frames stay self-delimiting either way.
"""

from __future__ import annotations

import enum
import heapq
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass

import numpy as np

from .common import Side
from .dists import CompressedDist

HEADER = struct.Struct("<BBI")
_DRAFT_FIXED = struct.Struct("<IIdf")
_DIST_HEAD = struct.Struct("<II")
_TARGET = struct.Struct("<IIBBB")
_SWITCH = struct.Struct("<IB")
_PROBE_FIXED = struct.Struct("<BIdI")
_PAIR_DTYPE = np.dtype([("id", "<u4"), ("value", "<f2")])


class MsgType(enum.IntEnum):
    DRAFT = 1
    TARGET = 2
    SWITCH = 3
    PROBE = 4
    HELLO = 5
    BYE = 6


class Codec(enum.IntEnum):
    NONE = 0
    BLOCK = 1


class ProbeKind(enum.IntEnum):
    ECHO_REQUEST = 0
    ECHO_REPLY = 1
    ROLLBACK_ACK = 2


class TransportError(RuntimeError):
    pass


class TruncatedFrameError(TransportError):
    """Stream ended in the middle of a frame."""


class FrameLengthError(TransportError):
    """Body length does not match the encoded payload."""


class UnknownCodecError(TransportError):
    pass


class UnknownMessageTypeError(TransportError):
    pass


class ConnectionClosedError(TransportError):
    """Peer closed the stream at a frame boundary."""


@dataclass(frozen=True)
class Hello:
    """Handshake marker; deliberately empty."""


@dataclass(frozen=True)
class Bye:
    """Graceful end of stream."""


@dataclass(frozen=True)
class DraftMsg:
    step: int
    token: int
    h: float
    decode_ms: float
    dist: CompressedDist


@dataclass(frozen=True)
class TargetMsg:
    """Aggregation outcome broadcast; l = device, r = cloud on the wire."""

    step: int
    target: int
    accept_l: bool
    accept_r: bool
    switch_to: Side | None = None


@dataclass(frozen=True)
class SwitchMsg:
    step: int
    to: Side


@dataclass(frozen=True)
class ProbeMsg:
    kind: ProbeKind
    seq: int
    t_send: float
    payload: bytes = b""


Message = Hello | Bye | DraftMsg | TargetMsg | SwitchMsg | ProbeMsg

_SIDE_CODE = {None: 0, Side.DEVICE: 1, Side.CLOUD: 2}
_CODE_SIDE = {0: None, 1: Side.DEVICE, 2: Side.CLOUD}


def _encode_dist(dist: CompressedDist) -> bytes:
    pairs = np.empty(len(dist), dtype=_PAIR_DTYPE)
    pairs["id"] = dist.token_ids
    pairs["value"] = dist.values
    return _DIST_HEAD.pack(len(dist), dist.vocab_size) + pairs.tobytes()


def _decode_dist(body: bytes, offset: int) -> tuple[CompressedDist, int]:
    if len(body) - offset < _DIST_HEAD.size:
        raise FrameLengthError("distribution header truncated")
    count, vocab_size = _DIST_HEAD.unpack_from(body, offset)
    offset += _DIST_HEAD.size
    nbytes = count * _PAIR_DTYPE.itemsize
    if len(body) - offset < nbytes:
        raise FrameLengthError("distribution pairs truncated")
    pairs = np.frombuffer(body, dtype=_PAIR_DTYPE, count=count, offset=offset)
    dist = CompressedDist(
        vocab_size=vocab_size,
        token_ids=pairs["id"].copy(),
        values=pairs["value"].copy(),
    )
    return dist, offset + nbytes


def _encode_body(msg: Message) -> tuple[MsgType, bytes]:
    if isinstance(msg, Hello):
        return MsgType.HELLO, b""
    if isinstance(msg, Bye):
        return MsgType.BYE, b""
    if isinstance(msg, DraftMsg):
        fixed = _DRAFT_FIXED.pack(msg.step, msg.token, msg.h, msg.decode_ms)
        return MsgType.DRAFT, fixed + _encode_dist(msg.dist)
    if isinstance(msg, TargetMsg):
        return MsgType.TARGET, _TARGET.pack(
            msg.step,
            msg.target,
            int(msg.accept_l),
            int(msg.accept_r),
            _SIDE_CODE[msg.switch_to],
        )
    if isinstance(msg, SwitchMsg):
        return MsgType.SWITCH, _SWITCH.pack(msg.step, _SIDE_CODE[msg.to])
    if isinstance(msg, ProbeMsg):
        fixed = _PROBE_FIXED.pack(int(msg.kind), msg.seq, msg.t_send, len(msg.payload))
        return MsgType.PROBE, fixed + msg.payload
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def _decode_body(msg_type: int, body: bytes) -> Message:
    if msg_type == MsgType.HELLO or msg_type == MsgType.BYE:
        if body:
            raise FrameLengthError(f"type {msg_type} carries no body")
        return Hello() if msg_type == MsgType.HELLO else Bye()
    if msg_type == MsgType.DRAFT:
        if len(body) < _DRAFT_FIXED.size:
            raise FrameLengthError("draft body truncated")
        step, token, h, decode_ms = _DRAFT_FIXED.unpack_from(body, 0)
        dist, end = _decode_dist(body, _DRAFT_FIXED.size)
        if end != len(body):
            raise FrameLengthError(f"{len(body) - end} trailing bytes in draft")
        return DraftMsg(step=step, token=token, h=h, decode_ms=decode_ms, dist=dist)
    if msg_type == MsgType.TARGET:
        if len(body) != _TARGET.size:
            raise FrameLengthError(f"target body must be {_TARGET.size} bytes")
        step, target, a_l, a_r, switch = _TARGET.unpack(body)
        if switch not in _CODE_SIDE:
            raise FrameLengthError(f"bad switch code {switch}")
        return TargetMsg(
            step=step,
            target=target,
            accept_l=bool(a_l),
            accept_r=bool(a_r),
            switch_to=_CODE_SIDE[switch],
        )
    if msg_type == MsgType.SWITCH:
        if len(body) != _SWITCH.size:
            raise FrameLengthError(f"switch body must be {_SWITCH.size} bytes")
        step, code = _SWITCH.unpack(body)
        side = _CODE_SIDE.get(code)
        if side is None:
            raise FrameLengthError(f"bad side code {code}")
        return SwitchMsg(step=step, to=side)
    if msg_type == MsgType.PROBE:
        if len(body) < _PROBE_FIXED.size:
            raise FrameLengthError("probe body truncated")
        kind, seq, t_send, pay_len = _PROBE_FIXED.unpack_from(body, 0)
        payload = body[_PROBE_FIXED.size :]
        if len(payload) != pay_len:
            raise FrameLengthError("probe payload length mismatch")
        return ProbeMsg(kind=ProbeKind(kind), seq=seq, t_send=t_send, payload=payload)
    raise UnknownMessageTypeError(f"unknown message type {msg_type}")


def encode_frame(msg: Message, codec: Codec = Codec.NONE) -> bytes:
    msg_type, body = _encode_body(msg)
    if codec == Codec.BLOCK:
        body = zlib.compress(body)
    elif codec != Codec.NONE:
        raise UnknownCodecError(f"unknown codec {codec}")
    return HEADER.pack(int(msg_type), int(codec), len(body)) + body


def decode_frame(data: bytes) -> tuple[Message, int]:
    """Parse one frame from the front of data; returns (message, bytes used)."""
    if len(data) < HEADER.size:
        raise TruncatedFrameError(f"{len(data)} bytes is shorter than a header")
    msg_type, codec, body_len = HEADER.unpack_from(data, 0)
    end = HEADER.size + body_len
    if len(data) < end:
        raise TruncatedFrameError(f"body needs {body_len} bytes, have {len(data) - HEADER.size}")
    body = data[HEADER.size : end]
    if codec == Codec.BLOCK:
        try:
            body = zlib.decompress(body)
        except zlib.error as exc:
            raise FrameLengthError(f"bad compressed body: {exc}") from exc
    elif codec != Codec.NONE:
        raise UnknownCodecError(f"unknown codec {codec}")
    return _decode_body(msg_type, body), end


def decode_stream(data: bytes) -> list[Message]:
    """Split a byte string of concatenated frames back into messages."""
    out: list[Message] = []
    offset = 0
    while offset < len(data):
        msg, used = decode_frame(data[offset:])
        out.append(msg)
        offset += used
    return out


class MessageStream:
    """Framed, full-duplex message exchange over a connected socket.

    One reader and one writer thread per connection; concurrent senders are
    serialized by a lock.  Byte counters feed the bandwidth estimate.
    """

    def __init__(self, sock: socket.socket, codec: Codec = Codec.NONE) -> None:
        self._sock = sock
        self._codec = codec
        self._send_lock = threading.Lock()
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, msg: Message) -> int:
        frame = encode_frame(msg, self._codec)
        with self._send_lock:
            self._sock.sendall(frame)
            self.bytes_sent += len(frame)
        return len(frame)

    def _recv_exact(self, n: int, *, mid_frame: bool) -> bytes:
        chunks: list[bytes] = []
        got = 0
        while got < n:
            try:
                chunk = self._sock.recv(n - got)
            except OSError as exc:
                raise ConnectionClosedError(f"socket error: {exc}") from exc
            if not chunk:
                if got == 0 and not mid_frame:
                    raise ConnectionClosedError("peer closed the connection")
                raise TruncatedFrameError(f"stream ended {n - got} bytes short")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv(self) -> Message:
        header = self._recv_exact(HEADER.size, mid_frame=False)
        msg_type, codec, body_len = HEADER.unpack(header)
        body = self._recv_exact(body_len, mid_frame=True) if body_len else b""
        self.bytes_received += HEADER.size + body_len
        if codec == Codec.BLOCK:
            try:
                body = zlib.decompress(body)
            except zlib.error as exc:
                raise FrameLengthError(f"bad compressed body: {exc}") from exc
        elif codec != Codec.NONE:
            raise UnknownCodecError(f"unknown codec {codec}")
        return _decode_body(msg_type, body)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class DelayedInbox:
    """Delivers received messages only after a fixed one-way delay.

    A pump thread drains the socket at full speed and schedules each message
    on a due-time heap, so injected latency never throttles throughput.
    """

    def __init__(self, stream: MessageStream, delay_ms: float = 0.0) -> None:
        self._stream = stream
        self._delay_s = delay_ms / 1000.0
        self._heap: list[tuple[float, int, Message]] = []
        self._seq = 0
        self._cond = threading.Condition()
        self._stopped: Exception | None = None
        self._thread = threading.Thread(target=self._pump, name="inbox-pump", daemon=True)
        self._thread.start()

    def _pump(self) -> None:
        try:
            while True:
                msg = self._stream.recv()
                due = time.perf_counter() + self._delay_s
                with self._cond:
                    heapq.heappush(self._heap, (due, self._seq, msg))
                    self._seq += 1
                    self._cond.notify_all()
                if isinstance(msg, Bye):
                    break
        except TransportError as exc:
            with self._cond:
                self._stopped = exc
                self._cond.notify_all()
        else:
            with self._cond:
                self._stopped = ConnectionClosedError("stream ended after bye")
                self._cond.notify_all()

    def recv(self, timeout: float | None = None) -> Message:
        deadline = None if timeout is None else time.perf_counter() + timeout
        with self._cond:
            while True:
                now = time.perf_counter()
                if self._heap and self._heap[0][0] <= now:
                    return heapq.heappop(self._heap)[2]
                if self._heap:
                    wait = self._heap[0][0] - now
                elif self._stopped is not None:
                    raise self._stopped
                else:
                    wait = None
                if deadline is not None:
                    remaining = deadline - now
                    if remaining <= 0:
                        raise TimeoutError("no message within timeout")
                    wait = remaining if wait is None else min(wait, remaining)
                self._cond.wait(timeout=wait)


def listen_once(
    host: str, port: int, timeout: float = 30.0, codec: Codec = Codec.NONE
) -> tuple[MessageStream, int]:
    """Accept exactly one peer; returns the stream and the bound port."""
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind((host, port))
    bound_port = server.getsockname()[1]
    server.listen(1)
    server.settimeout(timeout)
    try:
        conn, _ = server.accept()
    finally:
        server.close()
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return MessageStream(conn, codec), bound_port


def connect(
    host: str, port: int, timeout: float = 30.0, codec: Codec = Codec.NONE
) -> MessageStream:
    """Connect to a listening peer, retrying briefly while it comes up."""
    deadline = time.perf_counter() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return MessageStream(sock, codec)
        except OSError:
            if time.perf_counter() >= deadline:
                raise
            time.sleep(0.05)
