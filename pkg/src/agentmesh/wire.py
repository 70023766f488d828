"""Length-prefixed JSON framing and canonical encoding.

Every control channel in the mesh speaks the same protocol: a 4-byte
big-endian length followed by that many bytes of UTF-8 JSON holding one
object. Bodies are capped at 2^24 bytes; bulk data goes over dedicated
stream channels instead. Everything that gets hashed or signed is encoded
with canonical_json (sorted keys, no insignificant whitespace) so digests
are reproducible.
"""
from __future__ import annotations

import json
import socket
import struct
from typing import BinaryIO

from .errors import MeshError

MAX_FRAME_BODY = 1 << 24


class FrameError(MeshError):
    code = "FRAME"


class OversizeFrame(FrameError):
    code = "OVERSIZE"


class MalformedFrame(FrameError):
    code = "MALFORMED"


class TruncatedFrame(FrameError):
    code = "TRUNCATED"


def canonical_json(obj) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def encode_frame(message: dict) -> bytes:
    body = canonical_json(message)
    if len(body) > MAX_FRAME_BODY:
        raise OversizeFrame(f"frame body is {len(body)} bytes, cap {MAX_FRAME_BODY}")
    return struct.pack(">I", len(body)) + body


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise TruncatedFrame(f"stream ended after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def decode_frame(stream: BinaryIO) -> dict:
    header = _read_exact(stream, 4)
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BODY:
        raise MalformedFrame(f"declared body of {length} bytes exceeds cap")
    body = _read_exact(stream, length)
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedFrame(str(exc)) from exc
    if not isinstance(obj, dict):
        raise MalformedFrame("frame body must be a JSON object")
    return obj


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise MeshError(f"bad endpoint {endpoint!r}", code="BAD_ENDPOINT")
    return host, int(port)


class FrameConn:
    """A framed message channel over one TCP connection.

    Buffers incoming bytes itself instead of using socket.makefile: a
    makefile buffer is left in an undefined state when a socket timeout
    fires mid-read, and recv() here must stay retryable after timeouts.
    """

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._buffer = b""

    @classmethod
    def connect(cls, endpoint: str, timeout: float = 10.0) -> "FrameConn":
        host, port = parse_endpoint(endpoint)
        sock = socket.create_connection((host, port), timeout=timeout)
        return cls(sock)

    def settimeout(self, timeout: float | None) -> None:
        self.sock.settimeout(timeout)

    def send(self, message: dict) -> None:
        self.sock.sendall(encode_frame(message))

    def _fill(self, n: int, eof_ok: bool) -> bool:
        """Buffer at least n bytes; False on clean EOF when allowed."""
        while len(self._buffer) < n:
            chunk = self.sock.recv(1 << 16)
            if not chunk:
                if eof_ok and not self._buffer:
                    return False
                raise TruncatedFrame(
                    f"stream ended with {len(self._buffer)} of {n} bytes buffered"
                )
            self._buffer += chunk
        return True

    def _take(self, n: int) -> bytes:
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out

    def recv(self) -> dict | None:
        """Next frame, or None when the peer closed cleanly at a boundary."""
        if not self._fill(4, eof_ok=True):
            return None
        (length,) = struct.unpack(">I", self._buffer[:4])
        if length > MAX_FRAME_BODY:
            raise MalformedFrame(f"declared body of {length} bytes exceeds cap")
        self._fill(4 + length, eof_ok=False)
        self._take(4)
        body = self._take(length)
        try:
            obj = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise MalformedFrame(str(exc)) from exc
        if not isinstance(obj, dict):
            raise MalformedFrame("frame body must be a JSON object")
        return obj

    def request(self, message: dict) -> dict:
        self.send(message)
        reply = self.recv()
        if reply is None:
            raise TruncatedFrame("connection closed before reply")
        return reply

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self) -> "FrameConn":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
