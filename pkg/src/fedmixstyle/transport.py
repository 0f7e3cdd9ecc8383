"""Ordered, reliable byte-stream transports carrying length-prefixed frames.

Every frame goes on the stream as a u32 little-endian length followed by the
frame bytes. ``InProcTransport`` keeps the stream in memory;
``LoopbackTransport`` pushes the same bytes through a TCP connection on
127.0.0.1. Either one can be passed to ``run_round``.
"""

from __future__ import annotations

import socket
import struct
import threading

from .errors import IncompleteMessage

PREFIX = struct.Struct("<I")


def frame(payload: bytes) -> bytes:
    return PREFIX.pack(len(payload)) + payload


class StreamReader:
    """Splits a byte stream back into frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf += data
        out = []
        while len(self._buf) >= PREFIX.size:
            (n,) = PREFIX.unpack_from(self._buf)
            if len(self._buf) < PREFIX.size + n:
                break
            out.append(bytes(self._buf[PREFIX.size : PREFIX.size + n]))
            del self._buf[: PREFIX.size + n]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


class InProcTransport:
    def __init__(self):
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._stream = bytearray()
        self._reader = StreamReader()
        self._frames: list[bytes] = []
        self.bytes_sent = 0

    def send(self, payload: bytes) -> None:
        data = frame(payload)
        with self._cond:
            self._stream += data
            self.bytes_sent += len(data)
            self._cond.notify_all()

    def recv(self, timeout: float | None = 30.0) -> bytes:
        with self._cond:
            while True:
                if self._stream:
                    self._frames += self._reader.feed(bytes(self._stream))
                    self._stream.clear()
                if self._frames:
                    return self._frames.pop(0)
                if not self._cond.wait(timeout):
                    raise IncompleteMessage("timed out waiting for a frame")

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LoopbackTransport:
    """Sender and receiver ends of one TCP connection on 127.0.0.1."""

    def __init__(self):
        server = socket.create_server(("127.0.0.1", 0))
        self._tx = socket.create_connection(server.getsockname())
        self._rx, _ = server.accept()
        server.close()
        self._send_lock = threading.Lock()
        self._reader = StreamReader()
        self._frames: list[bytes] = []
        self.bytes_sent = 0

    def send(self, payload: bytes) -> None:
        data = frame(payload)
        with self._send_lock:
            self._tx.sendall(data)
            self.bytes_sent += len(data)

    def recv(self, timeout: float | None = 30.0) -> bytes:
        self._rx.settimeout(timeout)
        while not self._frames:
            try:
                chunk = self._rx.recv(65536)
            except socket.timeout as e:
                raise IncompleteMessage("timed out waiting for a frame") from e
            if not chunk:
                raise IncompleteMessage("connection closed mid-stream")
            self._frames += self._reader.feed(chunk)
        return self._frames.pop(0)

    def close(self) -> None:
        self._tx.close()
        self._rx.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_transport(kind: str):
    if kind == "inproc":
        return InProcTransport()
    if kind == "loopback":
        return LoopbackTransport()
    raise ValueError(f"unknown transport {kind!r}")
