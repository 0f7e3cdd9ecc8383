"""FMX1 binary frames for coefficient exchange.

Layout (little-endian)::

    magic    4s   b"FMX1"
    version  u16  1
    type     u16  1 = client update, 2 = global coefficients
    round    u32
    client   u32  0xFFFFFFFF for global coefficients
    samples  u32  |D_Ti| for updates, total I for global coefficients
    n_layers u16
    coeffs   n_layers x 4 x f32   (c_s_mu, c_t_mu, c_s_var, c_t_var)
    crc      u32  CRC-32 over every preceding byte

Decoding checks, in order: magic, version, declared length, CRC, message type.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CorruptMessage, IncompleteMessage, InvalidArgument, UnsupportedVersion, WrongProtocol

MAGIC = b"FMX1"
VERSION = 1
MSG_CLIENT_UPDATE = 1
MSG_GLOBAL = 2
GLOBAL_CLIENT_ID = 0xFFFFFFFF

HEADER = struct.Struct("<4sHHIIIH")
CRC = struct.Struct("<I")
assert HEADER.size == 22


def frame_length(n_layers: int) -> int:
    return HEADER.size + 16 * n_layers + CRC.size


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    round_idx: int
    client_id: int
    n_samples: int
    coefficients: np.ndarray  # (n_layers, 4) float32

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidArgument("sample count must be >= 1")
        c = np.asarray(self.coefficients)
        if c.ndim != 2 or c.shape[1] != 4:
            raise InvalidArgument("coefficients must have shape (n_layers, 4)")
        if not np.all(np.isfinite(c)):
            raise InvalidArgument("coefficients must be finite")

    def __eq__(self, other):
        if not isinstance(other, ClientUpdate):
            return NotImplemented
        return (
            (self.round_idx, self.client_id, self.n_samples) == (other.round_idx, other.client_id, other.n_samples)
            and self.coefficients.dtype == other.coefficients.dtype
            and np.array_equal(self.coefficients, other.coefficients)
        )


@dataclass(frozen=True, eq=False)
class GlobalCoefficients:
    round_idx: int
    coefficients: np.ndarray
    n_samples: int = 1

    def __eq__(self, other):
        if not isinstance(other, GlobalCoefficients):
            return NotImplemented
        return (
            (self.round_idx, self.n_samples) == (other.round_idx, other.n_samples)
            and np.array_equal(self.coefficients, other.coefficients)
        )


def _encode(msg_type, round_idx, client_id, n_samples, coeffs) -> bytes:
    coeffs = np.asarray(coeffs, dtype="<f4")
    body = HEADER.pack(MAGIC, VERSION, msg_type, round_idx, client_id, n_samples, coeffs.shape[0])
    body += coeffs.tobytes()
    return body + CRC.pack(zlib.crc32(body))


def _decode(buf: bytes):
    buf = bytes(buf)
    if len(buf) < len(MAGIC):
        if MAGIC.startswith(buf):
            raise IncompleteMessage(f"{len(buf)} bytes is shorter than the magic")
        raise WrongProtocol("bad magic")
    if buf[:4] != MAGIC:
        raise WrongProtocol(f"bad magic {buf[:4]!r}")
    if len(buf) < 6:
        raise IncompleteMessage("frame truncated inside the header")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} is not supported")
    if len(buf) < HEADER.size:
        raise IncompleteMessage("frame truncated inside the header")
    _, _, msg_type, round_idx, client_id, n_samples, n_layers = HEADER.unpack_from(buf)
    expected = frame_length(n_layers)
    if len(buf) < expected:
        raise IncompleteMessage(f"frame has {len(buf)} of {expected} bytes")
    if len(buf) > expected:
        raise CorruptMessage(f"frame has {len(buf) - expected} trailing bytes")
    (crc,) = CRC.unpack_from(buf, expected - CRC.size)
    if zlib.crc32(buf[: expected - CRC.size]) != crc:
        raise CorruptMessage("CRC mismatch")
    coeffs = np.frombuffer(buf, "<f4", 4 * n_layers, HEADER.size).astype(np.float32).reshape(n_layers, 4)
    return msg_type, round_idx, client_id, n_samples, coeffs


def encode_client_update(u: ClientUpdate) -> bytes:
    return _encode(MSG_CLIENT_UPDATE, u.round_idx, u.client_id, u.n_samples, u.coefficients)


def decode_client_update(buf: bytes) -> ClientUpdate:
    msg_type, round_idx, client_id, n_samples, coeffs = _decode(buf)
    if msg_type != MSG_CLIENT_UPDATE:
        raise CorruptMessage(f"expected a client update, got message type {msg_type}")
    try:
        return ClientUpdate(round_idx, client_id, n_samples, coeffs)
    except InvalidArgument as e:
        raise CorruptMessage(str(e)) from e


def encode_global(g: GlobalCoefficients) -> bytes:
    return _encode(MSG_GLOBAL, g.round_idx, GLOBAL_CLIENT_ID, g.n_samples, g.coefficients)


def decode_global(buf: bytes) -> GlobalCoefficients:
    msg_type, round_idx, client_id, n_samples, coeffs = _decode(buf)
    if msg_type != MSG_GLOBAL or client_id != GLOBAL_CLIENT_ID:
        raise CorruptMessage("not a global-coefficients message")
    return GlobalCoefficients(round_idx, coeffs, n_samples)
