"""FMXM v1 model files.

Layout (little-endian)::

    magic        4s   b"FMXM"
    version      u16  1
    n_layers     u16
    input shape  3 x u16 (channels, height, width)
    n_classes    u16
    temperature  f64
    n_layers descriptors, each a u8 kind followed by its fields:
        1 conv       u16 in, u16 out, u8 kernel, u8 stride, u8 padding
        2 batchnorm  u16 channels, f64 eps, f64 momentum
        3 relu
        4 global-avg-pool
    tensors      f32, in layer order: conv weight, conv bias; BN gamma,
                 beta, running mean, running var; then the prototypes
    crc          u32  CRC-32 over every preceding byte
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CorruptMessage, IncompleteMessage, UnsupportedVersion, WrongProtocol
from .model import BatchNorm, Conv, GlobalAvgPool, ModelParams, ModelSpec, ReLU

MAGIC = b"FMXM"
VERSION = 1
_HEAD = struct.Struct("<4sHH3HHd")
_CONV = struct.Struct("<HHBBB")
_BN = struct.Struct("<Hdd")
KIND_CONV, KIND_BN, KIND_RELU, KIND_GAP = 1, 2, 3, 4


def _tensor_order(spec: ModelSpec, params: ModelParams) -> list[np.ndarray]:
    out = []
    ci = bi = 0
    for layer in spec.layers:
        if isinstance(layer, Conv):
            out += [params.conv_w[ci], params.conv_b[ci]]
            ci += 1
        elif isinstance(layer, BatchNorm):
            out += [params.bn_gamma[bi], params.bn_beta[bi], params.bn_mean[bi], params.bn_var[bi]]
            bi += 1
    out.append(params.prototypes)
    return out


def encode_model(spec: ModelSpec, params: ModelParams) -> bytes:
    params.check(spec)
    parts = [_HEAD.pack(MAGIC, VERSION, len(spec.layers), *spec.input_shape, spec.n_classes, spec.temperature)]
    for layer in spec.layers:
        if isinstance(layer, Conv):
            parts.append(bytes([KIND_CONV]) + _CONV.pack(layer.in_channels, layer.out_channels,
                                                         layer.kernel, layer.stride, layer.padding))
        elif isinstance(layer, BatchNorm):
            parts.append(bytes([KIND_BN]) + _BN.pack(layer.channels, layer.eps, layer.momentum))
        elif isinstance(layer, ReLU):
            parts.append(bytes([KIND_RELU]))
        else:
            parts.append(bytes([KIND_GAP]))
    for t in _tensor_order(spec, params):
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _need(buf, off, n):
    if off + n > len(buf) - 4:
        raise IncompleteMessage("FMXM file truncated")


def decode_model(buf: bytes) -> tuple[ModelSpec, ModelParams]:
    if len(buf) < 4:
        raise IncompleteMessage("FMXM file too short")
    if buf[:4] != MAGIC:
        raise WrongProtocol("not an FMXM file")
    if len(buf) < _HEAD.size + 4:
        raise IncompleteMessage("FMXM header truncated")
    _, version, n_layers, c, h, w, n_classes, temperature = _HEAD.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersion(f"FMXM version {version}")
    if zlib.crc32(buf[:-4]) != struct.unpack("<I", buf[-4:])[0]:
        raise CorruptMessage("FMXM checksum mismatch")
    off = _HEAD.size
    layers = []
    for _ in range(n_layers):
        _need(buf, off, 1)
        kind = buf[off]
        off += 1
        if kind == KIND_CONV:
            _need(buf, off, _CONV.size)
            layers.append(Conv(*_CONV.unpack_from(buf, off)))
            off += _CONV.size
        elif kind == KIND_BN:
            _need(buf, off, _BN.size)
            layers.append(BatchNorm(*_BN.unpack_from(buf, off)))
            off += _BN.size
        elif kind == KIND_RELU:
            layers.append(ReLU())
        elif kind == KIND_GAP:
            layers.append(GlobalAvgPool())
        else:
            raise CorruptMessage(f"unknown layer kind {kind}")
    spec = ModelSpec((c, h, w), tuple(layers), n_classes, temperature)

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        _need(buf, off, 4 * n)
        arr = np.frombuffer(buf, "<f4", n, off).astype(np.float32).reshape(shape)
        off += 4 * n
        return arr

    d = {}
    ci = bi = 0
    for layer in spec.layers:
        if isinstance(layer, Conv):
            d[f"conv{ci}.weight"] = take((layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
            d[f"conv{ci}.bias"] = take((layer.out_channels,))
            ci += 1
        elif isinstance(layer, BatchNorm):
            for name in ("gamma", "beta", "running_mean", "running_var"):
                d[f"bn{bi}.{name}"] = take((layer.channels,))
            bi += 1
    d["prototypes"] = take((spec.n_classes, spec.feature_dim))
    if off != len(buf) - 4:
        raise CorruptMessage("FMXM file has trailing bytes")
    params = ModelParams.from_dict(d)
    params.check(spec)
    return spec, params


def save_model(path, spec: ModelSpec, params: ModelParams) -> None:
    with open(path, "wb") as f:
        f.write(encode_model(spec, params))


def load_model(path) -> tuple[ModelSpec, ModelParams]:
    with open(path, "rb") as f:
        return decode_model(f.read())
