"""Synthetic source domain, affine style-shifted client domains, few-shot episodes.

Each class has a smooth template: a seeded low-resolution random grid,
bilinearly upsampled and standardized to zero mean and unit std. Samples are
the template plus i.i.d. Gaussian pixel noise. Client domains apply an
image-global contrast/brightness change ``x' = gain * x + bias``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CorruptMessage, IncompleteMessage, InvalidArgument, UnsupportedVersion, WrongProtocol
from .rng import derive_rng


@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 5
    side: int = 16
    n_train: int = 4000
    n_test: int = 1000
    grid: int = 4
    noise_std: float = 0.3
    k_shot: int = 5
    q_query: int = 20
    pool_per_class: int = 50
    gain_range: tuple[float, float] = (0.4, 1.8)
    bias_range: tuple[float, float] = (-0.8, 0.8)
    seed: int = 42

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidArgument("data.classes must be >= 2")
        if self.side < 4 or self.grid < 2 or self.grid > self.side:
            raise InvalidArgument("need 2 <= data.grid <= data.side and data.side >= 4")
        if self.noise_std < 0:
            raise InvalidArgument("data.noise_std must be >= 0")
        if self.k_shot < 1 or self.q_query < 1:
            raise InvalidArgument("data.k_shot and data.q_query must be >= 1")
        if self.n_train < 20 * self.n_classes * self.k_shot:
            raise InvalidArgument("data.n_train must be >= 20 * classes * k_shot")
        if self.n_test < self.n_classes:
            raise InvalidArgument("data.n_test must be >= classes")
        if self.pool_per_class < self.k_shot + self.q_query:
            raise InvalidArgument("data.pool_per_class must be >= k_shot + q_query")
        lo, hi = self.gain_range
        if not (0.2 <= lo <= hi <= 2.5):
            raise InvalidArgument("gain range must lie within [0.2, 2.5]")
        lo, hi = self.bias_range
        if not (-1 <= lo <= hi <= 1):
            raise InvalidArgument("bias range must lie within [-1, 1]")
        if self.seed < 0:
            raise InvalidArgument("seed must be non-negative")


@dataclass(frozen=True)
class DomainParams:
    client_id: int
    gain: float
    bias: float
    seed: int

    def __post_init__(self):
        if not 0.2 <= self.gain <= 2.5:
            raise InvalidArgument(f"gain {self.gain} outside [0.2, 2.5]")
        if not -1 <= self.bias <= 1:
            raise InvalidArgument(f"bias {self.bias} outside [-1, 1]")


@dataclass
class Dataset:
    images: np.ndarray  # n x 1 x side x side, float32
    labels: np.ndarray  # n, int64

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise InvalidArgument("images must be n x c x h x w with one label each")
        if len(self.labels) and self.labels.min() < 0:
            raise InvalidArgument("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx])

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.concatenate([self.images, other.images]), np.concatenate([self.labels, other.labels]))

    def equals(self, other: "Dataset") -> bool:
        return np.array_equal(self.images, other.images) and np.array_equal(self.labels, other.labels)


@dataclass
class Episode:
    support: Dataset
    query: Dataset
    support_idx: np.ndarray
    query_idx: np.ndarray


def upsample_bilinear(grid: np.ndarray, side: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a square grid to side x side."""
    g = grid.shape[0]
    src = np.linspace(0, g - 1, side)
    base = np.arange(g)
    rows = np.stack([np.interp(src, base, grid[:, j]) for j in range(g)], axis=1)  # side x g
    return np.stack([np.interp(src, base, rows[i]) for i in range(side)], axis=0)


def make_templates(cfg: DataConfig) -> np.ndarray:
    rng = derive_rng(cfg.seed, "templates")
    out = np.empty((cfg.n_classes, cfg.side, cfg.side))
    for c in range(cfg.n_classes):
        t = upsample_bilinear(rng.standard_normal((cfg.grid, cfg.grid)), cfg.side)
        out[c] = (t - t.mean()) / t.std()
    return out.astype(np.float32)


def sample_from_templates(templates: np.ndarray, per_class: int, noise_std: float, rng) -> Dataset:
    """Class-balanced samples, labels cycling 0, 1, ..., L-1, 0, ..."""
    n_classes, side, _ = templates.shape
    n = per_class * n_classes
    labels = np.arange(n) % n_classes
    noise = rng.standard_normal((n, 1, side, side)) * noise_std
    images = (templates[labels][:, None] + noise).astype(np.float32)
    return Dataset(images, labels.astype(np.int64))


def gen_source(cfg: DataConfig):
    """Returns ``(train, test, templates)`` for the source domain."""
    templates = make_templates(cfg)
    train = sample_from_templates(templates, cfg.n_train // cfg.n_classes, cfg.noise_std,
                                  derive_rng(cfg.seed, "source-train"))
    test = sample_from_templates(templates, cfg.n_test // cfg.n_classes, cfg.noise_std,
                                 derive_rng(cfg.seed, "source-test"))
    return train, test, templates


def gen_client_pool(cfg: DataConfig, templates: np.ndarray, client_id: int) -> Dataset:
    """Unshifted samples private to one client; shift them with :func:`apply_style_shift`."""
    return sample_from_templates(templates, cfg.pool_per_class, cfg.noise_std,
                                 derive_rng(cfg.seed, "client-pool", client_id))


def gen_domains(m: int, seed: int, gain_range=(0.4, 1.8), bias_range=(-0.8, 0.8), client_ids=None) -> list[DomainParams]:
    """One (gain, bias) pair per client, each from its own substream."""
    if m < 1:
        raise InvalidArgument("need at least one client")
    ids = list(range(m)) if client_ids is None else list(client_ids)
    if len(ids) != m:
        raise InvalidArgument("client_ids must have m entries")
    out = []
    for cid in ids:
        rng = derive_rng(seed, "domain", cid)
        gain = float(rng.uniform(*gain_range))
        bias = float(rng.uniform(*bias_range))
        out.append(DomainParams(cid, gain, bias, seed))
    return out


def apply_style_shift(d: Dataset, p: DomainParams) -> Dataset:
    images = (np.float32(p.gain) * d.images + np.float32(p.bias)).astype(np.float32)
    return Dataset(images, d.labels.copy())


def sample_episode(d: Dataset, k: int, q: int, rng, n_classes: int | None = None) -> Episode:
    """Draw k support and q query samples per class without replacement."""
    n_classes = int(d.labels.max()) + 1 if n_classes is None else n_classes
    sup, qry = [], []
    for c in range(n_classes):
        members = np.flatnonzero(d.labels == c)
        if len(members) < k + q:
            raise InvalidArgument(f"class {c} has {len(members)} samples, need {k + q}")
        pick = rng.permutation(members)[: k + q]
        sup.append(np.sort(pick[:k]))
        qry.append(np.sort(pick[k:]))
    sup_idx, qry_idx = np.concatenate(sup), np.concatenate(qry)
    return Episode(d.subset(sup_idx), d.subset(qry_idx), sup_idx, qry_idx)


# -- FMXD v1 ---------------------------------------------------------------

FMXD_MAGIC = b"FMXD"
FMXD_VERSION = 1
_FMXD_HEAD = struct.Struct("<4sHIHH")


def encode_dataset(d: Dataset, n_classes: int) -> bytes:
    n, c, h, w = d.images.shape
    if c != 1 or h != w:
        raise InvalidArgument("FMXD stores single-channel square images")
    body = _FMXD_HEAD.pack(FMXD_MAGIC, FMXD_VERSION, n, n_classes, h)
    body += d.images.astype("<f4").tobytes() + d.labels.astype("<u2").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_dataset(buf: bytes) -> tuple[Dataset, int]:
    """Returns ``(dataset, n_classes)``."""
    if len(buf) < 4:
        raise IncompleteMessage("FMXD file too short")
    if buf[:4] != FMXD_MAGIC:
        raise WrongProtocol("not an FMXD file")
    if len(buf) < _FMXD_HEAD.size + 4:
        raise IncompleteMessage("FMXD header truncated")
    _, version, n, n_classes, side = _FMXD_HEAD.unpack_from(buf)
    if version != FMXD_VERSION:
        raise UnsupportedVersion(f"FMXD version {version}")
    expected = _FMXD_HEAD.size + 4 * n * side * side + 2 * n + 4
    if len(buf) < expected:
        raise IncompleteMessage(f"FMXD file has {len(buf)} bytes, expected {expected}")
    if len(buf) > expected or zlib.crc32(buf[:-4]) != struct.unpack("<I", buf[-4:])[0]:
        raise CorruptMessage("FMXD checksum mismatch")
    off = _FMXD_HEAD.size
    images = np.frombuffer(buf, "<f4", n * side * side, off).astype(np.float32).reshape(n, 1, side, side)
    off += 4 * n * side * side
    labels = np.frombuffer(buf, "<u2", n, off).astype(np.int64)
    if n and labels.max() >= n_classes:
        raise CorruptMessage("FMXD label out of range")
    return Dataset(images, labels), n_classes


def save_dataset(path, d: Dataset, n_classes: int) -> None:
    with open(path, "wb") as f:
        f.write(encode_dataset(d, n_classes))


def load_dataset(path) -> tuple[Dataset, int]:
    with open(path, "rb") as f:
        return decode_dataset(f.read())
