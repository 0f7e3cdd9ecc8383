"""Fixed-topology CNN + batch norm + nearest-centroid classifier.

The model is described by a :class:`ModelSpec` (an ordered tuple of layer
descriptors) and its numbers live in :class:`ModelParams`. ``forward`` runs
the layer sequence in one of three BN modes:

* ``"train-server"``: batch statistics, running statistics updated by momentum
* ``"eval"``: running statistics
* ``"adapt"``: caller-supplied :class:`EffectiveStats`, used verbatim

``backward`` differentiates the mean cross-entropy through whichever
statistics the forward pass used.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import layers as L
from .errors import InvalidArgument, InvalidState, TrainingDiverged
from .rng import derive_rng

log = logging.getLogger(__name__)

MODES = ("train-server", "eval", "adapt")


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


Layer = Union[Conv, BatchNorm, ReLU, GlobalAvgPool]


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]
    n_classes: int
    temperature: float = 1.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidArgument("need at least two classes")
        if not self.temperature > 0:
            raise InvalidArgument("temperature must be positive")
        pools = [i for i, layer in enumerate(self.layers) if isinstance(layer, GlobalAvgPool)]
        if pools != [len(self.layers) - 1]:
            raise InvalidArgument("exactly one global-avg-pool is required, as the last layer")
        c, h, w = self.input_shape
        for layer in self.layers:
            if isinstance(layer, Conv):
                if layer.in_channels != c:
                    raise InvalidArgument(f"conv expects {layer.in_channels} channels, gets {c}")
                h = L.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
                w = L.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
                if h < 1 or w < 1:
                    raise InvalidArgument("conv output collapses to zero size")
                c = layer.out_channels
            elif isinstance(layer, BatchNorm):
                if layer.channels != c:
                    raise InvalidArgument(f"batchnorm has {layer.channels} channels, input has {c}")
                if not (layer.eps > 0 and 0 < layer.momentum <= 1):
                    raise InvalidArgument("batchnorm needs eps > 0 and momentum in (0, 1]")
            elif not isinstance(layer, (ReLU, GlobalAvgPool)):
                raise InvalidArgument(f"unknown layer {layer!r}")

    @property
    def feature_dim(self) -> int:
        return [layer for layer in self.layers if isinstance(layer, Conv)][-1].out_channels

    @property
    def convs(self) -> list[Conv]:
        return [layer for layer in self.layers if isinstance(layer, Conv)]

    @property
    def batchnorms(self) -> list[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    @property
    def n_bn_layers(self) -> int:
        return len(self.batchnorms)


def micro_cnn(n_classes: int = 5, side: int = 16, temperature: float = 1.0) -> ModelSpec:
    """Three conv/BN/ReLU blocks (8, 16, 32 channels) and global average pooling.

    The first convolution is unpadded so that an image-wide gain/bias shift
    reaches the first BN layer as an exact per-channel affine map.
    """
    return ModelSpec(
        input_shape=(1, side, side),
        layers=(
            Conv(1, 8, 3, 1, 0), BatchNorm(8), ReLU(),
            Conv(8, 16, 3, 2, 1), BatchNorm(16), ReLU(),
            Conv(16, 32, 3, 2, 1), BatchNorm(32), ReLU(),
            GlobalAvgPool(),
        ),
        n_classes=n_classes,
        temperature=temperature,
    )


@dataclass
class ModelParams:
    conv_w: list[np.ndarray]
    conv_b: list[np.ndarray]
    bn_gamma: list[np.ndarray]
    bn_beta: list[np.ndarray]
    bn_mean: list[np.ndarray]
    bn_var: list[np.ndarray]
    prototypes: np.ndarray

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """All tensors in layer order: conv (weight, bias), BN (gamma, beta,
        running mean, running var), then the prototypes."""
        out = []
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out.append((f"conv{i}.weight", w))
            out.append((f"conv{i}.bias", b))
            if i < len(self.bn_gamma):
                out += [
                    (f"bn{i}.gamma", self.bn_gamma[i]),
                    (f"bn{i}.beta", self.bn_beta[i]),
                    (f"bn{i}.running_mean", self.bn_mean[i]),
                    (f"bn{i}.running_var", self.bn_var[i]),
                ]
        out.append(("prototypes", self.prototypes))
        return out

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_arrays())

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "ModelParams":
        n_conv = sum(1 for k in d if k.endswith(".weight"))
        n_bn = sum(1 for k in d if k.endswith(".gamma"))
        return cls(
            conv_w=[d[f"conv{i}.weight"] for i in range(n_conv)],
            conv_b=[d[f"conv{i}.bias"] for i in range(n_conv)],
            bn_gamma=[d[f"bn{i}.gamma"] for i in range(n_bn)],
            bn_beta=[d[f"bn{i}.beta"] for i in range(n_bn)],
            bn_mean=[d[f"bn{i}.running_mean"] for i in range(n_bn)],
            bn_var=[d[f"bn{i}.running_var"] for i in range(n_bn)],
            prototypes=d["prototypes"],
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_dict({k: v.copy() for k, v in self.named_arrays()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams.from_dict({k: v.astype(dtype) for k, v in self.named_arrays()})

    def with_prototypes(self, prototypes: np.ndarray) -> "ModelParams":
        return dataclasses.replace(self, prototypes=prototypes)

    def equals(self, other: "ModelParams") -> bool:
        a, b = self.named_arrays(), other.named_arrays()
        return len(a) == len(b) and all(
            ka == kb and va.dtype == vb.dtype and np.array_equal(va, vb) for (ka, va), (kb, vb) in zip(a, b)
        )

    def check(self, spec: ModelSpec) -> None:
        convs, bns = spec.convs, spec.batchnorms
        if len(self.conv_w) != len(convs) or len(self.bn_gamma) != len(bns):
            raise InvalidArgument("parameter layer counts do not match the architecture")
        for w, b, layer in zip(self.conv_w, self.conv_b, convs):
            want = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            if w.shape != want or b.shape != (layer.out_channels,):
                raise InvalidArgument(f"conv parameter shape {w.shape} != {want}")
        for j, layer in enumerate(bns):
            for arr in (self.bn_gamma[j], self.bn_beta[j], self.bn_mean[j], self.bn_var[j]):
                if arr.shape != (layer.channels,):
                    raise InvalidArgument("batchnorm parameter shape mismatch")
            if not np.all(self.bn_var[j] > 0):
                raise InvalidArgument("running variances must be strictly positive")
        if self.prototypes.shape != (spec.n_classes, spec.feature_dim):
            raise InvalidArgument("prototype matrix shape mismatch")


PRETRAIN_KEYS = ("weight", "bias", "gamma", "beta", "prototypes")


def trainable_pretrain(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: v for k, v in params.named_arrays() if k.rsplit(".", 1)[-1] in PRETRAIN_KEYS}


def init_params(spec: ModelSpec, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """Fan-balanced uniform conv weights, zero biases, identity BN, zero prototypes."""
    conv_w, conv_b = [], []
    for layer in spec.convs:
        fan_in = layer.in_channels * layer.kernel**2
        fan_out = layer.out_channels * layer.kernel**2
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        conv_w.append(rng.uniform(-limit, limit, size=shape).astype(dtype))
        conv_b.append(np.zeros(layer.out_channels, dtype=dtype))
    bns = spec.batchnorms
    return ModelParams(
        conv_w=conv_w,
        conv_b=conv_b,
        bn_gamma=[np.ones(b.channels, dtype=dtype) for b in bns],
        bn_beta=[np.zeros(b.channels, dtype=dtype) for b in bns],
        bn_mean=[np.zeros(b.channels, dtype=dtype) for b in bns],
        bn_var=[np.ones(b.channels, dtype=dtype) for b in bns],
        prototypes=np.zeros((spec.n_classes, spec.feature_dim), dtype=dtype),
    )


@dataclass
class EffectiveStats:
    """Per-BN-layer statistics fed to batch norm in adapt mode."""

    mean: list[np.ndarray]
    var: list[np.ndarray]

    def __len__(self):
        return len(self.mean)


@dataclass
class ForwardCache:
    mode: str
    n_layers: int
    inputs: list[np.ndarray]
    bn_used: list[tuple[np.ndarray, np.ndarray]]
    bn_xhat: list[np.ndarray]
    bn_inv: list[np.ndarray]
    features: np.ndarray
    new_running: EffectiveStats | None = None


@dataclass
class GradientSet:
    conv_w: list[np.ndarray]
    conv_b: list[np.ndarray]
    bn_gamma: list[np.ndarray]
    bn_beta: list[np.ndarray]
    prototypes: np.ndarray
    inputs: np.ndarray
    # d loss / d (mean, var) actually used by each BN layer; None in train-server mode
    stat_mean: list[np.ndarray] | None = None
    stat_var: list[np.ndarray] | None = None

    def pretrain_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"conv{i}.weight"] = w
            out[f"conv{i}.bias"] = b
        for j, (g, b) in enumerate(zip(self.bn_gamma, self.bn_beta)):
            out[f"bn{j}.gamma"] = g
            out[f"bn{j}.beta"] = b
        out["prototypes"] = self.prototypes
        return out


def forward(
    spec: ModelSpec,
    params: ModelParams,
    x: np.ndarray,
    mode: str = "eval",
    stats_override: EffectiveStats | None = None,
    bn_momentum: float | None = None,
):
    """Run the model on a batch. Returns ``(features, logits, cache)``.

    Parameters are never mutated; in train-server mode the updated running
    statistics are returned in ``cache.new_running``.
    """
    if mode not in MODES:
        raise InvalidArgument(f"unknown mode {mode!r}")
    if mode == "adapt":
        if stats_override is None or len(stats_override) != spec.n_bn_layers:
            raise InvalidState("adapt mode needs statistics for every BN layer")
    elif stats_override is not None:
        raise InvalidArgument("stats_override is only valid in adapt mode")
    if x.ndim != 4 or x.shape[1:] != tuple(spec.input_shape):
        raise InvalidArgument(f"input shape {x.shape[1:]} != {spec.input_shape}")

    dt = x.dtype
    inputs, used, xhats, invs = [], [], [], []
    new_mean, new_var = [], []
    h = x
    ci = bi = 0
    for layer in spec.layers:
        inputs.append(h)
        if isinstance(layer, Conv):
            h = L.conv2d(h, params.conv_w[ci].astype(dt, copy=False), params.conv_b[ci].astype(dt, copy=False),
                         layer.stride, layer.padding)
            ci += 1
        elif isinstance(layer, BatchNorm):
            if mode == "train-server":
                mu, var = L.batch_moments(h)
                m = layer.momentum if bn_momentum is None else bn_momentum
                new_mean.append(((1 - m) * params.bn_mean[bi] + m * mu).astype(params.bn_mean[bi].dtype))
                new_var.append(((1 - m) * params.bn_var[bi] + m * var).astype(params.bn_var[bi].dtype))
            elif mode == "eval":
                mu, var = params.bn_mean[bi], params.bn_var[bi]
            else:
                mu, var = stats_override.mean[bi], stats_override.var[bi]
            mu, var = mu.astype(dt, copy=False), var.astype(dt, copy=False)
            h, xhat, inv = L.bn_forward_cached(h, mu, var, params.bn_gamma[bi], params.bn_beta[bi], layer.eps)
            used.append((mu, var))
            xhats.append(xhat)
            invs.append(inv)
            bi += 1
        elif isinstance(layer, ReLU):
            h = np.maximum(h, 0)
        else:
            h = L.global_avg_pool(h)
    features = h
    logits = L.nearest_centroid_logits(features, params.prototypes.astype(dt, copy=False), spec.temperature)
    cache = ForwardCache(
        mode=mode,
        n_layers=len(spec.layers),
        inputs=inputs,
        bn_used=used,
        bn_xhat=xhats,
        bn_inv=invs,
        features=features,
        new_running=EffectiveStats(new_mean, new_var) if mode == "train-server" else None,
    )
    return features, logits, cache


def backward(spec: ModelSpec, params: ModelParams, cache: ForwardCache, dlogits: np.ndarray) -> GradientSet:
    if cache.n_layers != len(spec.layers) or len(cache.bn_used) != spec.n_bn_layers:
        raise InvalidState("forward cache does not match the model spec")
    if dlogits.shape != (cache.features.shape[0], spec.n_classes):
        raise InvalidState("dlogits shape does not match the cached batch")
    dt = cache.features.dtype
    dh, dproto = L.nearest_centroid_backward(
        cache.features, params.prototypes.astype(dt, copy=False), spec.temperature, dlogits.astype(dt, copy=False)
    )
    n_conv, n_bn = len(spec.convs), spec.n_bn_layers
    dconv_w, dconv_b = [None] * n_conv, [None] * n_conv
    dgamma, dbeta = [None] * n_bn, [None] * n_bn
    dmu_used, dvar_used = [None] * n_bn, [None] * n_bn
    ci, bi = n_conv, n_bn
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[idx]
        x_in = cache.inputs[idx]
        if isinstance(layer, GlobalAvgPool):
            _, _, hh, ww = x_in.shape
            dh = np.broadcast_to(dh[:, :, None, None] / dt.type(hh * ww), x_in.shape).copy()
        elif isinstance(layer, ReLU):
            dh = dh * (x_in > 0)
        elif isinstance(layer, BatchNorm):
            bi -= 1
            xhat, inv = cache.bn_xhat[bi], cache.bn_inv[bi]
            gamma = params.bn_gamma[bi].astype(dt, copy=False)
            dgamma[bi] = (dh * xhat).sum(axis=(0, 2, 3))
            dbeta[bi] = dh.sum(axis=(0, 2, 3))
            dxhat = dh * gamma[None, :, None, None]
            inv4 = inv[None, :, None, None]
            if cache.mode == "train-server":
                m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dh = inv4 * (dxhat - m1 - xhat * m2)
            else:
                dh = dxhat * inv4
                dmu_used[bi] = -(dxhat.sum(axis=(0, 2, 3))) * inv
                dvar_used[bi] = dt.type(-0.5) * (dxhat * xhat).sum(axis=(0, 2, 3)) * inv * inv
        else:
            ci -= 1
            dh, dconv_w[ci], dconv_b[ci] = L.conv2d_backward(
                x_in, params.conv_w[ci].astype(dt, copy=False), dh, layer.stride, layer.padding
            )
    frozen = cache.mode != "train-server"
    return GradientSet(
        conv_w=dconv_w,
        conv_b=dconv_b,
        bn_gamma=dgamma,
        bn_beta=dbeta,
        prototypes=dproto,
        inputs=dh,
        stat_mean=dmu_used if frozen else None,
        stat_var=dvar_used if frozen else None,
    )


StatsRule = Callable[[int, np.ndarray, np.ndarray], "tuple[np.ndarray, np.ndarray]"]


def resolve_bn_stats(spec: ModelSpec, params: ModelParams, x: np.ndarray, rule: StatsRule):
    """Walk the extractor once, letting ``rule(j, batch_mean, batch_var)``
    pick the statistics BN layer ``j`` normalizes with.

    Returns ``(used, batch)``: the chosen statistics and the batch moments
    each layer saw, both as :class:`EffectiveStats`. Deeper layers see inputs
    normalized with the statistics already chosen upstream.
    """
    dt = x.dtype
    used_m, used_v, bat_m, bat_v = [], [], [], []
    h = x
    ci = bi = 0
    for layer in spec.layers:
        if isinstance(layer, Conv):
            h = L.conv2d(h, params.conv_w[ci].astype(dt, copy=False), params.conv_b[ci].astype(dt, copy=False),
                         layer.stride, layer.padding)
            ci += 1
        elif isinstance(layer, BatchNorm):
            m, v = L.batch_moments(h)
            um, uv = rule(bi, m, v)
            um, uv = um.astype(dt, copy=False), uv.astype(dt, copy=False)
            h = L.bn_forward(h, um, uv, params.bn_gamma[bi], params.bn_beta[bi], layer.eps)
            used_m.append(um)
            used_v.append(uv)
            bat_m.append(m)
            bat_v.append(v)
            bi += 1
            if bi == spec.n_bn_layers:
                break
        elif isinstance(layer, ReLU):
            h = np.maximum(h, 0)
    return EffectiveStats(used_m, used_v), EffectiveStats(bat_m, bat_v)


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    state: dict[str, np.ndarray] | None = None,
):
    """Heavy-ball SGD on the keys present in ``grads``: v <- m*v + g; p <- p - lr*v.

    Returns new ``(params, state)`` dicts; inputs are left untouched.
    """
    if not lr > 0:
        raise InvalidArgument("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise InvalidArgument("momentum must be in [0, 1)")
    state = dict(state or {})
    out = dict(params)
    for key, g in grads.items():
        if key not in params:
            raise InvalidArgument(f"gradient for unknown parameter {key!r}")
        p = params[key]
        if g.shape != p.shape:
            raise InvalidArgument(f"gradient shape {g.shape} != parameter shape {p.shape} for {key!r}")
        g = g.astype(p.dtype, copy=False)
        v = state.get(key)
        v = g.copy() if v is None else p.dtype.type(momentum) * v + g
        state[key] = v
        out[key] = p - p.dtype.type(lr) * v
    return out, state


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    steps: int = 1500
    batch_size: int = 32
    bn_momentum: float = 0.1
    seed: int = 42

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidArgument("train.lr must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidArgument("train.momentum must be in [0, 1)")
        if self.steps < 0:
            raise InvalidArgument("train.steps must be >= 0")
        if self.batch_size < 1:
            raise InvalidArgument("train.batch_size must be >= 1")
        if not 0 < self.bn_momentum <= 1:
            raise InvalidArgument("train.bn_momentum must be in (0, 1]")
        if self.seed < 0:
            raise InvalidArgument("seed must be non-negative")


@dataclass
class TrainHistory:
    step_loss: list[float] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    epoch_val_acc: list[float] = field(default_factory=list)


PROTOTYPE_INIT_SAMPLES = 512


def initialize_model(spec: ModelSpec, train, cfg: TrainConfig) -> ModelParams:
    """Random extractor weights plus class-mean prototypes from one
    batch-statistics feature pass over a prefix of the training set."""
    params = init_params(spec, derive_rng(cfg.seed, "init-weights"))
    n = min(len(train), PROTOTYPE_INIT_SAMPLES)
    feats, _, _ = forward(spec, params, train.images[:n], mode="train-server")
    return params.with_prototypes(L.init_prototypes(feats, train.labels[:n], spec.n_classes))


def pretrain(spec: ModelSpec, source_train, source_val, cfg: TrainConfig):
    """Jointly fit extractor and prototypes on source data by minibatch SGD.

    Returns ``(params, history)``. Raises :class:`TrainingDiverged` on a
    non-finite loss.
    """
    if len(source_train) == 0 or len(source_val) == 0:
        raise InvalidArgument("pretrain needs non-empty datasets")
    if set(np.unique(source_train.labels)) != set(range(spec.n_classes)):
        raise InvalidArgument("source labels must cover every class")
    params = initialize_model(spec, source_train, cfg)
    history = TrainHistory()
    if cfg.steps == 0:
        return params, history

    rng = derive_rng(cfg.seed, "pretrain-batches")
    n = len(source_train)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = max(1, n // bs)
    weights = params.as_dict()
    state = None
    order = rng.permutation(n)
    pos = 0
    epoch_losses = []
    for step in range(cfg.steps):
        if pos + bs > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos : pos + bs]
        pos += bs
        current = ModelParams.from_dict(weights)
        _, logits, cache = forward(spec, current, source_train.images[idx], "train-server", bn_momentum=cfg.bn_momentum)
        loss, dlogits = L.cross_entropy(logits, source_train.labels[idx])
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        grads = backward(spec, current, cache, dlogits)
        trainable = {k: weights[k] for k in grads.pretrain_dict()}
        updated, state = sgd_step(trainable, grads.pretrain_dict(), cfg.lr, cfg.momentum, state)
        weights.update(updated)
        for j in range(spec.n_bn_layers):
            weights[f"bn{j}.running_mean"] = cache.new_running.mean[j]
            weights[f"bn{j}.running_var"] = cache.new_running.var[j]
        history.step_loss.append(loss)
        epoch_losses.append(loss)
        if (step + 1) % steps_per_epoch == 0 or step + 1 == cfg.steps:
            acc = evaluate(spec, ModelParams.from_dict(weights), source_val)
            history.epoch_loss.append(float(np.mean(epoch_losses)))
            history.epoch_val_acc.append(acc)
            log.info("step %d loss %.4f val_acc %.4f", step + 1, history.epoch_loss[-1], acc)
            epoch_losses = []
    return ModelParams.from_dict(weights), history


def predict(spec, params, images, stats_override=None, chunk: int = 256):
    mode = "eval" if stats_override is None else "adapt"
    out = []
    for start in range(0, len(images), chunk):
        _, logits, _ = forward(spec, params, images[start : start + chunk], mode, stats_override)
        out.append(logits)
    return np.concatenate(out, axis=0)


def evaluate(spec: ModelSpec, params: ModelParams, dataset, stats_override: EffectiveStats | None = None) -> float:
    """Fraction of argmax-correct predictions (ties go to the lowest class)."""
    if len(dataset) == 0:
        raise InvalidArgument("cannot evaluate on an empty dataset")
    logits = predict(spec, params, dataset.images, stats_override)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def mean_cross_entropy(spec, params, dataset, stats_override=None) -> float:
    logits = predict(spec, params, dataset.images, stats_override)
    loss, _ = L.cross_entropy(logits, dataset.labels)
    return loss
