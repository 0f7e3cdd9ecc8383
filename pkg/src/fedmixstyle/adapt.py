"""Client-side BN-statistics adaptation.

Each BN layer of the deployed model normalizes with a learned linear
combination of the source running statistics and the target statistics
measured on the client's support set:

    mean_used = c_s_mu * mean_S + c_t_mu * mean_T
    var_used  = max(c_s_var * var_S + c_t_var * var_T, 1e-8)

The four scalars per layer are shared across channels. During fine-tuning
the target statistics are randomly blended with the current minibatch's
statistics (lambda ~ Beta(alpha, alpha), applied with probability p), which
regularizes the coefficients against the tiny support set. Only the
coefficients and the class prototypes are trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import AdaptationDiverged, InvalidArgument
from .model import EffectiveStats, ModelParams, ModelSpec, backward, forward, resolve_bn_stats, sgd_step

VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class SupportStats:
    mean: list[np.ndarray]
    var: list[np.ndarray]
    n_samples: int

    def __len__(self):
        return len(self.mean)


@dataclass(frozen=True)
class MixStyleConfig:
    p: float = 0.5
    alpha: float = 0.3
    enabled: bool = True

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise InvalidArgument("mixstyle p must be in [0, 1]")
        if not self.alpha > 0:
            raise InvalidArgument("mixstyle alpha must be positive")


@dataclass(frozen=True)
class AdaptConfig:
    steps: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    mixstyle: MixStyleConfig = field(default_factory=MixStyleConfig)
    init_weight: float = 0.1

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidArgument("adapt.steps must be >= 0")
        if not self.lr > 0:
            raise InvalidArgument("adapt.lr must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidArgument("adapt.momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise InvalidArgument("adapt.batch_size must be >= 1")
        if not 0 <= self.init_weight <= 1:
            raise InvalidArgument("adapt.init_weight must be in [0, 1]")


@dataclass
class AdaptTrace:
    loss: list[float] = field(default_factory=list)
    mix_lambda: list[float | None] = field(default_factory=list)
    min_var_used: list[float] = field(default_factory=list)


def source_stats(params: ModelParams) -> tuple[list[np.ndarray], list[np.ndarray]]:
    return params.bn_mean, params.bn_var


def capture_support_stats(spec: ModelSpec, params: ModelParams, support) -> SupportStats:
    """Per-layer moments of the whole support set, captured layer by layer:
    each BN layer normalizes with the support moments it just measured."""
    if len(support) == 0:
        raise InvalidArgument("support set is empty")
    _, moments = resolve_bn_stats(spec, params, support.images, lambda j, m, v: (m, v))
    return SupportStats(moments.mean, moments.var, len(support))


def init_coefficients(n_bn_layers: int, init_weight: float) -> np.ndarray:
    """(n_bn_layers, 4) float32 array; columns are (c_s_mu, c_t_mu, c_s_var, c_t_var)."""
    if not 0 <= init_weight <= 1:
        raise InvalidArgument("init weight must be in [0, 1]")
    row = np.array([1 - init_weight, init_weight, 1 - init_weight, init_weight], dtype=np.float32)
    return np.tile(row, (n_bn_layers, 1))


def check_coefficients(coeffs: np.ndarray, n_bn_layers: int | None = None) -> None:
    if coeffs.ndim != 2 or coeffs.shape[1] != 4:
        raise InvalidArgument("coefficients must have shape (n_layers, 4)")
    if n_bn_layers is not None and coeffs.shape[0] != n_bn_layers:
        raise InvalidArgument(f"{coeffs.shape[0]} coefficient rows for {n_bn_layers} BN layers")
    if not np.all(np.isfinite(coeffs)):
        raise InvalidArgument("coefficients must be finite")


def _raw_var(src_var, tgt_var, c):
    dt = src_var.dtype
    return dt.type(c[2]) * src_var + dt.type(c[3]) * tgt_var.astype(dt, copy=False)


def mix_layer(src_mean, src_var, tgt_mean, tgt_var, c):
    dt = src_mean.dtype
    mean = dt.type(c[0]) * src_mean + dt.type(c[1]) * tgt_mean.astype(dt, copy=False)
    var = np.maximum(_raw_var(src_var, tgt_var, c), dt.type(VAR_FLOOR))
    return mean, var


def mix_statistics(bn_source, target_stats, coeffs: np.ndarray) -> EffectiveStats:
    """Combine per-layer (means, vars) of source and target with the coefficients."""
    src_m, src_v = bn_source
    tgt_m, tgt_v = target_stats.mean, target_stats.var
    if not (len(src_m) == len(tgt_m) == len(coeffs)):
        raise InvalidArgument("source, target and coefficient layer counts differ")
    means, vars_ = [], []
    for j in range(len(coeffs)):
        m, v = mix_layer(src_m[j], src_v[j], tgt_m[j], tgt_v[j], coeffs[j])
        means.append(m)
        vars_.append(v)
    return EffectiveStats(means, vars_)


def sample_mixstyle(rng: np.random.Generator, cfg: MixStyleConfig) -> float | None:
    """With probability ``p`` draw lambda ~ Beta(alpha, alpha), else None.

    numpy's beta sampler uses the two-Gamma construction; the draw is nudged
    off the endpoints so it always lies strictly inside (0, 1).
    """
    if not cfg.enabled:
        return None
    if rng.random() >= cfg.p:
        return None
    lam = float(rng.beta(cfg.alpha, cfg.alpha))
    return min(max(lam, np.nextafter(0.0, 1.0)), np.nextafter(1.0, 0.0))


def stochastic_target_stats(support: SupportStats, batch_stats, lam: float | None) -> SupportStats:
    """Blend support and minibatch moments: lam * support + (1 - lam) * batch."""
    if lam is None:
        return support
    bm, bv = batch_stats
    if len(bm) != len(support):
        raise InvalidArgument("support and batch layer counts differ")
    means = [(lam * s + (1 - lam) * b).astype(s.dtype) for s, b in zip(support.mean, bm)]
    vars_ = [(lam * s + (1 - lam) * b).astype(s.dtype) for s, b in zip(support.var, bv)]
    return SupportStats(means, vars_, support.n_samples)


def coeff_gradients(layer_source_stats, layer_target_stats, dmean_used, dvar_used, coeffs=None) -> np.ndarray:
    """Chain rule through :func:`mix_layer` for one layer; returns a 4-vector.

    If ``coeffs`` is given, channels where the variance floor is active get
    no gradient for the variance coefficients.
    """
    sm, sv, tm, tv = (np.asarray(a, dtype=np.float64) for a in (*layer_source_stats, *layer_target_stats))
    dvar = np.asarray(dvar_used, dtype=np.float64)
    if coeffs is not None:
        dvar = np.where(_raw_var(sv, tv, coeffs) > VAR_FLOOR, dvar, 0.0)
    dmean = np.asarray(dmean_used, dtype=np.float64)
    return np.array([dmean @ sm, dmean @ tm, dvar @ sv, dvar @ tv])


def adapted_loss_and_grads(spec, params, coeffs, target: SupportStats, x, labels):
    """Cross-entropy of the adapted model on (x, labels) and its gradients
    with respect to the coefficients and the prototypes."""
    eff = mix_statistics(source_stats(params), target, coeffs)
    _, logits, cache = forward(spec, params, x, "adapt", eff)
    loss, dlogits = L.cross_entropy(logits, labels)
    grads = backward(spec, params, cache, dlogits)
    src_m, src_v = source_stats(params)
    dcoef = np.stack([
        coeff_gradients((src_m[j], src_v[j]), (target.mean[j], target.var[j]),
                        grads.stat_mean[j], grads.stat_var[j], coeffs[j])
        for j in range(len(coeffs))
    ])
    return loss, dcoef, grads.prototypes, eff


def support_features(spec, params, coeffs, support_stats: SupportStats, support) -> np.ndarray:
    eff = mix_statistics(source_stats(params), support_stats, coeffs)
    feats, _, _ = forward(spec, params, support.images, "adapt", eff)
    return feats


def adapt_client(
    spec: ModelSpec,
    deployed: ModelParams,
    episode,
    cfg: AdaptConfig,
    rng: np.random.Generator,
    init_coeffs: np.ndarray | None = None,
):
    """Fit LCCS coefficients and local prototypes on the episode's support set.

    Returns ``(coefficients, prototypes, trace)``. The deployed parameters are
    only read. ``init_coeffs`` (for example last round's global coefficients)
    replaces the ``init_weight`` initialization when given.
    """
    support = episode.support
    n_bn = spec.n_bn_layers
    if len(support) == 0:
        raise InvalidArgument("support set is empty")
    missing = set(range(spec.n_classes)) - set(np.unique(support.labels).tolist())
    if missing:
        raise InvalidArgument(f"support set lacks classes {sorted(missing)}")

    stats = capture_support_stats(spec, deployed, support)
    if init_coeffs is None:
        coeffs = init_coefficients(n_bn, cfg.init_weight)
    else:
        check_coefficients(init_coeffs, n_bn)
        coeffs = init_coeffs.astype(np.float32, copy=True)
    feats = support_features(spec, deployed, coeffs, stats, support)
    protos = L.init_prototypes(feats, support.labels, spec.n_classes)

    src_m, src_v = source_stats(deployed)
    trainable = {"coefficients": coeffs, "prototypes": protos}
    opt_state = None
    trace = AdaptTrace()
    bs = min(cfg.batch_size, len(support))
    for step in range(cfg.steps):
        idx = np.sort(rng.choice(len(support), size=bs, replace=False))
        xb, yb = support.images[idx], support.labels[idx]
        lam = sample_mixstyle(rng, cfg.mixstyle)
        cur = trainable["coefficients"]
        if lam is None:
            target = stats
        else:
            blended = {}

            def rule(j, bm, bv):
                t_m = (lam * stats.mean[j] + (1 - lam) * bm).astype(bm.dtype)
                t_v = (lam * stats.var[j] + (1 - lam) * bv).astype(bv.dtype)
                blended[j] = (t_m, t_v)
                return mix_layer(src_m[j], src_v[j], t_m, t_v, cur[j])

            resolve_bn_stats(spec, deployed, xb, rule)
            target = SupportStats([blended[j][0] for j in range(n_bn)],
                                  [blended[j][1] for j in range(n_bn)], stats.n_samples)
        model = deployed.with_prototypes(trainable["prototypes"])
        loss, dcoef, dproto, eff = adapted_loss_and_grads(spec, model, cur, target, xb, yb)
        if not math.isfinite(loss):
            raise AdaptationDiverged(step, loss)
        trace.loss.append(loss)
        trace.mix_lambda.append(lam)
        trace.min_var_used.append(float(min(v.min() for v in eff.var)))
        grads = {"coefficients": dcoef.astype(np.float32), "prototypes": dproto}
        trainable, opt_state = sgd_step(trainable, grads, cfg.lr, cfg.momentum, opt_state)
    return trainable["coefficients"], trainable["prototypes"], trace


def support_loss(spec, deployed, coeffs, prototypes, episode) -> float:
    """Full-support cross-entropy of an adapted model, no stochastic mixing."""
    stats = capture_support_stats(spec, deployed, episode.support)
    eff = mix_statistics(source_stats(deployed), stats, coeffs)
    _, logits, _ = forward(spec, deployed.with_prototypes(prototypes), episode.support.images, "adapt", eff)
    loss, _ = L.cross_entropy(logits, episode.support.labels)
    return loss
