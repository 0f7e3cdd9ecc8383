"""Server/client round logic: deploy, adapt, transmit, aggregate, evaluate."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .adapt import AdaptConfig, adapt_client, capture_support_stats, check_coefficients, mix_statistics, source_stats
from .data import DomainParams, Episode
from .errors import ClientFailure, InvalidArgument
from .model import EffectiveStats, ModelParams, ModelSpec, evaluate, predict
from .rng import derive_rng
from .transport import InProcTransport
from .wire import (
    ClientUpdate,
    GlobalCoefficients,
    decode_client_update,
    decode_global,
    encode_client_update,
    encode_global,
)


def deploy(server_params: ModelParams) -> ModelParams:
    """Independent deep copy handed to a client."""
    return server_params.copy()


def aggregate_fedavg(updates: list[ClientUpdate]) -> GlobalCoefficients:
    """Sample-weighted mean of client coefficients.

    Each position is computed as fsum(n_i * c_i) / I in float64 and rounded
    to float32. ``math.fsum`` is exactly rounded, so the result does not
    depend on the order of ``updates``.
    """
    if not updates:
        raise InvalidArgument("no client updates to aggregate")
    rounds = {u.round_idx for u in updates}
    shapes = {u.coefficients.shape for u in updates}
    if len(rounds) != 1:
        raise InvalidArgument(f"updates from mixed rounds {sorted(rounds)}")
    if len(shapes) != 1:
        raise InvalidArgument("updates have different layer counts")
    total = sum(u.n_samples for u in updates)
    stacked = np.stack([u.coefficients.astype(np.float64) for u in updates])  # m, layers, 4
    counts = np.array([u.n_samples for u in updates], dtype=np.float64)
    weighted = stacked * counts[:, None, None]
    out = np.empty(stacked.shape[1:], dtype=np.float64)
    for idx in np.ndindex(out.shape):
        out[idx] = math.fsum(weighted[(slice(None),) + idx]) / total
    return GlobalCoefficients(rounds.pop(), out.astype(np.float32), total)


@dataclass
class GlobalModelView:
    """Deployed model evaluated with aggregated coefficients on one client's domain."""

    spec: ModelSpec
    params: ModelParams
    stats: EffectiveStats

    def evaluate(self, dataset) -> float:
        return evaluate(self.spec, self.params, dataset, self.stats)

    def cross_entropy(self, dataset) -> float:
        logits = predict(self.spec, self.params, dataset.images, self.stats)
        loss, _ = L.cross_entropy(logits, dataset.labels)
        return loss


def apply_global(
    spec: ModelSpec,
    deployed: ModelParams,
    g: GlobalCoefficients,
    support,
    prototypes: np.ndarray | None = None,
) -> GlobalModelView:
    """Bind global coefficients to statistics captured on ``support``.

    ``prototypes`` are the client's local classifier; the deployed ones are
    used when omitted.
    """
    check_coefficients(g.coefficients, spec.n_bn_layers)
    stats = capture_support_stats(spec, deployed, support)
    eff = mix_statistics(source_stats(deployed), stats, g.coefficients)
    params = deployed if prototypes is None else deployed.with_prototypes(prototypes)
    return GlobalModelView(spec, params, eff)


@dataclass
class ServerState:
    spec: ModelSpec
    params: ModelParams
    seed: int
    global_coeffs: GlobalCoefficients | None = None

    def advance(self, report: "RoundReport") -> "ServerState":
        return ServerState(self.spec, self.params, self.seed, report.global_coefficients)


@dataclass
class ClientSite:
    client_id: int
    domain: DomainParams
    episode: Episode

    @property
    def n_samples(self) -> int:
        return len(self.episode.support)


@dataclass
class ClientReport:
    client_id: int
    zero_shot_acc: float
    post_adapt_acc: float
    payload_bytes: int
    n_samples: int
    global_acc: float = float("nan")
    global_ce: float = float("nan")
    loss_trace: list[float] = field(default_factory=list, repr=False)


@dataclass
class RoundReport:
    round_idx: int
    clients: list[ClientReport]
    global_coefficients: GlobalCoefficients
    global_wce: float
    global_payload_bytes: int

    @property
    def total_samples(self) -> int:
        return sum(c.n_samples for c in self.clients)


def _client_leg(server: ServerState, site: ClientSite, round_idx: int, cfg: AdaptConfig, transport):
    spec = server.spec
    deployed = deploy(server.params)
    episode = site.episode
    zero_shot = evaluate(spec, deployed, episode.query)
    rng = derive_rng(server.seed, "adapt", site.client_id, round_idx)
    init = None if server.global_coeffs is None else server.global_coeffs.coefficients
    coeffs, protos, trace = adapt_client(spec, deployed, episode, cfg, rng, init_coeffs=init)
    stats = capture_support_stats(spec, deployed, episode.support)
    eff = mix_statistics(source_stats(deployed), stats, coeffs)
    post = evaluate(spec, deployed.with_prototypes(protos), episode.query, eff)
    payload = encode_client_update(ClientUpdate(round_idx, site.client_id, site.n_samples, coeffs))
    transport.send(payload)
    report = ClientReport(site.client_id, zero_shot, post, len(payload), site.n_samples, loss_trace=trace.loss)
    return report, protos


def run_round(
    server: ServerState,
    clients: list[ClientSite],
    round_idx: int,
    cfg: AdaptConfig,
    transport=None,
    jobs: int = 1,
) -> RoundReport:
    """One synchronous federated round over every client.

    All client legs finish and every update is decoded before aggregation.
    A failing client aborts the round with :class:`ClientFailure`.
    """
    if not clients:
        raise InvalidArgument("a round needs at least one client")
    transport = InProcTransport() if transport is None else transport
    results = {}
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {site.client_id: pool.submit(_client_leg, server, site, round_idx, cfg, transport)
                       for site in clients}
            errors = {}
            for cid, fut in futures.items():
                try:
                    results[cid] = fut.result()
                except Exception as e:
                    errors[cid] = e
    else:
        errors = {}
        for site in clients:
            try:
                results[site.client_id] = _client_leg(server, site, round_idx, cfg, transport)
            except Exception as e:
                errors[site.client_id] = e
                break
    if errors:
        cid = min(errors)
        raise ClientFailure(cid, round_idx, errors[cid]) from errors[cid]

    # barrier: every update received and decoded before aggregation
    updates = [decode_client_update(transport.recv()) for _ in clients]
    updates.sort(key=lambda u: u.client_id)
    if [u.client_id for u in updates] != sorted(results):
        raise InvalidArgument("received updates do not match the participating clients")
    g_frame = encode_global(aggregate_fedavg(updates))
    g = decode_global(g_frame)

    reports = []
    total = sum(u.n_samples for u in updates)
    wce = 0.0
    for site in sorted(clients, key=lambda s: s.client_id):
        report, protos = results[site.client_id]
        view = apply_global(server.spec, deploy(server.params), g, site.episode.support, protos)
        report.global_acc = view.evaluate(site.episode.query)
        report.global_ce = view.cross_entropy(site.episode.query)
        wce += site.n_samples / total * report.global_ce
        reports.append(report)
    return RoundReport(round_idx, reports, g, wce, len(g_frame))
