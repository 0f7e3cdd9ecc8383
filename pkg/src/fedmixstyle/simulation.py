"""End-to-end driver: source pre-training, client construction, R rounds, CSV metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass

import numpy as np

from .config import SimConfig
from .data import apply_style_shift, gen_client_pool, gen_domains, gen_source, make_templates, sample_episode
from .federation import ClientSite, RoundReport, ServerState, run_round
from .model import ModelParams, ModelSpec, evaluate, micro_cnn, pretrain
from .rng import derive_rng
from .transport import make_transport

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "client", "zero_shot_acc", "post_adapt_acc", "global_acc",
               "payload_bytes", "n_samples", "global_wce")


@dataclass(frozen=True)
class MetricsRow:
    round: int
    client: str
    zero_shot_acc: float
    post_adapt_acc: float
    global_acc: float
    payload_bytes: int
    n_samples: int
    global_wce: float

    def as_csv(self) -> list[str]:
        return [str(self.round), self.client, f"{self.zero_shot_acc:.6f}", f"{self.post_adapt_acc:.6f}",
                f"{self.global_acc:.6f}", str(self.payload_bytes), str(self.n_samples), f"{self.global_wce:.6f}"]


def model_spec(cfg: SimConfig) -> ModelSpec:
    return micro_cnn(cfg.data.n_classes, cfg.data.side, cfg.temperature)


def run_pretrain(cfg: SimConfig):
    """Returns ``(spec, params, source_test_acc, history)``."""
    spec = model_spec(cfg)
    train, test, _ = gen_source(cfg.data)
    params, history = pretrain(spec, train, test, cfg.train)
    return spec, params, evaluate(spec, params, test), history


def source_test_accuracy(cfg: SimConfig, spec: ModelSpec, params: ModelParams) -> float:
    _, test, _ = gen_source(cfg.data)
    return evaluate(spec, params, test)


def build_clients(cfg: SimConfig) -> list[ClientSite]:
    templates = make_templates(cfg.data)
    domains = gen_domains(cfg.clients, cfg.seed, cfg.data.gain_range, cfg.data.bias_range)
    sites = []
    for d in domains:
        pool = apply_style_shift(gen_client_pool(cfg.data, templates, d.client_id), d)
        episode = sample_episode(pool, cfg.data.k_shot, cfg.data.q_query,
                                 derive_rng(cfg.seed, "episode", d.client_id), cfg.data.n_classes)
        sites.append(ClientSite(d.client_id, d, episode))
    return sites


def run_simulation(cfg: SimConfig, spec: ModelSpec, params: ModelParams, jobs: int = 1) -> list[RoundReport]:
    server = ServerState(spec, params, cfg.seed)
    clients = build_clients(cfg)
    reports = []
    with make_transport(cfg.transport) as transport:
        for r in range(1, cfg.rounds + 1):
            report = run_round(server, clients, r, cfg.adapt, transport, jobs=jobs)
            log.info("round %d: wce %.4f", r, report.global_wce)
            reports.append(report)
            server = server.advance(report)
    return reports


def metrics_rows(reports: list[RoundReport]) -> list[MetricsRow]:
    rows = []
    for rep in reports:
        for c in sorted(rep.clients, key=lambda c: c.client_id):
            rows.append(MetricsRow(rep.round_idx, str(c.client_id), c.zero_shot_acc, c.post_adapt_acc,
                                   c.global_acc, c.payload_bytes, c.n_samples, rep.global_wce))
        rows.append(MetricsRow(
            rep.round_idx, "global",
            float(np.mean([c.zero_shot_acc for c in rep.clients])),
            float(np.mean([c.post_adapt_acc for c in rep.clients])),
            float(np.mean([c.global_acc for c in rep.clients])),
            rep.global_payload_bytes, rep.total_samples, rep.global_wce,
        ))
    return rows


def rounds_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow(row.as_csv())
    return buf.getvalue()


def summary(cfg: SimConfig, source_acc: float, reports: list[RoundReport]) -> dict:
    return {
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "clients": cfg.clients,
        "source_test_acc": source_acc,
        "per_round": [
            {
                "round": rep.round_idx,
                "mean_zero_shot_acc": float(np.mean([c.zero_shot_acc for c in rep.clients])),
                "mean_post_adapt_acc": float(np.mean([c.post_adapt_acc for c in rep.clients])),
                "mean_global_acc": float(np.mean([c.global_acc for c in rep.clients])),
                "global_wce": rep.global_wce,
                "global_coefficients": rep.global_coefficients.coefficients.tolist(),
            }
            for rep in reports
        ],
    }


def summary_json(data: dict) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"
