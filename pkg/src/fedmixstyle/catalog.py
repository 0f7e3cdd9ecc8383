"""Parameter and transmission-size accounting for standard backbones."""

from __future__ import annotations

import math
from dataclasses import dataclass

BYTES_PER_PARAM = 4


@dataclass(frozen=True)
class BackboneCatalogEntry:
    name: str
    n_bn_layers: int
    total_bn_channels: int
    total_params: str = ""

    def __post_init__(self):
        if self.n_bn_layers < 1 or self.total_bn_channels < 1:
            raise ValueError("layer and channel counts must be positive")


@dataclass(frozen=True)
class Table1Row:
    backbone: str
    bn_params: int
    bn_kb: float
    fedmix_params: int
    fedmix_kb: float
    fedmix_kb_exact: float


CATALOG = (
    BackboneCatalogEntry("ResNet-18", 20, 4800, "12 million"),
    BackboneCatalogEntry("ResNet-50", 53, 26560, "26 million"),
    BackboneCatalogEntry("ResNet-101", 104, 52672, "45 million"),
    BackboneCatalogEntry("DenseNet-121", 121, 41824, "29 million"),
)

# (bn params, bn kB, fedmix params, fedmix kB) as published
PUBLISHED = {
    "ResNet-18": (9600, 36, 80, 0.3),
    "ResNet-50": (53120, 199, 212, 0.8),
    "ResNet-101": (105344, 395, 416, 1.6),
    "DenseNet-121": (83648, 314, 484, 1.8),
}

BN_KB_TOLERANCE = 0.06


def truncate_1dp(x: float) -> float:
    return math.floor(x * 10 + 1e-9) / 10


def backbone_stats(e: BackboneCatalogEntry) -> Table1Row:
    bn_params = 2 * e.total_bn_channels
    fedmix_params = 4 * e.n_bn_layers
    fedmix_kb = fedmix_params * BYTES_PER_PARAM / 1024
    return Table1Row(
        backbone=e.name,
        bn_params=bn_params,
        bn_kb=bn_params * BYTES_PER_PARAM / 1024,
        fedmix_params=fedmix_params,
        fedmix_kb=truncate_1dp(fedmix_kb),
        fedmix_kb_exact=fedmix_kb,
    )


def compare_row(row: Table1Row) -> dict[str, bool]:
    bn_p, bn_kb, fm_p, fm_kb = PUBLISHED[row.backbone]
    return {
        "bn_params": row.bn_params == bn_p,
        "bn_kb": abs(row.bn_kb - bn_kb) / bn_kb <= BN_KB_TOLERANCE,
        "fedmix_params": row.fedmix_params == fm_p,
        "fedmix_kb": row.fedmix_kb == fm_kb,
    }


def format_table1() -> str:
    head = (
        f"{'Backbone':<13} {'# params':>11} {'# BN params':>12} {'BN kB':>8} {'publ.':>6} {'':<9}"
        f"{'# FMS params':>13} {'FMS kB':>7} {'publ.':>6}  match"
    )
    lines = [head, "-" * len(head)]
    for e in CATALOG:
        row = backbone_stats(e)
        ok = compare_row(row)
        published = PUBLISHED[e.name]
        bn_flag = "within6%" if ok["bn_kb"] else "OFF"
        exact = ok["bn_params"] and ok["fedmix_params"] and ok["fedmix_kb"]
        lines.append(
            f"{e.name:<13} {e.total_params:>11} {row.bn_params:>12} {row.bn_kb:>8.2f} {published[1]:>6} {bn_flag:<9}"
            f"{row.fedmix_params:>13} {row.fedmix_kb:>7.1f} {published[3]:>6}  {'yes' if exact and ok['bn_kb'] else 'NO'}"
        )
    return "\n".join(lines)
