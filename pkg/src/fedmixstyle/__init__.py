"""Federated few-shot adaptation of BN-statistics mixing coefficients, simulated end to end."""

from .adapt import (
    AdaptConfig,
    MixStyleConfig,
    SupportStats,
    adapt_client,
    capture_support_stats,
    init_coefficients,
    mix_statistics,
)
from .data import DataConfig, Dataset, DomainParams, Episode
from .federation import aggregate_fedavg, apply_global, deploy, run_round
from .model import EffectiveStats, ModelParams, ModelSpec, TrainConfig, evaluate, forward, micro_cnn, pretrain
from .wire import ClientUpdate, GlobalCoefficients, decode_client_update, encode_client_update

__version__ = "0.1.0"
