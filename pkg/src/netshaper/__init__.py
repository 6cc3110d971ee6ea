"""Differentially private traffic shaping toolkit.

Submodules: traces (stream ingestion and distances), dpcore (noise calibration
and accounting), shaping (buffering queue and the per-interval shaping step),
sim (trace-driven overhead simulator), tunnel (two-endpoint shaping proxy),
cli (command-line frontend).
"""

from .dpcore import (
    DpParams,
    PrivacyReport,
    compose_to_dp,
    gaussian_sigma,
    group_privacy,
    rdp_epsilon_gaussian,
    sample_gaussian,
    sigma_for_budget,
    tamaraw_gamma_bound,
)
from .shaping import BufferingQueue, ShapedBuffer, Shaper, dp_query, prepare_shaped_buffer
from .sim import SimConfig, SimResult, overhead_sweep, simulate
from .traces import (
    BurstVector,
    PacketRecord,
    Stream,
    neighboring_distance,
    pairwise_distance_distribution,
    parse_trace,
    windowed_repr,
)

__version__ = "0.1.0"

__all__ = [
    "BurstVector",
    "BufferingQueue",
    "DpParams",
    "PacketRecord",
    "PrivacyReport",
    "ShapedBuffer",
    "Shaper",
    "SimConfig",
    "SimResult",
    "Stream",
    "compose_to_dp",
    "dp_query",
    "gaussian_sigma",
    "group_privacy",
    "neighboring_distance",
    "overhead_sweep",
    "pairwise_distance_distribution",
    "parse_trace",
    "prepare_shaped_buffer",
    "rdp_epsilon_gaussian",
    "sample_gaussian",
    "sigma_for_budget",
    "simulate",
    "tamaraw_gamma_bound",
    "windowed_repr",
]
