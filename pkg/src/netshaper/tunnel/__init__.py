"""Two-endpoint shaping tunnel: frame codec, sealed record layer, endpoints."""

from .config import TunnelConfig, load_config, parse_config
from .endpoint import TunnelEndpoint
from .frames import (
    FRAME_HEADER_LEN,
    KIND_CONTROL,
    KIND_DATA,
    KIND_DUMMY,
    Frame,
    block_len,
    decode_block,
    encode_block,
)
from .records import RecordCodec

__all__ = [
    "FRAME_HEADER_LEN",
    "Frame",
    "KIND_CONTROL",
    "KIND_DATA",
    "KIND_DUMMY",
    "RecordCodec",
    "TunnelConfig",
    "TunnelEndpoint",
    "block_len",
    "decode_block",
    "encode_block",
    "load_config",
    "parse_config",
]
