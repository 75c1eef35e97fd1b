"""Conditional diffusion image codec: VQ token bitstreams decoded by a rectified-flow DiT."""

from .core import (Bitstream, CodecConfig, CodError, ConfigError, FormatError, NumericalError, RangeError,
                   RateReport, StateError, TokenGrid, compute_rate, pack_tokens, parse_bitstream,
                   serialize_bitstream, unpack_tokens)
from .model import ArchConfig, CoDModel

__version__ = "0.1.0"

__all__ = ["ArchConfig", "Bitstream", "CoDModel", "CodError", "CodecConfig", "ConfigError", "FormatError",
           "NumericalError", "RangeError", "RateReport", "StateError", "TokenGrid", "compute_rate", "pack_tokens",
           "parse_bitstream", "serialize_bitstream", "unpack_tokens"]
