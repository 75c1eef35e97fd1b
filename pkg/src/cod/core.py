"""Codec configuration, rate arithmetic and the ``.codb`` bitstream container."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CODB"
VERSION = 1
# magic, version, height, width, f, bits_per_token, seed
HEADER = struct.Struct(">4sBIIBBQ")
HEADER_SIZE = HEADER.size

ALLOWED_FACTORS = (8, 16, 32, 128)
# The denoiser always runs at 1/16 of the image resolution.
DENOISER_STRIDE = 16


class CodError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CodError, ValueError):
    pass


class FormatError(CodError, ValueError):
    pass


class RangeError(CodError, ValueError):
    pass


class StateError(CodError, RuntimeError):
    pass


class NumericalError(CodError, FloatingPointError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    height: int
    width: int
    downsample_factor: int
    codebook_size: int
    space: str = "pixel"
    prediction_target: str = "V"
    channel_width: int = 64
    depth: int = 4

    def __post_init__(self):
        f = self.downsample_factor
        if f not in ALLOWED_FACTORS:
            raise ConfigError(f"downsample_factor must be one of {ALLOWED_FACTORS}, got {f}")
        for name in ("height", "width"):
            v = getattr(self, name)
            if v <= 0 or v % f or v % DENOISER_STRIDE:
                raise ConfigError(f"{name}={v} must be positive and divisible by f={f} and {DENOISER_STRIDE}")
        n = self.codebook_size
        if n < 2 or n & (n - 1):
            raise ConfigError(f"codebook_size must be a power of two >= 2, got {n}")
        if self.space not in ("pixel", "latent"):
            raise ConfigError(f"space must be 'pixel' or 'latent', got {self.space!r}")
        if self.prediction_target not in ("V", "X"):
            raise ConfigError(f"prediction_target must be 'V' or 'X', got {self.prediction_target!r}")
        if self.channel_width <= 0 or self.depth <= 0:
            raise ConfigError("channel_width and depth must be positive")

    @property
    def bits_per_token(self) -> int:
        return int(math.log2(self.codebook_size))

    @property
    def token_rows(self) -> int:
        return self.height // self.downsample_factor

    @property
    def token_cols(self) -> int:
        return self.width // self.downsample_factor


@dataclass(frozen=True)
class RateReport:
    total_bits: int
    bpp: float
    height: int
    width: int

    def __str__(self):
        return f"{self.total_bits} bits, {self.bpp:.8g} bpp ({self.height}x{self.width})"


def compute_rate(config: CodecConfig) -> RateReport:
    """Payload-only rate of a config. The bitstream header is not counted."""
    total = config.token_rows * config.token_cols * config.bits_per_token
    return RateReport(total, total / (config.height * config.width), config.height, config.width)


@dataclass
class TokenGrid:
    indices: np.ndarray  # (rows, cols) integer codebook indices

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2:
            raise ConfigError(f"token grid must be 2-D, got shape {self.indices.shape}")

    @property
    def rows(self) -> int:
        return self.indices.shape[0]

    @property
    def cols(self) -> int:
        return self.indices.shape[1]

    def validate(self, codebook_size: int) -> None:
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= codebook_size):
            raise RangeError(f"token index outside [0, {codebook_size})")

    def __eq__(self, other):
        return isinstance(other, TokenGrid) and np.array_equal(self.indices, other.indices)


def payload_nbytes(rows: int, cols: int, bits_per_token: int) -> int:
    return (rows * cols * bits_per_token + 7) // 8


def pack_tokens(grid: TokenGrid, bits_per_token: int) -> bytes:
    """Fixed-length big-endian packing in row-major order, zero-padded to a byte."""
    if not 1 <= bits_per_token <= 32:
        raise ConfigError(f"bits_per_token must be in [1, 32], got {bits_per_token}")
    grid.validate(1 << bits_per_token)
    flat = grid.indices.reshape(-1).astype(np.uint64)
    shifts = np.arange(bits_per_token - 1, -1, -1, dtype=np.uint64)
    bits = ((flat[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.reshape(-1)).tobytes()


def unpack_tokens(payload: bytes, rows: int, cols: int, bits_per_token: int) -> TokenGrid:
    if not 1 <= bits_per_token <= 32:
        raise ConfigError(f"bits_per_token must be in [1, 32], got {bits_per_token}")
    expected = payload_nbytes(rows, cols, bits_per_token)
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, expected {expected}")
    n = rows * cols
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[: n * bits_per_token]
    weights = np.uint64(1) << np.arange(bits_per_token - 1, -1, -1, dtype=np.uint64)
    values = bits.reshape(n, bits_per_token).astype(np.uint64) @ weights
    return TokenGrid(values.astype(np.int64).reshape(rows, cols))


@dataclass
class Bitstream:
    height: int
    width: int
    downsample_factor: int
    bits_per_token: int
    seed: int
    payload: bytes = field(repr=False)
    version: int = VERSION

    @property
    def rows(self) -> int:
        return self.height // self.downsample_factor

    @property
    def cols(self) -> int:
        return self.width // self.downsample_factor

    @property
    def payload_bits(self) -> int:
        return self.rows * self.cols * self.bits_per_token

    def tokens(self) -> TokenGrid:
        return unpack_tokens(self.payload, self.rows, self.cols, self.bits_per_token)

    @classmethod
    def from_tokens(cls, grid: TokenGrid, config: CodecConfig, seed: int) -> "Bitstream":
        if (grid.rows, grid.cols) != (config.token_rows, config.token_cols):
            raise ConfigError(
                f"grid {grid.rows}x{grid.cols} does not match config {config.token_rows}x{config.token_cols}"
            )
        return cls(config.height, config.width, config.downsample_factor, config.bits_per_token,
                   seed, pack_tokens(grid, config.bits_per_token))


def serialize_bitstream(stream: Bitstream) -> bytes:
    if stream.version != VERSION:
        raise FormatError(f"unsupported version {stream.version}")
    if stream.downsample_factor <= 0 or stream.height % stream.downsample_factor or stream.width % stream.downsample_factor:
        raise FormatError("height/width not divisible by downsample factor")
    if len(stream.payload) != payload_nbytes(stream.rows, stream.cols, stream.bits_per_token):
        raise FormatError("payload length does not match header geometry")
    try:
        header = HEADER.pack(MAGIC, stream.version, stream.height, stream.width,
                             stream.downsample_factor, stream.bits_per_token, stream.seed)
    except struct.error as e:
        raise FormatError(f"header field out of range: {e}") from None
    return header + bytes(stream.payload)


def parse_bitstream(data: bytes) -> Bitstream:
    if len(data) < HEADER_SIZE:
        raise FormatError(f"stream of {len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
    magic, version, h, w, f, bpt, seed = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if f == 0 or h % f or w % f or not 1 <= bpt <= 32:
        raise FormatError(f"inconsistent header geometry h={h} w={w} f={f} bits={bpt}")
    payload = data[HEADER_SIZE:]
    if len(payload) != payload_nbytes(h // f, w // f, bpt):
        raise FormatError(f"payload is {len(payload)} bytes, header implies {payload_nbytes(h // f, w // f, bpt)}")
    return Bitstream(h, w, f, bpt, seed, bytes(payload), version)
