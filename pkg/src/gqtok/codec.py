"""Lossless token bitstream (.wtok) and compression-ratio accounting.

Layout: a little-endian header (magic "WTOK", version, original image dims,
token grid dims, group count, channels per group) followed by the packed
sign bits — row-major over positions, group-major within a position,
MSB-first within a group, bit 1 meaning +1, zero-padded to a byte boundary.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .quantizer import QuantConfig

MAGIC = b"WTOK"
VERSION = 1
_HEADER = struct.Struct("<4sBHHHHBB")  # magic, version, H, W, h, w, g, d_prime


class BitstreamError(ValueError):
    pass


@dataclass(frozen=True)
class Bitstream:
    image_h: int
    image_w: int
    h: int
    w: int
    g: int
    d_prime: int
    payload: bytes

    @property
    def n_bits(self) -> int:
        return self.h * self.w * self.g * self.d_prime

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, VERSION, self.image_h, self.image_w,
                            self.h, self.w, self.g, self.d_prime) + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Bitstream":
        if len(raw) < _HEADER.size:
            raise BitstreamError(f"truncated header: {len(raw)} bytes")
        magic, version, ih, iw, h, w, g, dp = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise BitstreamError(f"unsupported version {version}")
        if h * w < 1 or g < 1 or dp < 1:
            raise BitstreamError(f"empty grid in header: h={h} w={w} g={g} d_prime={dp}")
        need = (h * w * g * dp + 7) // 8
        payload = raw[_HEADER.size:]
        if len(payload) != need:
            raise BitstreamError(f"payload is {len(payload)} bytes, expected {need}")
        return cls(ih, iw, h, w, g, dp, payload)


def pack(tokens: np.ndarray, cfg: QuantConfig, image_hw: tuple[int, int]) -> Bitstream:
    """Token grid (h, w, g) of indices in [0, 2^d_prime) -> bitstream."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 3 or tokens.shape[2] != cfg.g:
        raise BitstreamError(f"expected token grid (h, w, g={cfg.g}), got {tokens.shape}")
    h, w, g = tokens.shape
    if h * w < 1:
        raise BitstreamError("empty token grid")
    if tokens.min() < 0 or tokens.max() >= cfg.codes_per_group:
        raise BitstreamError(f"token out of range for d_prime={cfg.d_prime}")
    shifts = np.arange(cfg.d_prime - 1, -1, -1, dtype=np.int64)
    bits = ((tokens[..., None].astype(np.int64) >> shifts) & 1).astype(np.uint8)
    payload = np.packbits(bits.reshape(-1)).tobytes()
    return Bitstream(image_hw[0], image_hw[1], h, w, g, cfg.d_prime, payload)


def unpack(bs: Bitstream) -> np.ndarray:
    """Exact inverse of pack: bitstream -> token grid (h, w, g)."""
    bits = np.unpackbits(np.frombuffer(bs.payload, dtype=np.uint8), count=bs.n_bits)
    bits = bits.reshape(bs.h, bs.w, bs.g, bs.d_prime).astype(np.int64)
    weights = 1 << np.arange(bs.d_prime - 1, -1, -1, dtype=np.int64)
    return bits @ weights


def write_wtok(path, bs: Bitstream) -> None:
    with open(path, "wb") as f:
        f.write(bs.to_bytes())


def read_wtok(path) -> Bitstream:
    with open(path, "rb") as f:
        return Bitstream.from_bytes(f.read())


def compression_ratio(image_h: int, image_w: int, h: int, w: int, g: int, d_prime: int,
                      channels: int = 3, bits_per_pixel_channel: int = 8) -> float:
    """Input bits over token bits: (H*W*C*8) / (h*w*g*d_prime)."""
    if min(image_h, image_w, h, w, g, d_prime) < 1:
        raise BitstreamError("dimensions must be positive")
    return (image_h * image_w * channels * bits_per_pixel_channel) / (h * w * g * d_prime)


def stream_compression_ratio(bs: Bitstream, channels: int = 3) -> float:
    return compression_ratio(bs.image_h, bs.image_w, bs.h, bs.w, bs.g, bs.d_prime, channels)
