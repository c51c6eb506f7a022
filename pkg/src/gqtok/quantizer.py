"""Group-wise lookup-free quantization.

Latent channels are split into g groups of d_prime channels each; every
channel is quantized to +/-1 by sign, so each group's code lives in the
implicit, non-learnable codebook {-1,+1}^d_prime and maps to an integer
token in [0, 2^d_prime). Training gradients cross the quantizer through a
straight-through estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class QuantError(ValueError):
    pass


@dataclass(frozen=True)
class QuantConfig:
    """Grouping of the d = g * d_prime latent channels."""

    g: int
    d_prime: int
    tie_break: int = 1          # sign(0) convention; +1 by default
    pre_activation: str = "none"  # {"none", "tanh"} applied before sign

    def __post_init__(self):
        if self.g < 1 or self.d_prime < 1:
            raise QuantError(f"g and d_prime must be >= 1, got g={self.g}, d_prime={self.d_prime}")
        if self.tie_break not in (1, -1):
            raise QuantError(f"tie_break must be +1 or -1, got {self.tie_break}")
        if self.pre_activation not in ("none", "tanh"):
            raise QuantError(f"unknown pre_activation {self.pre_activation!r}")

    @property
    def d(self) -> int:
        return self.g * self.d_prime

    @property
    def codes_per_group(self) -> int:
        return 2 ** self.d_prime

    @property
    def codebook_size(self) -> int:
        return 2 ** self.d


def group_reshape(u: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """(..., d) -> (..., g, d_prime); group k holds channels [k*d_prime, (k+1)*d_prime)."""
    if u.shape[-1] != cfg.d:
        raise QuantError(f"channel count {u.shape[-1]} != g*d_prime = {cfg.d}")
    return u.reshape(u.shape[:-1] + (cfg.g, cfg.d_prime))


def ungroup_reshape(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Exact inverse of group_reshape."""
    if x.shape[-2:] != (cfg.g, cfg.d_prime):
        raise QuantError(f"trailing dims {x.shape[-2:]} != (g, d_prime) = {(cfg.g, cfg.d_prime)}")
    return x.reshape(x.shape[:-2] + (cfg.d,))


def sign_quantize(x: np.ndarray, cfg: QuantConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel sign quantization of a grouped latent (..., g, d_prime).

    Returns (signs, tokens): signs in {-1,+1} with the same shape as x, and
    integer token indices of shape (..., g).
    """
    if np.isnan(x).any():
        raise QuantError("sign_quantize: NaN in input")
    if x.shape[-2:] != (cfg.g, cfg.d_prime):
        raise QuantError(f"expected grouped latent (..., {cfg.g}, {cfg.d_prime}), got {x.shape}")
    signs = np.where(x > 0, 1.0, np.where(x < 0, -1.0, float(cfg.tie_break)))
    signs = signs.astype(x.dtype)
    return signs, tokens_from_signs(signs, cfg)


def code_to_index(code: np.ndarray) -> int:
    """MSB-first: bit t is 1 iff code[t] == +1, t=0 being the first channel."""
    code = np.asarray(code)
    if code.ndim != 1:
        raise QuantError(f"code must be 1-D, got shape {code.shape}")
    if not np.all(np.abs(code) == 1):
        raise QuantError("code entries must be +/-1")
    idx = 0
    for bit in code:
        idx = (idx << 1) | (1 if bit > 0 else 0)
    return idx


def index_to_code(i: int, d_prime: int) -> np.ndarray:
    if not 0 <= i < 2 ** d_prime:
        raise QuantError(f"index {i} out of range for d_prime={d_prime}")
    bits = [(i >> (d_prime - 1 - t)) & 1 for t in range(d_prime)]
    return np.asarray([1.0 if b else -1.0 for b in bits])


def tokens_from_signs(signs: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Vectorized code_to_index over the last axis."""
    weights = 1 << np.arange(cfg.d_prime - 1, -1, -1, dtype=np.int64)
    bits = (signs > 0).astype(np.int64)
    return bits @ weights


def signs_from_tokens(tokens: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Vectorized index_to_code; (..., g) ints -> (..., g, d_prime) signs."""
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.codes_per_group):
        raise QuantError(f"token out of range for d_prime={cfg.d_prime}")
    shifts = np.arange(cfg.d_prime - 1, -1, -1, dtype=np.int64)
    bits = (tokens[..., None] >> shifts) & 1
    return np.where(bits == 1, 1.0, -1.0)


def codebook(d_prime: int) -> np.ndarray:
    """All 2^d_prime sign codes, row m = index_to_code(m). Shape (2^d_prime, d_prime)."""
    m = np.arange(2 ** d_prime, dtype=np.int64)
    shifts = np.arange(d_prime - 1, -1, -1, dtype=np.int64)
    bits = (m[:, None] >> shifts) & 1
    return np.where(bits == 1, 1.0, -1.0)


def apply_pre_activation(u: "ad.Tensor", cfg: QuantConfig) -> "ad.Tensor":
    if cfg.pre_activation == "tanh":
        return ad.tanh(u)
    return u


def straight_through(u_grouped: "ad.Tensor", signs: np.ndarray) -> "ad.Tensor":
    """Quantized values forward, identity gradient back to the latent."""
    return ad.straight_through(u_grouped, signs)


def quantize_node(u_grouped: "ad.Tensor", cfg: QuantConfig) -> tuple["ad.Tensor", np.ndarray]:
    """sign_quantize + STE on a tape node; returns (quantized node, tokens)."""
    signs, tokens = sign_quantize(u_grouped.data, cfg)
    return straight_through(u_grouped, signs), tokens
