"""Grouped token/codebook entropy losses and their brute-force oracle.

The soft assignment of a grouped latent to the 2^d_prime codes of its group
is a softmax of inner products <u_k, c>/tau. Because <u, c> over the full
code space {-1,+1}^d is the sum of per-group inner products, the full-space
softmax factorizes exactly across groups: the grouped token entropy equals
the exhaustive one, while the grouped codebook entropy is a
product-of-marginals upper bound on it. Entropies are in nats throughout;
reports convert to bits.

Peak auxiliary memory of the grouped path is h*w*g*2^d_prime elements per
buffer; the ungrouped path would need h*w*2^(g*d_prime). `allocation_audit`
records every buffer the tape allocates so tests can assert this.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .quantizer import QuantConfig, codebook

_BOUND_TOL = 1e-9


class EntropyError(ValueError):
    pass


@dataclass
class GroupDistribution:
    """Per-position, per-group probabilities over the 2^d_prime group codes."""

    probs: ad.Tensor          # (..., g, 2^d_prime), rows sum to 1
    temperature: float
    cfg: QuantConfig

    @property
    def g(self) -> int:
        return self.cfg.g

    @property
    def d_prime(self) -> int:
        return self.cfg.d_prime

    @property
    def n_positions(self) -> int:
        return int(np.prod(self.probs.shape[:-2], dtype=np.int64)) if self.probs.data.ndim > 2 else 1


@dataclass
class EntropyLossValue:
    """token - zeta*codebook, all three terms kept for reporting."""

    token_entropy: ad.Tensor
    codebook_entropy: ad.Tensor
    combined: ad.Tensor
    zeta: float


def soft_assignment(x: ad.Tensor, tau: float, cfg: QuantConfig) -> GroupDistribution:
    """Softmax over each group's codes of <x[..., k, :], code>/tau.

    x has shape (..., g, d_prime); the result has shape (..., g, 2^d_prime).
    """
    if tau <= 0:
        raise EntropyError(f"temperature must be positive, got {tau}")
    if x.shape[-2:] != (cfg.g, cfg.d_prime):
        raise EntropyError(f"expected grouped latent (..., {cfg.g}, {cfg.d_prime}), got {x.shape}")
    lead = x.shape[:-1]
    codes = ad.Tensor(codebook(cfg.d_prime).T.astype(x.data.dtype))  # (d_prime, K)
    flat = ad.reshape(x, (-1, cfg.d_prime))
    logits = ad.scale(ad.matmul(flat, codes), 1.0 / tau)
    probs = ad.reshape(ad.softmax(logits), lead + (cfg.codes_per_group,))
    row_tol = _BOUND_TOL if x.data.dtype == np.float64 else 1e-5
    assert abs(float(probs.data.sum(-1, dtype=np.float64).max()) - 1.0) < row_tol
    return GroupDistribution(probs, tau, cfg)


def _assert_entropy_bounds(value: ad.Tensor, dist: GroupDistribution) -> None:
    upper = dist.g * dist.d_prime * math.log(2.0)
    assert -_BOUND_TOL <= value.item() <= upper + max(_BOUND_TOL, 1e-6 * upper), \
        f"entropy {value.item()} outside [0, {upper}]"


def token_entropy(dist: GroupDistribution) -> ad.Tensor:
    """Mean over positions of the summed per-group assignment entropies (nats)."""
    h_per = ad.scale(ad.sum_(ad.plogp(dist.probs), axis=-1), -1.0)  # (..., g)
    out = ad.mean(ad.sum_(h_per, axis=-1))
    _assert_entropy_bounds(out, dist)
    return out


def codebook_entropy(dist: GroupDistribution) -> ad.Tensor:
    """Summed per-group entropies of the position-averaged assignments (nats)."""
    nd = dist.probs.data.ndim
    if nd > 2:
        avg = ad.mean(dist.probs, axis=tuple(range(nd - 2)))  # (g, K)
    else:
        avg = dist.probs
    # per-group row reduction first, mirroring token_entropy's order, so the
    # single-position degeneration is bit-exact
    h_per = ad.scale(ad.sum_(ad.plogp(avg), axis=-1), -1.0)  # (g,)
    out = ad.sum_(h_per)
    _assert_entropy_bounds(out, dist)
    return out


def entropy_loss(dist: GroupDistribution, zeta: float) -> EntropyLossValue:
    if zeta < 0:
        raise EntropyError(f"zeta must be >= 0, got {zeta}")
    tok = token_entropy(dist)
    book = codebook_entropy(dist)
    combined = ad.sub(tok, ad.scale(book, zeta))
    return EntropyLossValue(tok, book, combined, zeta)


# ---------------------------------------------------------------------------
# exhaustive oracle over the full {-1,+1}^d codebook

_ORACLE_MAX_D = 20


def oracle_full_entropy(u: np.ndarray, tau: float) -> tuple[float, float]:
    """Token and codebook entropies by literal enumeration of all 2^d codes.

    u is an ungrouped latent (..., d) with d <= 20; leading axes are
    positions. Plain float64 numpy, no tape: this is the reference the
    grouped path is checked against (and the CLI `oracle` report).
    """
    if tau <= 0:
        raise EntropyError(f"temperature must be positive, got {tau}")
    u = np.asarray(u, dtype=np.float64)
    d = u.shape[-1]
    if d > _ORACLE_MAX_D:
        raise EntropyError(
            f"d={d} enumerates 2^{d} codes; use the grouped path for d > {_ORACLE_MAX_D}")
    flat = u.reshape(-1, d)
    codes = codebook(d)                      # (2^d, d)
    logits = flat @ codes.T / tau            # (P, 2^d)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    token_h = float(np.mean(-_xlogx(p).sum(axis=-1)))
    avg = p.mean(axis=0)
    codebook_h = float(-_xlogx(avg).sum())
    return token_h, codebook_h


def _xlogx(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)


# ---------------------------------------------------------------------------
# memory accounting

def entropy_buffer_footprint(cfg: QuantConfig, h: int, w: int, element_size: int = 4) -> int:
    """Bytes of the largest auxiliary buffer the grouped entropy path allocates."""
    return h * w * cfg.g * cfg.codes_per_group * element_size


def ungrouped_buffer_footprint(cfg: QuantConfig, h: int, w: int, element_size: int = 4) -> int:
    """Bytes the ungrouped path would need: one row per position over all 2^d codes."""
    return h * w * (2 ** cfg.d) * element_size


@dataclass
class AllocationAudit:
    allocations: list[int] = field(default_factory=list)  # element counts

    def record(self, nelem: int, itemsize: int) -> None:
        self.allocations.append(nelem)

    @property
    def max_elements(self) -> int:
        return max(self.allocations, default=0)


@contextlib.contextmanager
def allocation_audit():
    """Record the element count of every tape buffer allocated in the block."""
    audit = AllocationAudit()
    ad._alloc_observers.append(audit.record)
    try:
        yield audit
    finally:
        ad._alloc_observers.remove(audit.record)
