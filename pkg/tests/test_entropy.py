import itertools
import math

import numpy as np
import pytest

from gqtok import autodiff as ad
from gqtok import entropy as ent
from gqtok.quantizer import QuantConfig, group_reshape

from oracles import fd_grad, rel_err

LN2 = math.log(2.0)


def dist_of(u, cfg, tau=1.0):
    grouped = group_reshape(np.asarray(u, dtype=np.float64), cfg)
    return ent.soft_assignment(ad.Tensor(grouped), tau, cfg)


# ---------------------------------------------------------------------------
# soft assignment

def test_soft_assignment_symmetry_d1():
    d = dist_of(np.zeros((1, 1, 1)), QuantConfig(g=1, d_prime=1))
    assert np.array_equal(d.probs.data[0, 0, 0], [0.5, 0.5])


def test_soft_assignment_symmetry_d2():
    d = dist_of(np.zeros((1, 1, 2)), QuantConfig(g=1, d_prime=2))
    assert np.allclose(d.probs.data[0, 0, 0], [0.25] * 4, rtol=0, atol=1e-15)


def test_soft_assignment_marginal_matches_enumeration():
    # independent enumeration of all 4 codes for u=[1,0], tau=1
    u = np.array([1.0, 0.0])
    logits = []
    plus_bit0 = []
    for m, code in enumerate(itertools.product([-1.0, 1.0], repeat=2)):
        logits.append(float(u @ np.array(code)))
        plus_bit0.append(code[0] > 0)
    p = np.exp(logits)
    p /= p.sum()
    marginal = p[np.array(plus_bit0)].sum()
    assert abs(marginal - 1.0 / (1.0 + math.exp(-2.0))) < 1e-12  # sigma(2)

    d = dist_of(u.reshape(1, 1, 2), QuantConfig(g=1, d_prime=2))
    # package convention: bit0 (MSB) = +1 for indices >= 2
    assert abs(d.probs.data[0, 0, 0, 2:].sum() - marginal) < 1e-9


def test_soft_assignment_rejects_bad_tau():
    with pytest.raises(ent.EntropyError):
        dist_of(np.zeros((1, 1, 2)), QuantConfig(g=1, d_prime=2), tau=0.0)
    with pytest.raises(ent.EntropyError):
        dist_of(np.zeros((1, 1, 2)), QuantConfig(g=1, d_prime=2), tau=-1.0)


# ---------------------------------------------------------------------------
# token entropy

def test_token_entropy_uniform_is_max():
    cfg = QuantConfig(g=2, d_prime=3)
    d = dist_of(np.zeros((3, 4, 6)), cfg)
    assert abs(ent.token_entropy(d).item() - cfg.d * LN2) < 1e-12


def test_token_entropy_saturated_limit_is_zero():
    cfg = QuantConfig(g=2, d_prime=2)
    rng = np.random.default_rng(0)
    u = 80.0 * np.sign(rng.standard_normal((3, 3, 4)))
    assert ent.token_entropy(dist_of(u, cfg)).item() < 1e-9


def test_token_entropy_matches_full_codebook_oracle():
    rng = np.random.default_rng(1)
    for d, hw in [(4, (2, 3)), (8, (2, 2)), (12, (1, 4)), (16, (1, 2))]:
        u = rng.standard_normal(hw + (d,))
        token_exact, _ = ent.oracle_full_entropy(u, tau=1.0)
        for g in [k for k in range(1, d + 1) if d % k == 0]:
            cfg = QuantConfig(g=g, d_prime=d // g)
            tok = ent.token_entropy(dist_of(u, cfg)).item()
            assert abs(tok - token_exact) < 1e-9, (d, g)


# ---------------------------------------------------------------------------
# codebook entropy

def test_codebook_entropy_single_position_equals_token():
    cfg = QuantConfig(g=2, d_prime=2)
    u = np.random.default_rng(2).standard_normal((1, 1, 4))
    d = dist_of(u, cfg)
    assert ent.codebook_entropy(d).item() == ent.token_entropy(d).item()


def test_codebook_entropy_identical_positions():
    cfg = QuantConfig(g=2, d_prime=2)
    row = np.random.default_rng(3).standard_normal(4)
    u = np.broadcast_to(row, (4, 4, 4)).copy()
    d = dist_of(u, cfg)
    single = dist_of(row.reshape(1, 1, 4), cfg)
    assert abs(ent.codebook_entropy(d).item() - ent.codebook_entropy(single).item()) < 1e-12


def test_codebook_entropy_subadditivity():
    rng = np.random.default_rng(4)
    for case in range(50):
        d = int(rng.choice([4, 6, 8, 12]))
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        u = rng.standard_normal((h, w, d))
        _, book_exact = ent.oracle_full_entropy(u, tau=1.0)
        for g in [k for k in range(1, d + 1) if d % k == 0]:
            cfg = QuantConfig(g=g, d_prime=d // g)
            grouped = ent.codebook_entropy(dist_of(u, cfg)).item()
            assert grouped >= book_exact - 1e-9, (case, d, g)
            if g == 1:
                assert abs(grouped - book_exact) < 1e-9


# ---------------------------------------------------------------------------
# combined loss

def test_entropy_loss_zeta_zero():
    cfg = QuantConfig(g=2, d_prime=2)
    d = dist_of(np.random.default_rng(5).standard_normal((2, 2, 4)), cfg)
    loss = ent.entropy_loss(d, zeta=0.0)
    assert loss.combined.item() == loss.token_entropy.item()


def test_entropy_loss_uniform_any_zeta():
    cfg = QuantConfig(g=3, d_prime=2)
    d = dist_of(np.zeros((2, 2, 6)), cfg)
    for zeta in (0.0, 0.5, 1.0, 2.0):
        loss = ent.entropy_loss(d, zeta)
        assert abs(loss.combined.item() - (1 - zeta) * cfg.d * LN2) < 1e-9


def test_entropy_loss_recomputation_oracle():
    cfg = QuantConfig(g=2, d_prime=3)
    d = dist_of(np.random.default_rng(6).standard_normal((3, 2, 6)), cfg)
    loss = ent.entropy_loss(d, zeta=0.7)
    expect = ent.token_entropy(d).item() - 0.7 * ent.codebook_entropy(d).item()
    assert abs(loss.combined.item() - expect) < 1e-12
    with pytest.raises(ent.EntropyError):
        ent.entropy_loss(d, zeta=-0.1)


# ---------------------------------------------------------------------------
# exhaustive oracle self-checks

def test_oracle_d1_zero_latent():
    token_h, _ = ent.oracle_full_entropy(np.zeros((1, 1, 1)), tau=1.0)
    assert abs(token_h - LN2) < 1e-15


def test_oracle_matches_single_group():
    u = np.random.default_rng(7).standard_normal((2, 3, 2))
    token_exact, book_exact = ent.oracle_full_entropy(u, tau=1.0)
    cfg = QuantConfig(g=1, d_prime=2)
    d = dist_of(u, cfg)
    assert abs(ent.token_entropy(d).item() - token_exact) < 1e-12
    assert abs(ent.codebook_entropy(d).item() - book_exact) < 1e-12


def test_oracle_grouping_sweep_d8():
    u = np.random.default_rng(8).standard_normal((2, 2, 8))
    token_exact, _ = ent.oracle_full_entropy(u, tau=1.0)
    books = []
    for g in (1, 2, 4, 8):
        cfg = QuantConfig(g=g, d_prime=8 // g)
        d = dist_of(u, cfg)
        assert abs(ent.token_entropy(d).item() - token_exact) < 1e-9
        books.append(ent.codebook_entropy(d).item())
    assert all(b2 >= b1 - 1e-12 for b1, b2 in zip(books, books[1:]))


def test_oracle_rejects_large_d():
    with pytest.raises(ent.EntropyError):
        ent.oracle_full_entropy(np.zeros((1, 1, 21)), tau=1.0)


# ---------------------------------------------------------------------------
# gradients

def entropy_value(u_flat, cfg, tau, which):
    grouped = ad.Tensor(u_flat.reshape(2, 2, cfg.g, cfg.d_prime))
    d = ent.soft_assignment(grouped, tau, cfg)
    return (ent.token_entropy(d) if which == "token" else ent.codebook_entropy(d)), grouped


@pytest.mark.parametrize("which", ["token", "codebook"])
def test_entropy_gradients_match_fd(which):
    cfg = QuantConfig(g=2, d_prime=3)
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        u = rng.standard_normal((2, 2, cfg.g, cfg.d_prime))
        node, grouped = entropy_value(u, cfg, 1.0, which)
        node.backward()

        def f(arr):
            val, _ = entropy_value(arr, cfg, 1.0, which)
            return val.item()

        assert rel_err(grouped.grad, fd_grad(f, u).reshape(grouped.shape)) <= 1e-4


# ---------------------------------------------------------------------------
# memory accounting

def test_footprint_arithmetic():
    assert ent.entropy_buffer_footprint(QuantConfig(g=1, d_prime=24), 16, 16) == 16 * 16 * 2**24 * 4
    assert ent.entropy_buffer_footprint(QuantConfig(g=3, d_prime=8), 16, 16) == 16 * 16 * 3 * 256 * 4
    assert ent.entropy_buffer_footprint(QuantConfig(g=1, d_prime=1), 7, 9) == 2 * 7 * 9 * 4
    assert ent.ungrouped_buffer_footprint(QuantConfig(g=1, d_prime=24), 16, 16) == \
        ent.entropy_buffer_footprint(QuantConfig(g=1, d_prime=24), 16, 16)
    assert ent.ungrouped_buffer_footprint(QuantConfig(g=4, d_prime=8), 16, 16) == 16 * 16 * 2**32 * 4


def test_grouped_path_never_allocates_full_codebook():
    h = w = 4
    for g, dp in [(2, 4), (4, 3), (3, 4)]:
        cfg = QuantConfig(g=g, d_prime=dp)
        u = np.random.default_rng(9).standard_normal((h, w, cfg.d))
        grouped_cap = h * w * g * 2**dp
        full = h * w * 2**cfg.d
        with ent.allocation_audit() as audit:
            d = dist_of(u, cfg)
            loss = ent.entropy_loss(d, zeta=1.0)
            loss.combined.backward()
        assert audit.max_elements <= grouped_cap
        assert all(a < full for a in audit.allocations)
