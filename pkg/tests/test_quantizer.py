import numpy as np
import pytest

from gqtok import autodiff as ad
from gqtok import quantizer as qz


def test_group_reshape_definition():
    # d=4, g=2: [a,b,c,d] -> [[a,b],[c,d]]
    cfg = qz.QuantConfig(g=2, d_prime=2)
    u = np.arange(2 * 3 * 4, dtype=np.float64).reshape(2, 3, 4)
    grouped = qz.group_reshape(u, cfg)
    assert grouped.shape == (2, 3, 2, 2)
    assert np.array_equal(grouped[1, 2], [[u[1, 2, 0], u[1, 2, 1]], [u[1, 2, 2], u[1, 2, 3]]])


def test_group_reshape_single_group_is_identity():
    cfg = qz.QuantConfig(g=1, d_prime=6)
    u = np.random.default_rng(0).standard_normal((4, 4, 6))
    grouped = qz.group_reshape(u, cfg)
    assert np.array_equal(grouped[..., 0, :], u)


def test_group_reshape_round_trip():
    rng = np.random.default_rng(1)
    for g, dp in [(1, 8), (2, 4), (4, 2), (8, 1)]:
        cfg = qz.QuantConfig(g=g, d_prime=dp)
        u = rng.standard_normal((3, 5, 8))
        assert np.array_equal(qz.ungroup_reshape(qz.group_reshape(u, cfg), cfg), u)


def test_group_reshape_channel_mismatch():
    with pytest.raises(qz.QuantError):
        qz.group_reshape(np.zeros((2, 2, 5)), qz.QuantConfig(g=2, d_prime=3))


def test_sign_quantize_basics():
    cfg = qz.QuantConfig(g=1, d_prime=2)
    signs, tokens = qz.sign_quantize(np.array([[[[0.5, -0.3]]]]), cfg)
    assert np.array_equal(signs, [[[[1.0, -1.0]]]])
    assert tokens.shape == (1, 1, 1)


def test_sign_quantize_tie_rule():
    cfg = qz.QuantConfig(g=1, d_prime=1)
    signs, _ = qz.sign_quantize(np.array([[[[0.0]]]]), cfg)
    assert signs[0, 0, 0, 0] == 1.0
    neg = qz.QuantConfig(g=1, d_prime=1, tie_break=-1)
    signs, _ = qz.sign_quantize(np.array([[[[0.0]]]]), neg)
    assert signs[0, 0, 0, 0] == -1.0


def test_sign_quantize_rejects_nan():
    cfg = qz.QuantConfig(g=1, d_prime=1)
    with pytest.raises(qz.QuantError):
        qz.sign_quantize(np.array([[[[np.nan]]]]), cfg)


def test_sign_quantize_positive_scaling_invariance():
    cfg = qz.QuantConfig(g=2, d_prime=3)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 4, 2, 3))
    base_signs, base_tokens = qz.sign_quantize(x, cfg)
    for lam in (0.1, 3.0, 100.0):
        s, tks = qz.sign_quantize(lam * x, cfg)
        assert np.array_equal(s, base_signs)
        assert np.array_equal(tks, base_tokens)


def test_sign_quantize_idempotent():
    cfg = qz.QuantConfig(g=2, d_prime=2)
    x = np.random.default_rng(3).standard_normal((3, 3, 2, 2))
    signs, tokens = qz.sign_quantize(x, cfg)
    signs2, tokens2 = qz.sign_quantize(signs, cfg)
    assert np.array_equal(signs, signs2) and np.array_equal(tokens, tokens2)


def test_code_index_conventions():
    assert qz.code_to_index(np.array([-1, -1])) == 0
    assert qz.code_to_index(np.array([+1, +1])) == 3
    assert qz.code_to_index(np.array([+1, -1])) == 2  # MSB-first
    assert np.array_equal(qz.index_to_code(2, 2), [1.0, -1.0])


@pytest.mark.parametrize("d_prime", range(1, 17))
def test_code_index_bijection_exhaustive(d_prime):
    for i in range(2 ** d_prime):
        assert qz.code_to_index(qz.index_to_code(i, d_prime)) == i


def test_vectorized_maps_match_scalar_maps():
    cfg = qz.QuantConfig(g=1, d_prime=4)
    all_tokens = np.arange(16).reshape(1, 16, 1)
    signs = qz.signs_from_tokens(all_tokens, cfg)
    for i in range(16):
        assert np.array_equal(signs[0, i, 0], qz.index_to_code(i, 4))
    assert np.array_equal(qz.tokens_from_signs(signs, cfg), all_tokens)


def test_codebook_rows_match_index_to_code():
    for dp in (1, 2, 3, 5):
        book = qz.codebook(dp)
        for i in range(2 ** dp):
            assert np.array_equal(book[i], qz.index_to_code(i, dp))


def test_index_out_of_range():
    with pytest.raises(qz.QuantError):
        qz.index_to_code(4, 2)
    with pytest.raises(qz.QuantError):
        qz.signs_from_tokens(np.array([4]), qz.QuantConfig(g=1, d_prime=2))


def test_straight_through_value_and_gradient():
    cfg = qz.QuantConfig(g=2, d_prime=2)
    rng = np.random.default_rng(4)
    u = ad.Tensor(rng.standard_normal((2, 2, 2, 2)))
    uq, tokens = qz.quantize_node(u, cfg)
    signs, expect_tokens = qz.sign_quantize(u.data, cfg)
    assert np.array_equal(uq.data, signs)
    assert np.array_equal(tokens, expect_tokens)
    ad.sum_(uq).backward()
    assert np.array_equal(u.grad, np.ones_like(u.data))


def test_gradient_reaches_upstream_parameters_through_ste():
    # 1-layer toy model: target fit through quantization still trains the weight
    cfg = qz.QuantConfig(g=1, d_prime=3)
    rng = np.random.default_rng(5)
    w = ad.Tensor(rng.standard_normal((4, 3)))
    x = ad.Tensor(rng.standard_normal((6, 4)))
    u = ad.reshape(ad.matmul(x, w), (6, 1, 1, 3))
    uq, _ = qz.quantize_node(ad.reshape(u, (6, 1, 1, 3)), cfg)
    target = ad.Tensor(rng.standard_normal((6, 1, 1, 3)))
    diff = ad.sub(uq, target)
    ad.mean(ad.mul(diff, diff)).backward()
    assert w.grad is not None and np.any(w.grad != 0)


def test_bad_config_rejected():
    with pytest.raises(qz.QuantError):
        qz.QuantConfig(g=0, d_prime=2)
    with pytest.raises(qz.QuantError):
        qz.QuantConfig(g=1, d_prime=2, tie_break=0)
    with pytest.raises(qz.QuantError):
        qz.QuantConfig(g=1, d_prime=2, pre_activation="l2")
