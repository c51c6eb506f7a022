import itertools

import numpy as np
import pytest

from gqtok import codec
from gqtok.quantizer import QuantConfig


def test_single_token_payload_convention():
    # h=w=1, g=1, d_prime=2, index 3 -> 0b11000000
    bs = codec.pack(np.array([[[3]]]), QuantConfig(g=1, d_prime=2), (4, 4))
    assert bs.payload == bytes([0b11000000])


def test_header_layout_little_endian():
    bs = codec.pack(np.array([[[1]]]), QuantConfig(g=1, d_prime=2), (256, 512))
    raw = bs.to_bytes()
    assert raw[:4] == b"WTOK"
    assert raw[4] == 1
    assert int.from_bytes(raw[5:7], "little") == 256
    assert int.from_bytes(raw[7:9], "little") == 512
    assert codec.Bitstream.from_bytes(raw) == bs


def test_round_trip_exhaustive_tiny_grids():
    # every possible grid for a few shapes with h*w*g*d_prime <= 16 bits
    for (h, w, g, dp) in [(1, 1, 1, 2), (1, 2, 2, 2), (2, 2, 1, 3), (1, 1, 4, 3)]:
        cfg = QuantConfig(g=g, d_prime=dp)
        n_slots = h * w * g
        for combo in itertools.product(range(2 ** dp), repeat=n_slots):
            tokens = np.array(combo).reshape(h, w, g)
            bs = codec.pack(tokens, cfg, (8, 8))
            assert np.array_equal(codec.unpack(bs), tokens)


def test_round_trip_randomized_1000():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        dp = int(rng.integers(1, 17))
        g = int(rng.integers(1, 5))
        h = int(rng.integers(1, 7))
        w = int(rng.integers(1, 7))
        cfg = QuantConfig(g=g, d_prime=dp)
        tokens = rng.integers(0, 2 ** dp, size=(h, w, g))
        bs = codec.pack(tokens, cfg, (h * 4, w * 4))
        rt = codec.Bitstream.from_bytes(bs.to_bytes())
        assert np.array_equal(codec.unpack(rt), tokens)


def test_pack_deterministic_bytes():
    rng = np.random.default_rng(1)
    tokens = rng.integers(0, 16, size=(3, 5, 2))
    cfg = QuantConfig(g=2, d_prime=4)
    assert codec.pack(tokens, cfg, (12, 20)).to_bytes() == codec.pack(tokens, cfg, (12, 20)).to_bytes()


def test_golden_bytes_stable():
    # frozen byte stream: any change to header or bit order breaks this
    tokens = np.arange(8).reshape(2, 2, 2)
    bs = codec.pack(tokens, QuantConfig(g=2, d_prime=3), (8, 8))
    assert bs.to_bytes().hex() == "57544f4b0108000800020002000203" + "053977"


def test_decode_errors():
    with pytest.raises(codec.BitstreamError):
        codec.Bitstream.from_bytes(b"NOPE" + bytes(11))
    with pytest.raises(codec.BitstreamError):
        codec.Bitstream.from_bytes(b"WTOK" + bytes([9]) + bytes(10))
    good = codec.pack(np.array([[[1]]]), QuantConfig(g=1, d_prime=4), (4, 4)).to_bytes()
    with pytest.raises(codec.BitstreamError):
        codec.Bitstream.from_bytes(good[:-1])
    with pytest.raises(codec.BitstreamError):
        codec.Bitstream.from_bytes(good + b"x")
    with pytest.raises(codec.BitstreamError):
        codec.Bitstream.from_bytes(good[:6])


def test_pack_rejects_bad_tokens():
    cfg = QuantConfig(g=1, d_prime=2)
    with pytest.raises(codec.BitstreamError):
        codec.pack(np.array([[[4]]]), cfg, (4, 4))
    with pytest.raises(codec.BitstreamError):
        codec.pack(np.array([[[-1]]]), cfg, (4, 4))
    with pytest.raises(codec.BitstreamError):
        codec.pack(np.zeros((0, 1, 1), dtype=int), cfg, (4, 4))


def test_wtok_file_round_trip(tmp_path):
    tokens = np.random.default_rng(2).integers(0, 256, size=(4, 4, 4))
    cfg = QuantConfig(g=4, d_prime=8)
    bs = codec.pack(tokens, cfg, (16, 16))
    path = tmp_path / "t.wtok"
    codec.write_wtok(path, bs)
    assert np.array_equal(codec.unpack(codec.read_wtok(path)), tokens)


def test_compression_ratio_table_values():
    # 256x256x3 at 8 bits per channel, the four documented configurations
    assert codec.compression_ratio(256, 256, 8, 8, 4, 8) == 768.0
    assert codec.compression_ratio(256, 256, 16, 16, 4, 8) == 192.0
    assert codec.compression_ratio(256, 256, 32, 32, 4, 8) == 48.0
    assert codec.compression_ratio(256, 256, 32, 32, 8, 8) == 24.0


def test_compression_ratio_from_stream_header():
    bs = codec.pack(np.zeros((8, 8, 4), dtype=int), QuantConfig(g=4, d_prime=8), (256, 256))
    assert codec.stream_compression_ratio(bs) == 768.0
