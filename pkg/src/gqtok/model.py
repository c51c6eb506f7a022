"""Desk-scale convolutional encoder, decoder, and patch discriminator.

Small residual CNNs sized to train on a CPU in minutes while exercising the
full pipeline: stride-2 convs downsample by f, transposed convs mirror the
path back up, and the decoder can run in generative mode where a standard
normal noise map is consumed through a separate conv_in kernel. That kernel
is added by `expand_input_zero_init` with all-zero weights, so right after
expansion the decoder computes exactly what the pre-expansion decoder did,
bit for bit, for any noise input.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    in_channels: int = 1
    base_channels: int = 16
    channel_mult: tuple[int, ...] = (1, 2)
    n_res_blocks: int = 1
    f: int = 4              # spatial downsample factor
    d: int = 8              # latent channels

    def __post_init__(self):
        if self.f not in (2, 4, 8):
            raise ModelError(f"downsample factor must be 2, 4 or 8, got {self.f}")

    @property
    def n_levels(self) -> int:
        return int(math.log2(self.f)) + 1

    def level_channels(self, i: int) -> int:
        mult = self.channel_mult[min(i, len(self.channel_mult) - 1)]
        return self.base_channels * mult


@dataclass(frozen=True)
class DecoderSpec(EncoderSpec):
    n_z: int = 0
    generative: bool = False


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 1
    base_channels: int = 16
    n_layers: int = 3


@dataclass
class NoisePrior:
    """Standard normal noise maps matching the token grid; seeded, stateful."""

    n_z: int
    h: int
    w: int
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def sample(self, batch: int | None = None, dtype=np.float64) -> np.ndarray:
        shape = (self.h, self.w, self.n_z) if batch is None else (batch, self.h, self.w, self.n_z)
        return self._rng.standard_normal(shape).astype(dtype)


def _he_conv(rng, kh, kw, cin, cout, dtype):
    std = math.sqrt(2.0 / (kh * kw * cin))
    return (rng.standard_normal((kh, kw, cin, cout)) * std).astype(dtype)


class _ConvNet:
    """Shared parameter bookkeeping for the three models."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, ad.Tensor] = {}

    def _add_conv(self, rng, name, kh, kw, cin, cout):
        self.params[f"{name}.w"] = ad.Tensor(_he_conv(rng, kh, kw, cin, cout, self.dtype))
        self.params[f"{name}.b"] = ad.Tensor(np.zeros(cout, dtype=self.dtype))

    def _conv(self, name, x, stride=1, pad=1):
        return ad.add(ad.conv2d(x, self.params[f"{name}.w"], stride, pad),
                      self.params[f"{name}.b"])

    def _res_block(self, name, x):
        h = ad.relu(self._conv(f"{name}.conv1", x))
        return ad.add(x, self._conv(f"{name}.conv2", h))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ModelError(f"state is missing parameters: {sorted(missing)}")
        for k in self.params:
            arr = np.asarray(state[k])
            if arr.shape != self.params[k].shape:
                raise ModelError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k] = ad.Tensor(arr.astype(self.dtype))

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _as_batch(x) -> tuple[ad.Tensor, bool]:
    if isinstance(x, np.ndarray):
        x = ad.Tensor(x)
    if x.data.ndim == 3:
        return ad.reshape(x, (1,) + x.shape), True
    if x.data.ndim == 4:
        return x, False
    raise ModelError(f"expected (H,W,C) or (N,H,W,C), got shape {x.shape}")


def _maybe_squeeze(x: ad.Tensor, squeeze: bool) -> ad.Tensor:
    return ad.reshape(x, x.shape[1:]) if squeeze else x


class Encoder(_ConvNet):
    def __init__(self, spec: EncoderSpec, seed: int = 0, dtype=np.float32):
        super().__init__(dtype)
        self.spec = spec
        rng = np.random.default_rng(seed)
        self._add_conv(rng, "conv_in", 3, 3, spec.in_channels, spec.level_channels(0))
        for i in range(spec.n_levels):
            ch = spec.level_channels(i)
            for r in range(spec.n_res_blocks):
                self._add_conv(rng, f"level{i}.res{r}.conv1", 3, 3, ch, ch)
                self._add_conv(rng, f"level{i}.res{r}.conv2", 3, 3, ch, ch)
            if i < spec.n_levels - 1:
                self._add_conv(rng, f"down{i}", 3, 3, ch, spec.level_channels(i + 1))
        self._add_conv(rng, "conv_out", 3, 3, spec.level_channels(spec.n_levels - 1), spec.d)

    def encode(self, images) -> ad.Tensor:
        x, squeeze = _as_batch(images)
        _, h, w, c = x.shape
        if c != self.spec.in_channels:
            raise ModelError(f"expected {self.spec.in_channels} input channels, got {c}")
        if h % self.spec.f or w % self.spec.f:
            raise ModelError(f"image dims {h}x{w} not divisible by f={self.spec.f}")
        if np.abs(x.data).max() > 1.0 + 1e-6:
            raise ModelError("pixel values must lie in [-1, 1]")
        x = self._conv("conv_in", x)
        for i in range(self.spec.n_levels):
            for r in range(self.spec.n_res_blocks):
                x = self._res_block(f"level{i}.res{r}", x)
            if i < self.spec.n_levels - 1:
                x = self._conv(f"down{i}", x, stride=2)
        return _maybe_squeeze(self._conv("conv_out", x), squeeze)


class Decoder(_ConvNet):
    def __init__(self, spec: DecoderSpec, seed: int = 0, dtype=np.float32):
        super().__init__(dtype)
        if spec.generative and spec.n_z < 1:
            raise ModelError("generative decoder needs n_z >= 1")
        self.spec = spec
        rng = np.random.default_rng(seed)
        top = spec.n_levels - 1
        self._add_conv(rng, "conv_in", 3, 3, spec.d, spec.level_channels(top))
        if spec.generative:
            # separate noise kernel: widening conv_in without touching it
            self.params["conv_in_noise.w"] = ad.Tensor(
                np.zeros((3, 3, spec.n_z, spec.level_channels(top)), dtype=self.dtype))
        for i in range(top, -1, -1):
            ch = spec.level_channels(i)
            for r in range(spec.n_res_blocks):
                self._add_conv(rng, f"level{i}.res{r}.conv1", 3, 3, ch, ch)
                self._add_conv(rng, f"level{i}.res{r}.conv2", 3, 3, ch, ch)
            if i > 0:
                self._add_conv(rng, f"up{i}", 4, 4, ch, spec.level_channels(i - 1))
        self._add_conv(rng, "conv_out", 3, 3, spec.level_channels(0), spec.in_channels)

    def decode(self, q, z=None) -> ad.Tensor:
        x, squeeze = _as_batch(q)
        if x.shape[3] != self.spec.d:
            raise ModelError(f"expected {self.spec.d} latent channels, got {x.shape[3]}")
        h = self._conv("conv_in", x)
        if self.spec.generative:
            if z is None:
                raise ModelError("generative decoder requires a noise map z")
            zt, _ = _as_batch(z)
            if zt.shape[:3] != x.shape[:3] or zt.shape[3] != self.spec.n_z:
                raise ModelError(f"noise shape {zt.shape} does not match latent {x.shape}")
            h = ad.add(h, ad.conv2d(zt, self.params["conv_in_noise.w"], 1, 1))
        elif z is not None:
            raise ModelError("decoder was not expanded for noise input")
        top = self.spec.n_levels - 1
        for i in range(top, -1, -1):
            for r in range(self.spec.n_res_blocks):
                h = self._res_block(f"level{i}.res{r}", h)
            if i > 0:
                h = ad.conv2d_transpose(h, self.params[f"up{i}.w"], stride=2, pad=1)
                h = ad.add(h, self.params[f"up{i}.b"])
        return _maybe_squeeze(ad.tanh(self._conv("conv_out", h)), squeeze)


def expand_input_zero_init(decoder: Decoder, n_z: int) -> Decoder:
    """Widen the decoder input to accept n_z noise channels, zero-initialized.

    The original kernels are carried over by reference (bit-exact); the new
    noise kernel is exactly zero, so outputs are unchanged for any z until
    training moves it.
    """
    if decoder.spec.generative:
        raise ModelError("decoder is already expanded")
    if n_z < 1:
        raise ModelError(f"n_z must be >= 1, got {n_z}")
    expanded = Decoder.__new__(Decoder)
    _ConvNet.__init__(expanded, decoder.dtype)
    expanded.spec = replace(decoder.spec, n_z=n_z, generative=True)
    expanded.params = dict(decoder.params)
    top = decoder.spec.n_levels - 1
    expanded.params["conv_in_noise.w"] = ad.Tensor(
        np.zeros((3, 3, n_z, decoder.spec.level_channels(top)), dtype=decoder.dtype))
    return expanded


class Discriminator(_ConvNet):
    def __init__(self, spec: DiscriminatorSpec, seed: int = 0, dtype=np.float32):
        super().__init__(dtype)
        self.spec = spec
        rng = np.random.default_rng(seed)
        cin = spec.in_channels
        for i in range(spec.n_layers):
            cout = spec.base_channels * 2 ** i
            self._add_conv(rng, f"layer{i}", 3, 3, cin, cout)
            cin = cout
        self._add_conv(rng, "head", 3, 3, cin, 1)

    def discriminate(self, images) -> ad.Tensor:
        x, squeeze = _as_batch(images)
        for i in range(self.spec.n_layers):
            x = ad.leaky_relu(self._conv(f"layer{i}", x, stride=2), 0.2)
        return _maybe_squeeze(self._conv("head", x), squeeze)


# ---------------------------------------------------------------------------
# checkpoint file: magic, version, then (name, shape, float32 LE data) blobs

CKPT_MAGIC = b"GQCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(state)))
        for name, arr in state.items():
            arr = np.asarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)) + encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    version, count = struct.unpack_from("<BI", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 9
    state: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            state[name] = arr.copy()
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from None
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes in checkpoint")
    return state
