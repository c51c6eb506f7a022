"""Two-stage training: reconstruction + grouped entropy first, then the
noise-conditioned decoder against a patch discriminator.

Stage 1 minimizes mse(I, I_hat) + w_e * (token_H - zeta * codebook_H), with
an optional commitment term behind `commitment_weight` (default 0). Stage 2
expands the decoder input with a zero-initialized noise kernel, then
alternates one generator step (reconstruction + entropy + gan_weight *
log(1 - D(G(z, q)))) with one discriminator step (-log D(I) - log(1 - D(I_hat))).
Everything is seeded; identical (seed, config, data) gives bit-identical
loss reports and checkpoints.

Training data is synthetic: seeded gradients, stripes, and checkerboards.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import entropy as ent
from .model import (Decoder, DecoderSpec, Discriminator, DiscriminatorSpec,
                    Encoder, EncoderSpec, NoisePrior, expand_input_zero_init,
                    save_checkpoint)
from .quantizer import QuantConfig, quantize_node


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    steps: int = 200
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    entropy_weight: float = 0.1
    zeta: float = 1.0
    gan_weight: float = 0.1
    commitment_weight: float = 0.0
    non_saturating: bool = False
    ema: bool = False
    ema_decay: float = 0.999
    tau: float = 1.0
    seed: int = 0
    image_size: int = 16
    image_channels: int = 1
    dataset_size: int = 8
    f: int = 4
    g: int = 2
    d_prime: int = 4
    base_channels: int = 16
    channel_mult: tuple[int, ...] = (1, 2)
    n_res_blocks: int = 1
    n_z: int = 0            # 0 means "use d"
    pre_activation: str = "none"

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.ema and not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in (0,1), got {self.ema_decay}")
        if self.image_size % self.f:
            raise ConfigError(f"image_size {self.image_size} not divisible by f={self.f}")

    @property
    def d(self) -> int:
        return self.g * self.d_prime

    @property
    def noise_channels(self) -> int:
        return self.n_z if self.n_z > 0 else self.d

    def quant(self) -> QuantConfig:
        return QuantConfig(g=self.g, d_prime=self.d_prime, pre_activation=self.pre_activation)


# ---------------------------------------------------------------------------
# config file: UTF-8 "key = value" lines mirroring TrainConfig field names

_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELDS[name].type
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if kind == "str":
        return raw
    return tuple(int(v) for v in raw.split(","))  # channel_mult


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return dataclasses.replace(base or TrainConfig(), **values)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), base)


def apply_overrides(cfg: TrainConfig, assignments: list[str]) -> TrainConfig:
    values = {}
    for a in assignments:
        if "=" not in a:
            raise ConfigError(f"override must look like key=value, got {a!r}")
        key, raw = a.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return dataclasses.replace(cfg, **values)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# synthetic training data

def synthetic_images(n: int, size: int, channels: int, seed: int) -> np.ndarray:
    """Seeded gradients, stripes, and checkerboards in [-1, 1]; (n, size, size, C)."""
    rng = np.random.default_rng(seed)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.empty((n, size, size, channels))
    for idx in range(n):
        kind = idx % 3
        for c in range(channels):
            if kind == 0:  # oriented linear gradient
                theta = rng.uniform(0, 2 * math.pi)
                ramp = math.cos(theta) * ii + math.sin(theta) * jj
                img = ramp / max(np.abs(ramp).max(), 1e-9)
            elif kind == 1:  # sinusoidal stripes
                period = rng.uniform(2.0, size / 2)
                phase = rng.uniform(0, 2 * math.pi)
                theta = rng.uniform(0, 2 * math.pi)
                img = np.sin(2 * math.pi * (math.cos(theta) * ii + math.sin(theta) * jj)
                             / period + phase)
            else:  # checkerboard
                cell = int(rng.integers(1, max(2, size // 4) + 1))
                oi, oj = rng.integers(0, cell, 2)
                img = np.where(((ii + oi) // cell + (jj + oj) // cell) % 2 == 0, 1.0, -1.0)
            out[idx, :, :, c] = img
    return np.clip(out, -1.0, 1.0)


# ---------------------------------------------------------------------------
# optimizer and EMA

class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr: float,
                 beta1: float = 0.5, beta2: float = 0.9, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def ema_update(shadow: dict[str, np.ndarray], params: dict[str, ad.Tensor],
               decay: float) -> None:
    """shadow <- decay*shadow + (1-decay)*weights, in place."""
    if not 0.0 <= decay <= 1.0:
        raise ConfigError(f"ema decay must be in [0,1], got {decay}")
    for k, p in params.items():
        data = p.data if isinstance(p, ad.Tensor) else p
        shadow[k] = decay * shadow[k] + (1.0 - decay) * data


# ---------------------------------------------------------------------------
# loss reporting

REPORT_FIELDS = ("step", "recon", "token_h", "codebook_h", "gan_g", "gan_d",
                 "total", "usage_mean")


@dataclass(frozen=True)
class LossReport:
    step: int
    recon: float
    token_h: float
    codebook_h: float
    gan_g: float
    gan_d: float
    commitment: float
    total: float
    usage: tuple[float, ...]   # per-group codebook usage on the step's batch

    @property
    def usage_mean(self) -> float:
        return float(np.mean(self.usage))

    def csv_row(self) -> str:
        return ",".join(repr(getattr(self, f)) if f != "step" else str(self.step)
                        for f in REPORT_FIELDS)


def write_report_csv(path, reports: list[LossReport]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(REPORT_FIELDS) + "\n")
        for r in reports:
            f.write(r.csv_row() + "\n")


def codebook_usage(tokens: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Fraction of distinct indices seen per group; tokens is (..., g)."""
    tokens = np.asarray(tokens).reshape(-1, cfg.g)
    return np.array([len(np.unique(tokens[:, k])) / cfg.codes_per_group
                     for k in range(cfg.g)])


# ---------------------------------------------------------------------------
# model bundle

class Tokenizer:
    """Encoder + quantizer + decoder wired per a TrainConfig."""

    def __init__(self, cfg: TrainConfig, dtype=np.float32, generative: bool = False):
        self.cfg = cfg
        self.quant = cfg.quant()
        espec = EncoderSpec(in_channels=cfg.image_channels, base_channels=cfg.base_channels,
                            channel_mult=cfg.channel_mult, n_res_blocks=cfg.n_res_blocks,
                            f=cfg.f, d=cfg.d)
        dspec = DecoderSpec(in_channels=cfg.image_channels, base_channels=cfg.base_channels,
                            channel_mult=cfg.channel_mult, n_res_blocks=cfg.n_res_blocks,
                            f=cfg.f, d=cfg.d,
                            n_z=cfg.noise_channels if generative else 0,
                            generative=generative)
        self.encoder = Encoder(espec, seed=cfg.seed, dtype=dtype)
        self.decoder = Decoder(dspec, seed=cfg.seed + 1, dtype=dtype)

    def latent(self, images) -> ad.Tensor:
        u = self.encoder.encode(images)
        if self.quant.pre_activation == "tanh":
            u = ad.tanh(u)
        return u

    def grouped(self, u: ad.Tensor) -> ad.Tensor:
        return ad.reshape(u, u.shape[:-1] + (self.quant.g, self.quant.d_prime))

    def quantize(self, images):
        """-> (quantized latent node (N,h,w,d), grouped latent node, tokens)."""
        u = self.latent(images)
        grouped = self.grouped(u)
        uq_grouped, tokens = quantize_node(grouped, self.quant)
        return ad.reshape(uq_grouped, u.shape), grouped, tokens

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"enc.{k}": v for k, v in self.encoder.state_dict().items()}
        state.update({f"dec.{k}": v for k, v in self.decoder.state_dict().items()})
        state.update(_meta_state(self.cfg, self.decoder.spec))
        return state

    def params(self) -> dict[str, ad.Tensor]:
        out = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.params.items()})
        return out


_META_KEYS = ("stage", "image_channels", "image_size", "f", "g", "d_prime",
              "base_channels", "n_res_blocks", "n_z", "generative", "tau", "pre_tanh")


def _meta_state(cfg: TrainConfig, dspec: DecoderSpec) -> dict[str, np.ndarray]:
    scalars = {
        "stage": 2 if dspec.generative else 1,
        "image_channels": cfg.image_channels,
        "image_size": cfg.image_size,
        "f": cfg.f, "g": cfg.g, "d_prime": cfg.d_prime,
        "base_channels": cfg.base_channels, "n_res_blocks": cfg.n_res_blocks,
        "n_z": dspec.n_z, "generative": int(dspec.generative), "tau": cfg.tau,
        "pre_tanh": int(cfg.pre_activation == "tanh"),
    }
    meta = {f"meta.{k}": np.array([float(v)], dtype=np.float32) for k, v in scalars.items()}
    meta["meta.channel_mult"] = np.array(cfg.channel_mult, dtype=np.float32)
    return meta


def config_from_state(state: dict[str, np.ndarray], base: TrainConfig | None = None) -> TrainConfig:
    try:
        get = lambda k: float(state[f"meta.{k}"][0])
        mult = tuple(int(v) for v in state["meta.channel_mult"])
    except KeyError as e:
        raise ConfigError(f"checkpoint is missing metadata entry {e}") from None
    base = base or TrainConfig()
    return dataclasses.replace(
        base,
        stage=int(get("stage")),
        image_channels=int(get("image_channels")), image_size=int(get("image_size")),
        f=int(get("f")), g=int(get("g")), d_prime=int(get("d_prime")),
        base_channels=int(get("base_channels")), n_res_blocks=int(get("n_res_blocks")),
        n_z=int(get("n_z")), channel_mult=mult, tau=get("tau"),
        pre_activation="tanh" if get("pre_tanh") else "none")


def tokenizer_from_state(state: dict[str, np.ndarray], dtype=np.float32) -> Tokenizer:
    cfg = config_from_state(state)
    generative = bool(int(state["meta.generative"][0]))
    tok = Tokenizer(cfg, dtype=dtype, generative=generative)
    tok.encoder.load_state({k[4:]: v for k, v in state.items() if k.startswith("enc.")})
    tok.decoder.load_state({k[4:]: v for k, v in state.items() if k.startswith("dec.")})
    return tok


# ---------------------------------------------------------------------------
# loss assembly

def _mse(a: ad.Tensor, b) -> ad.Tensor:
    diff = ad.sub(a, b if isinstance(b, ad.Tensor) else ad.Tensor(np.asarray(b, a.data.dtype)))
    return ad.mean(ad.mul(diff, diff))


@dataclass
class StageLosses:
    recon: ad.Tensor
    token_h: ad.Tensor
    codebook_h: ad.Tensor
    commitment: ad.Tensor | None
    total: ad.Tensor
    tokens: np.ndarray


def stage1_losses(tok: Tokenizer, batch: np.ndarray, cfg: TrainConfig) -> StageLosses:
    uq, grouped, tokens = tok.quantize(batch)
    recon = _mse(tok.decoder.decode(uq), batch)
    dist = ent.soft_assignment(grouped, cfg.tau, tok.quant)
    eloss = ent.entropy_loss(dist, cfg.zeta)
    total = ad.add(recon, ad.scale(eloss.combined, cfg.entropy_weight))
    commitment = None
    if cfg.commitment_weight > 0:
        commitment = _mse(grouped, uq.data.reshape(grouped.shape))
        total = ad.add(total, ad.scale(commitment, cfg.commitment_weight))
    return StageLosses(recon, eloss.token_entropy, eloss.codebook_entropy,
                       commitment, total, tokens)


def generator_gan_term(disc: Discriminator, fake: ad.Tensor, non_saturating: bool) -> ad.Tensor:
    logits = disc.discriminate(fake)
    if non_saturating:
        return ad.mean(ad.softplus(ad.scale(logits, -1.0)))   # -log D(fake)
    return ad.scale(ad.mean(ad.softplus(logits)), -1.0)       # log(1 - D(fake))


def discriminator_loss(disc: Discriminator, real: np.ndarray, fake_values: np.ndarray) -> ad.Tensor:
    """-log D(real) - log(1 - D(fake)); fake enters as a constant."""
    real_logits = disc.discriminate(ad.Tensor(np.asarray(real, disc.dtype)))
    fake_logits = disc.discriminate(ad.Tensor(fake_values))
    return ad.add(ad.mean(ad.softplus(ad.scale(real_logits, -1.0))),
                  ad.mean(ad.softplus(fake_logits)))


# ---------------------------------------------------------------------------
# training loops

@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    reports: list[LossReport]
    config: TrainConfig
    shadow: dict[str, np.ndarray] | None = None


def _batch_indices(rng, n_data: int, batch_size: int) -> np.ndarray:
    return rng.integers(0, n_data, size=min(batch_size, n_data))


def train_stage1(cfg: TrainConfig, data: np.ndarray | None = None,
                 ckpt_path=None, csv_path=None) -> TrainResult:
    if cfg.stage != 1:
        raise ConfigError(f"train_stage1 called with stage={cfg.stage}")
    if data is None:
        data = synthetic_images(cfg.dataset_size, cfg.image_size, cfg.image_channels,
                                cfg.seed + 3)
    tok = Tokenizer(cfg, dtype=np.float32)
    params = tok.params()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2)
    shadow = {k: p.data.copy() for k, p in params.items()} if cfg.ema else None
    order = np.random.default_rng(cfg.seed + 4)
    reports: list[LossReport] = []
    for step in range(cfg.steps):
        batch = data[_batch_indices(order, len(data), cfg.batch_size)].astype(np.float32)
        try:
            losses = stage1_losses(tok, batch, cfg)
            opt.zero_grad()
            losses.total.backward()
        except ad.NonFiniteValue as e:
            raise TrainingDiverged(step) from e
        if not math.isfinite(losses.total.item()):
            raise TrainingDiverged(step)
        opt.step()
        if shadow is not None:
            ema_update(shadow, params, cfg.ema_decay)
        usage = codebook_usage(losses.tokens, tok.quant)
        reports.append(LossReport(
            step=step, recon=losses.recon.item(), token_h=losses.token_h.item(),
            codebook_h=losses.codebook_h.item(), gan_g=0.0, gan_d=0.0,
            commitment=losses.commitment.item() if losses.commitment else 0.0,
            total=losses.total.item(), usage=tuple(usage)))
    result = TrainResult(tok.state_dict(), reports, cfg, shadow)
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, result.state)
    if csv_path is not None:
        write_report_csv(csv_path, reports)
    return result


def train_stage2(cfg: TrainConfig, stage1_state: dict[str, np.ndarray],
                 data: np.ndarray | None = None,
                 ckpt_path=None, csv_path=None) -> TrainResult:
    if cfg.stage != 2:
        raise ConfigError(f"train_stage2 called with stage={cfg.stage}")
    if int(stage1_state.get("meta.generative", np.zeros(1))[0]):
        raise ConfigError("stage-2 training expects a stage-1 (non-generative) checkpoint")
    # geometry comes from the checkpoint; training knobs from cfg
    scfg = dataclasses.replace(config_from_state(stage1_state, cfg), stage=2,
                               n_z=cfg.n_z, seed=cfg.seed)
    if data is None:
        data = synthetic_images(scfg.dataset_size, scfg.image_size, scfg.image_channels,
                                scfg.seed + 3)
    tok = Tokenizer(scfg, dtype=np.float32)
    tok.encoder.load_state({k[4:]: v for k, v in stage1_state.items() if k.startswith("enc.")})
    tok.decoder.load_state({k[4:]: v for k, v in stage1_state.items() if k.startswith("dec.")})
    tok.decoder = expand_input_zero_init(tok.decoder, scfg.noise_channels)
    disc = Discriminator(DiscriminatorSpec(in_channels=scfg.image_channels,
                                           base_channels=scfg.base_channels),
                         seed=scfg.seed + 2, dtype=np.float32)
    prior = NoisePrior(scfg.noise_channels, scfg.image_size // scfg.f,
                       scfg.image_size // scfg.f, seed=scfg.seed + 5)
    g_params = tok.params()
    g_opt = Adam(g_params, cfg.lr, cfg.beta1, cfg.beta2)
    d_opt = Adam(disc.params, cfg.lr, cfg.beta1, cfg.beta2)
    shadow = {k: p.data.copy() for k, p in g_params.items()} if cfg.ema else None
    order = np.random.default_rng(cfg.seed + 4)
    reports: list[LossReport] = []
    for step in range(cfg.steps):
        batch = data[_batch_indices(order, len(data), cfg.batch_size)].astype(np.float32)
        z = prior.sample(batch=len(batch), dtype=np.float32)
        try:
            # generator phase
            uq, grouped, tokens = tok.quantize(batch)
            fake = tok.decoder.decode(uq, z=z)
            recon = _mse(fake, batch)
            dist = ent.soft_assignment(grouped, cfg.tau, tok.quant)
            eloss = ent.entropy_loss(dist, cfg.zeta)
            gan_g = generator_gan_term(disc, fake, cfg.non_saturating)
            total = ad.add(ad.add(recon, ad.scale(eloss.combined, cfg.entropy_weight)),
                           ad.scale(gan_g, cfg.gan_weight))
            commitment = None
            if cfg.commitment_weight > 0:
                commitment = _mse(grouped, uq.data.reshape(grouped.shape))
                total = ad.add(total, ad.scale(commitment, cfg.commitment_weight))
            g_opt.zero_grad()
            for p in disc.params.values():
                p.grad = None
            total.backward()
            g_opt.step()
            # discriminator phase (fake detached)
            d_loss = discriminator_loss(disc, batch, fake.data)
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()
        except ad.NonFiniteValue as e:
            raise TrainingDiverged(step) from e
        if not (math.isfinite(total.item()) and math.isfinite(d_loss.item())):
            raise TrainingDiverged(step)
        if shadow is not None:
            ema_update(shadow, g_params, cfg.ema_decay)
        usage = codebook_usage(tokens, tok.quant)
        reports.append(LossReport(
            step=step, recon=recon.item(), token_h=eloss.token_entropy.item(),
            codebook_h=eloss.codebook_entropy.item(), gan_g=gan_g.item(),
            gan_d=d_loss.item(),
            commitment=commitment.item() if commitment else 0.0,
            total=total.item(), usage=tuple(usage)))
    state = tok.state_dict()
    state.update({f"disc.{k}": v for k, v in disc.state_dict().items()})
    result = TrainResult(state, reports, cfg, shadow)
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, result.state)
    if csv_path is not None:
        write_report_csv(csv_path, reports)
    return result
