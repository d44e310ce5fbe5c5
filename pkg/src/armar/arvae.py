"""Artifact-reducing VAE: volumetric encoder over adjacent slices, separate
decoders for the artifact-laden and clean image domains.

The encoder sees a (2k+1)-slice volume and emits a latent distribution for
the center slice only; training degrades the center while the loss targets
the unaltered original, which forces the encoder to pull structure from the
neighbours. Only the clean-domain decoder participates in inference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import NumericError

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


@dataclass(frozen=True)
class ArVaeConfig:
    volume_radius: int = 2
    latent_channels: int = 4
    widths: tuple = (8, 16, 32)
    image_size: int = 64
    kl_weight: float = 1.0e-6
    mix_ratio: float = 0.25
    dual_decoder: bool = True

    def __post_init__(self):
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if self.image_size % (2 ** len(self.widths)) != 0:
            raise ValueError("image_size must be divisible by the downsampling factor")

    @property
    def latent_size(self):
        return self.image_size // (2 ** len(self.widths))

    @classmethod
    def from_run_config(cls, cfg):
        return cls(
            volume_radius=cfg["prep.volume_radius"],
            latent_channels=cfg["vae.latent_channels"],
            widths=tuple(cfg["vae.widths"]),
            image_size=cfg["data.image_size"],
            kl_weight=cfg["vae.kl_weight"],
            mix_ratio=cfg["vae.mix_ratio"],
            dual_decoder=cfg["vae.dual_decoder"],
        )


@dataclass
class LatentDistribution:
    mean: nn.Tensor
    logvar: nn.Tensor


class VolumeEncoder(nn.Module):
    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        in_ch = 2 * config.volume_radius + 1
        w = config.widths
        self.conv_in = nn.Conv2d(in_ch, w[0], 3, rng)
        stages = []
        for i, width in enumerate(w):
            nxt = w[min(i + 1, len(w) - 1)]
            block = nn.Module()
            block.res = nn.ResidualBlock(width, rng)
            block.down = nn.Downsample(width, nxt, rng)
            stages.append(block)
        self.stages = nn.ModuleList(stages)
        self.mid = nn.ResidualBlock(w[-1], rng)
        self.out_norm = nn.GroupNorm(w[-1])
        self.out_conv = nn.Conv2d(w[-1], 2 * config.latent_channels, 3, rng)

    def forward(self, x):
        expect = 2 * self.config.volume_radius + 1
        if x.ndim != 4 or x.shape[1] != expect:
            raise ValueError(f"{self.where()}: expected (N,{expect},H,W) volume, got {x.shape}")
        h = self.conv_in(x)
        for st in self.stages:
            h = st.down(st.res(h))
        h = self.out_conv(nn.silu(self.out_norm(self.mid(h))))
        cz = self.config.latent_channels
        mean = nn.narrow(h, 1, 0, cz)
        logvar = nn.clip(nn.narrow(h, 1, cz, cz), LOGVAR_MIN, LOGVAR_MAX)
        return LatentDistribution(mean=mean, logvar=logvar)


class SliceDecoder(nn.Module):
    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        w = config.widths
        self.conv_in = nn.Conv2d(config.latent_channels, w[-1], 3, rng)
        self.mid = nn.ResidualBlock(w[-1], rng)
        stages = []
        ws = list(w[::-1])                       # e.g. (32, 16, 8)
        for i, width in enumerate(ws):
            nxt = ws[min(i + 1, len(ws) - 1)]
            block = nn.Module()
            block.up = nn.Upsample(width, nxt, rng)
            # synthesis needs more depth than analysis: two blocks per level
            block.res1 = nn.ResidualBlock(nxt, rng)
            block.res2 = nn.ResidualBlock(nxt, rng)
            stages.append(block)
        self.stages = nn.ModuleList(stages)
        self.out_norm = nn.GroupNorm(w[0])
        self.out_conv = nn.Conv2d(w[0], 1, 3, rng)

    def forward(self, z):
        cz = self.config.latent_channels
        if z.ndim != 4 or z.shape[1] != cz:
            raise ValueError(f"{self.where()}: expected (N,{cz},h,w) latent, got {z.shape}")
        h = self.mid(self.conv_in(z))
        for st in self.stages:
            h = st.res2(st.res1(st.up(h)))
        return nn.tanh(self.out_conv(nn.silu(self.out_norm(h))))


class ArVae:
    """Encoder plus one or two decoders, with stable checkpoint prefixes."""

    def __init__(self, config, seed):
        self.config = config
        ss = np.random.SeedSequence([int(seed), 11])
        r_enc, r_dn, r_dg = [np.random.default_rng(c) for c in ss.spawn(3)]
        self.encoder = VolumeEncoder(config, r_enc).assign_names("encoder")
        self.decoder_clean = SliceDecoder(config, r_dg).assign_names("dec_g")
        if config.dual_decoder:
            self.decoder_ordinary = SliceDecoder(config, r_dn).assign_names("dec_n")
        else:
            self.decoder_ordinary = self.decoder_clean

    def encode(self, volume):
        return self.encoder(volume)

    def decode_clean(self, z):
        return self.decoder_clean(z)

    def decode_ordinary(self, z):
        return self.decoder_ordinary(z)

    def modules(self):
        out = {"arvae.encoder": self.encoder, "arvae.dec_g": self.decoder_clean}
        if self.config.dual_decoder:
            out["arvae.dec_n"] = self.decoder_ordinary
        return out

    def parameters(self):
        for m in self.modules().values():
            yield from m.parameters()

    def set_trainable(self, flag):
        for m in self.modules().values():
            m.set_trainable(flag)
        return self

    def state_dict(self):
        out = {}
        for prefix, m in self.modules().items():
            out.update(m.state_dict(prefix))
        return out

    def load_state_dict(self, state):
        for prefix, m in self.modules().items():
            m.load_state_dict(state, prefix)

    def param_checksum(self):
        return float(sum(m.param_checksum() for m in self.modules().values()))

    def meta(self):
        return {
            "k": self.config.volume_radius,
            "latent_channels": self.config.latent_channels,
            "widths": list(self.config.widths),
            "image_size": self.config.image_size,
            "dual_decoder": int(self.config.dual_decoder),
        }

    @classmethod
    def config_from_meta(cls, meta, **overrides):
        kw = dict(
            volume_radius=int(meta["k"]),
            latent_channels=int(meta["latent_channels"]),
            widths=tuple(int(v) for v in np.atleast_1d(meta["widths"])),
            image_size=int(meta["image_size"]),
            dual_decoder=bool(int(meta["dual_decoder"])),
        )
        kw.update(overrides)
        return ArVaeConfig(**kw)


def sample_latent(dist, rng=None):
    """Reparameterized draw; deterministic mode returns the mean."""
    if rng is None:
        return dist.mean
    eps = rng.standard_normal(dist.mean.shape).astype(dist.mean.data.dtype)
    return dist.mean + nn.exp(dist.logvar * 0.5) * nn.Tensor(eps)


def kl_divergence(dist):
    """KL(dist || N(0, I)) as a mean over elements."""
    return nn.mean_(0.5 * (nn.square(dist.mean) + nn.exp(dist.logvar) - 1.0 - dist.logvar))


def decoder_mix_sampler(gsi_pool, clean_pool, ratio, rng):
    """Infinite stream for clean-decoder training: draws land in the GSI pool
    with probability ``ratio``, otherwise in the fully clean pool."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    if ratio > 0.0 and len(gsi_pool) == 0:
        raise ValueError("empty GSI pool")
    if ratio < 1.0 and len(clean_pool) == 0:
        raise ValueError("empty clean pool")
    while True:
        if rng.random() < ratio:
            yield gsi_pool[int(rng.integers(0, len(gsi_pool)))]
        else:
            yield clean_pool[int(rng.integers(0, len(clean_pool)))]


def vae_train_step(model, optimizer, batch, batch_id="?"):
    """One optimization step over an (ordinary, clean-mix) batch pair.

    Ordinary samples update the encoder and the ordinary decoder; clean-mix
    samples update the encoder and the clean decoder. Reconstruction targets
    are the unaltered center slices.
    """
    vol_n, tgt_n, vol_g, tgt_g, rng = batch
    cfg = model.config
    optimizer.zero_grad()

    dist_n = model.encode(nn.Tensor(vol_n))
    z_n = sample_latent(dist_n, rng)
    rec_n = model.decode_ordinary(z_n)
    loss_rec_n = nn.mse(rec_n, nn.Tensor(tgt_n))

    dist_g = model.encode(nn.Tensor(vol_g))
    z_g = sample_latent(dist_g, rng)
    rec_g = model.decode_clean(z_g)
    loss_rec_g = nn.mse(rec_g, nn.Tensor(tgt_g))

    loss_kl = kl_divergence(dist_n) + kl_divergence(dist_g)
    total = loss_rec_n + loss_rec_g + cfg.kl_weight * loss_kl
    if not np.isfinite(total.data):
        raise NumericError(f"non-finite VAE loss at batch {batch_id}")
    total.backward()
    optimizer.step()
    return {
        "recon_n": float(loss_rec_n.data),
        "recon_g": float(loss_rec_g.data),
        "kl": float(loss_kl.data),
        "total": float(total.data),
    }
