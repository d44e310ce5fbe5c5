"""Latent alignment network: a U-shaped residual/transformer stack that
nudges ordinary-domain latent codes toward their clean-domain counterparts,
conditioned on the metal mask and the implant type.

The final projection starts at zero behind a global residual connection, so
an untrained network is exactly the identity: alignment begins from
"change nothing" and learns to adjust representation, not regenerate content.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import NumericError
from .invariance import feature_distance

IMPLANT_CATEGORIES = 4            # none, hip, fracture, spinal


@dataclass(frozen=True)
class AlignConfig:
    latent_channels: int = 4
    latent_size: int = 8
    depth: int = 2
    widths: tuple = (64, 128)
    use_priors: bool = True
    use_transformer: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.widths) != self.depth:
            raise ValueError("one width per stage required")
        if self.latent_size % (2 ** self.depth) != 0:
            raise ValueError("latent size must be divisible by 2^depth")

    @classmethod
    def from_run_config(cls, cfg, latent_size):
        return cls(
            latent_channels=cfg["vae.latent_channels"],
            latent_size=latent_size,
            depth=cfg["align.depth"],
            widths=tuple(cfg["align.widths"]),
            use_priors=cfg["align.use_priors"],
            use_transformer=cfg["align.use_transformer"],
        )


@dataclass
class PriorBundle:
    one_hot: np.ndarray           # (B, 4)
    masks: list                   # per level: (B, 1, r, r) binary float32

    def validate(self):
        if not np.allclose(self.one_hot.sum(axis=1), 1.0):
            raise ValueError("implant one-hot rows must sum to 1")
        for m in self.masks:
            vals = np.unique(m)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise ValueError("downsampled masks must stay binary")
        return self


def downsample_mask(mask, out_size):
    """Area-average a binary mask to ``out_size`` and re-binarize at 0.5."""
    b, h, w = mask.shape
    f = h // out_size
    if f * out_size != h:
        raise ValueError(f"mask size {h} not divisible by target {out_size}")
    avg = mask.reshape(b, out_size, f, out_size, f).mean(axis=(2, 4))
    return (avg >= 0.5).astype(np.float32)


def build_priors(mask_images, tags, config):
    """Assemble the two conditioning signals at every stage resolution.

    ``mask_images``: (B, H, W) binary metal masks at image resolution.
    ``tags``: integer implant categories (0 = none; the none row of the
    embedding is used, never a zero vector).
    """
    tags = np.asarray(tags, dtype=np.int64)
    one_hot = np.eye(IMPLANT_CATEGORIES, dtype=np.float32)[tags]
    mask_images = np.asarray(mask_images, dtype=np.float32)
    masks = []
    for level in range(config.depth + 1):
        res = config.latent_size // (2 ** level)
        masks.append(downsample_mask(mask_images, res)[:, None, :, :])
    return PriorBundle(one_hot=one_hot, masks=masks).validate()


class _Stage(nn.Module):
    """One resolution level: mask-fused residual block, then an optional
    implant-conditioned transformer block."""

    def __init__(self, channels, config, rng):
        super().__init__()
        self.use_priors = config.use_priors
        self.res = nn.ResidualBlock(channels, rng, extra_ch=1 if config.use_priors else 0)
        self.transformer = None
        self.embed = None
        if config.use_transformer:
            self.transformer = nn.TransformerBlock(channels, rng)
            if config.use_priors:
                self.embed = nn.Linear(IMPLANT_CATEGORIES, channels, rng, bias=False)

    def forward(self, h, mask, one_hot):
        h = self.res(h, mask if self.use_priors else None)
        if self.transformer is not None:
            bias = self.embed(one_hot) if self.embed is not None else None
            h = self.transformer(h, token_bias=bias)
        return h


class AlignNet(nn.Module):
    def __init__(self, config, seed):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 37]))
        w = config.widths
        cz = config.latent_channels
        self.conv_in = nn.Conv2d(cz, w[0], 3, rng)
        self.enc_stages = nn.ModuleList([_Stage(w[i], config, rng) for i in range(config.depth)])
        self.downs = nn.ModuleList([
            nn.Downsample(w[i], w[min(i + 1, config.depth - 1)], rng)
            for i in range(config.depth)
        ])
        self.bottleneck = _Stage(w[-1], config, rng)
        self.ups = nn.ModuleList([
            nn.Upsample(w[min(i + 1, config.depth - 1)], w[i], rng)
            for i in reversed(range(config.depth))
        ])
        self.merges = nn.ModuleList([
            nn.Conv2d(2 * w[i], w[i], 1, rng, padding=0) for i in reversed(range(config.depth))
        ])
        self.dec_stages = nn.ModuleList([_Stage(w[i], config, rng) for i in reversed(range(config.depth))])
        self.out_norm = nn.GroupNorm(w[0])
        self.out_conv = nn.Conv2d(w[0], cz, 3, rng, zero_init=True)
        self.assign_names("align")

    def forward(self, z, priors):
        cfg = self.config
        if z.ndim != 4 or z.shape[1] != cfg.latent_channels or z.shape[2] != cfg.latent_size:
            raise ValueError(f"{self.where()}: expected (N,{cfg.latent_channels},"
                             f"{cfg.latent_size},{cfg.latent_size}) latent, got {z.shape}")
        masks = [nn.Tensor(m) for m in priors.masks]
        if any(m.shape[0] != z.shape[0] for m in masks) or priors.one_hot.shape[0] != z.shape[0]:
            raise ValueError(f"{self.where()}: prior batch does not match latent batch")
        one_hot = nn.Tensor(priors.one_hot)

        h = self.conv_in(z)
        skips = []
        for level, stage in enumerate(self.enc_stages):
            h = stage(h, masks[level], one_hot)
            skips.append(h)
            h = self.downs[level](h)
        h = self.bottleneck(h, masks[cfg.depth], one_hot)
        for i, (up, merge, stage) in enumerate(zip(self.ups, self.merges, self.dec_stages)):
            level = cfg.depth - 1 - i
            h = up(h)
            h = merge(nn.concat([h, skips[level]], axis=1))
            h = stage(h, masks[level], one_hot)
        return z + self.out_conv(nn.silu(self.out_norm(h)))

    def meta(self):
        c = self.config
        return {
            "latent_channels": c.latent_channels,
            "latent_size": c.latent_size,
            "depth": c.depth,
            "widths": list(c.widths),
            "use_priors": int(c.use_priors),
            "use_transformer": int(c.use_transformer),
        }

    @classmethod
    def config_from_meta(cls, meta):
        return AlignConfig(
            latent_channels=int(meta["latent_channels"]),
            latent_size=int(meta["latent_size"]),
            depth=int(meta["depth"]),
            widths=tuple(int(v) for v in np.atleast_1d(meta["widths"])),
            use_priors=bool(int(meta["use_priors"])),
            use_transformer=bool(int(meta["use_transformer"])),
        )


def align_forward(net, latent, priors):
    """Adjusted latent with shape equal to the input latent."""
    z = latent if isinstance(latent, nn.Tensor) else nn.Tensor(latent)
    return net(z, priors)


def compose_loss(image_loss, latent_loss, invariance_loss, alpha, beta):
    """Total alignment objective: image + alpha * latent + beta * invariance."""
    return image_loss + alpha * latent_loss + beta * invariance_loss


def _assert_frozen(params_iter, label):
    if any(p.requires_grad for p in params_iter):
        raise AssertionError(f"{label} must be frozen during alignment training")


def align_train_step(net, optimizer, vae, encoders, batch, alpha, beta):
    """One alignment step; gradients reach only the alignment network.

    ``encoders`` is the frozen (ordinary, clean) feature-encoder pair, or
    None when beta is 0. The image loss backpropagates through the frozen
    clean decoder to the aligned latent.
    """
    _assert_frozen(vae.parameters(), "artifact-reducing VAE")
    z_in, z_ref, target_img, priors = batch
    optimizer.zero_grad()
    z_t = nn.Tensor(z_in)
    aligned = net(z_t, priors)
    latent_loss = nn.mse(aligned, nn.Tensor(z_ref))
    image = vae.decode_clean(aligned)
    image_loss = nn.mse(image, nn.Tensor(target_img))
    if beta != 0.0 and encoders is not None:
        enc_n, enc_g = encoders
        inv_loss = feature_distance(enc_n, enc_g, z_t, aligned)
    else:
        inv_loss = nn.Tensor(0.0)
    total = compose_loss(image_loss, latent_loss, inv_loss, alpha, beta)
    if not np.isfinite(total.data):
        raise NumericError("non-finite alignment loss")
    total.backward()
    optimizer.step()
    return {
        "image": float(image_loss.data),
        "latent": float(latent_loss.data),
        "invariance": float(inv_loss.data),
        "total": float(total.data),
    }
