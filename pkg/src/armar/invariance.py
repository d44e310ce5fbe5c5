"""Information-invariance machinery: twin feature encoders over latent codes,
contrastive pretraining, and the frozen-encoder feature distance that keeps
alignment from inventing content."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn


@dataclass(frozen=True)
class ContrastiveConfig:
    gamma: float = 0.1            # repulsion weight
    margin: float = 10.0          # per-pair clamp on the repulsion term
    feature_channels: int = 64
    latent_channels: int = 4

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    @classmethod
    def from_run_config(cls, cfg):
        return cls(gamma=cfg["inv.gamma"], margin=cfg["inv.margin"],
                   feature_channels=cfg["inv.feature_channels"],
                   latent_channels=cfg["vae.latent_channels"])


class FeatureEncoder(nn.Module):
    """Latent code -> feature map: entry conv plus three residual blocks,
    no spatial downsampling."""

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        cf = config.feature_channels
        self.conv_in = nn.Conv2d(config.latent_channels, cf, 3, rng)
        self.blocks = nn.ModuleList([nn.ResidualBlock(cf, rng) for _ in range(3)])

    def forward(self, z):
        cz = self.config.latent_channels
        if z.ndim != 4 or z.shape[1] != cz:
            raise ValueError(f"{self.where()}: expected (N,{cz},h,w) latent, got {z.shape}")
        h = self.conv_in(z)
        for b in self.blocks:
            h = b(h)
        return h


def build_encoders(config, seed):
    """Two independent parameter sets with identical architecture; checkpoint
    prefixes ``inv.ec_n`` / ``inv.ec_g``."""
    ss = np.random.SeedSequence([int(seed), 23])
    r_n, r_g = [np.random.default_rng(c) for c in ss.spawn(2)]
    enc_n = FeatureEncoder(config, r_n).assign_names("ec_n")
    enc_g = FeatureEncoder(config, r_g).assign_names("ec_g")
    return enc_n, enc_g


def pool_embedding(feature_map):
    """Global average pool to a one-dimensional embedding per sample."""
    return feature_map.mean(axis=(2, 3))


def contrastive_loss(emb_n, emb_g, gamma, margin=None):
    """Attraction minus weighted repulsion over matched embedding batches.

    Attraction sums squared distances of matched pairs; repulsion sums every
    ordered cross pairing (i, j != i), each clamped at ``margin`` so it cannot
    diverge. Returns (loss, attraction, repulsion) as graph tensors.
    """
    n = emb_n.shape[0]
    if n < 2:
        raise ValueError("contrastive batch needs at least two matched pairs")
    diff = emb_n - emb_g
    d_min = nn.sum_(nn.square(diff))

    cf = emb_n.shape[1]
    an = emb_n.reshape(n, 1, cf)
    ag = emb_g.reshape(1, n, cf)
    sq = nn.sum_(nn.square(an - ag), axis=2)          # (n, n) ordered distances
    if margin is not None:
        sq = nn.clip(sq, 0.0, margin)
    off_diag = nn.Tensor(1.0 - np.eye(n, dtype=np.float32))
    d_max = nn.sum_(sq * off_diag)

    return d_min - gamma * d_max, d_min, d_max


def contrastive_step(enc_n, enc_g, optimizer, latents_n, latents_g, gamma, margin):
    """One pretraining step over matched latent pairs; both encoders update."""
    optimizer.zero_grad()
    emb_n = pool_embedding(enc_n(nn.Tensor(latents_n)))
    emb_g = pool_embedding(enc_g(nn.Tensor(latents_g)))
    loss, d_min, d_max = contrastive_loss(emb_n, emb_g, gamma, margin)
    loss.backward()
    optimizer.step()
    return float(loss.data), float(d_min.data), float(d_max.data)


def _assert_frozen(module, label):
    if any(p.requires_grad for p in module.parameters()):
        raise AssertionError(f"{label} must be frozen for invariance evaluation")


def feature_distance(enc_n, enc_g, z_input, z_aligned):
    """Pixel-wise feature penalty under frozen encoders (mean over elements).

    The input latent goes through the ordinary-domain encoder and the aligned
    latent through the clean-domain encoder; gradients flow to the latents,
    never to the encoders.
    """
    _assert_frozen(enc_n, "ordinary feature encoder")
    _assert_frozen(enc_g, "clean feature encoder")
    f_in = enc_n(z_input if isinstance(z_input, nn.Tensor) else nn.Tensor(z_input))
    f_al = enc_g(z_aligned if isinstance(z_aligned, nn.Tensor) else nn.Tensor(z_aligned))
    return nn.mse(f_in, f_al)
