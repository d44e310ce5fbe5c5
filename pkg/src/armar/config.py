"""Run configuration: a flat UTF-8 ``key = value`` file with ``#`` comments.

Every key is declared here with its type and desk-scale default; unknown keys
are rejected at load. ``ARMAR_SEED`` in the environment overrides ``seed``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s):
    return tuple(int(p) for p in s.replace(",", " ").split())


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 1234),

    # corpus generation
    "data.n_patients": (int, 40),
    "data.slices_per_patient": (int, 16),
    "data.image_size": (int, 64),
    "data.pixel_spacing_mm": (float, 3.0),
    "data.n_angles": (int, 90),
    "data.n_bins": (int, 96),
    "data.det_spacing_mm": (float, 3.0),
    "data.i0": (float, 1.0e4),
    "data.metal_free_fraction": (float, 0.3),
    "data.train_fraction": (float, 0.8),

    # preparation
    "prep.metal_threshold_hu": (float, 2500.0),
    "prep.window_level": (float, 500.0),
    "prep.window_width": (float, 2000.0),
    "prep.volume_radius": (int, 2),
    "prep.aug_mask_prob": (float, 0.3),
    "prep.aug_blur_prob": (float, 0.3),
    "prep.aug_downup_prob": (float, 0.3),

    # artifact-reducing VAE
    "vae.latent_channels": (int, 8),
    "vae.widths": (_int_list, (8, 16, 32)),
    "vae.kl_weight": (float, 1.0e-6),
    "vae.mix_ratio": (float, 0.25),
    "vae.dual_decoder": (_bool, True),
    "vae.epochs": (int, 40),
    "vae.batch_size": (int, 8),
    "vae.lr": (float, 3.0e-3),

    # invariance encoders
    "inv.gamma": (float, 0.1),
    "inv.margin": (float, 10.0),
    "inv.feature_channels": (int, 64),
    "inv.batch_patients": (int, 4),
    "inv.slices_per_patient": (int, 4),
    "inv.steps": (int, 400),
    "inv.lr": (float, 1.0e-3),

    # alignment network
    "align.depth": (int, 2),
    "align.widths": (_int_list, (64, 128)),
    "align.use_priors": (_bool, True),
    "align.use_transformer": (_bool, True),
    "align.alpha": (float, 1.0),
    "align.beta": (float, 0.001),
    "align.epochs": (int, 30),
    "align.batch_size": (int, 8),
    "align.lr": (float, 2.0e-3),

    # evaluation
    "eval.iou_threshold_hu": (float, 1400.0),
    "eval.rescale_512": (_bool, False),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        if key not in SCHEMA:
            raise KeyError(f"unknown config key {key!r}")
        return self.values.get(key, SCHEMA[key][1])

    def override(self, key, value):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value
        return self

    @property
    def seed(self):
        return self["seed"]


def defaults():
    return RunConfig()


def load(path=None, env=None):
    """Parse a config file (or pure defaults when ``path`` is None)."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            parser = SCHEMA[key][0]
            try:
                cfg.values[key] = parser(value)
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}")
    env = os.environ if env is None else env
    if "ARMAR_SEED" in env:
        try:
            cfg.values["seed"] = int(env["ARMAR_SEED"])
        except ValueError:
            raise ConfigError(f"ARMAR_SEED must be an integer, got {env['ARMAR_SEED']!r}")
    return cfg


def dump_defaults():
    """Render the full default config as file text (handy for --help docs)."""
    lines = ["# armar run configuration (defaults)"]
    for key, (_, default) in SCHEMA.items():
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        lines.append(f"{key} = {default}")
    return "\n".join(lines) + "\n"
