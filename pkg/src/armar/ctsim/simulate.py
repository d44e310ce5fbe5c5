"""Paired acquisition simulator: artifact-laden ordinary scans vs clean
monochromatic surrogates of the same phantom geometry."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import physics
from .phantom import METAL, MATERIALS, ImplantTag, rasterize


@dataclass
class SimulatedPatient:
    ordinary: np.ndarray          # (n, H, W) float32 HU
    gsi: np.ndarray               # (n, H, W) float32 HU, noise-free reference energy
    masks: np.ndarray             # (n, H, W) uint8 ground-truth metal
    sinograms: np.ndarray         # (n, n_angles, n_bins) float32, water-corrected log data
    implant_tag: ImplantTag
    seed: int
    starved_bins: list = field(default_factory=list)


def simulate_pair(spec, spectrum, geometry, seed):
    """Simulate both sequences for one phantom.

    The ordinary chain is polychromatic with Poisson noise at the spectrum's
    photon budget, then water-linearized and reconstructed; the surrogate
    chain is noise-free at the reference energy. Both share slice geometry,
    so the pair differs only in artifact content.
    """
    spec.validate(geometry.fov_mm)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    curve = physics.water_equivalent_curve(spectrum)
    attenuating = [m for m in MATERIALS if any(spectrum.mu[m])]
    n = spec.n_slices
    size = geometry.image_size
    ordinary = np.empty((n, size, size), dtype=np.float32)
    gsi = np.empty((n, size, size), dtype=np.float32)
    masks = np.empty((n, size, size), dtype=np.uint8)
    sinos = np.empty((n, geometry.n_angles, geometry.n_bins), dtype=np.float32)
    starved = []
    for i in range(n):
        labels, indicators = rasterize(spec, i, size, geometry.pixel_spacing_mm)
        stack = np.stack([indicators[m] for m in attenuating])
        t_sinos = physics.radon_stack(stack, geometry.n_angles, geometry.n_bins,
                                      geometry.det_spacing_mm, geometry.pixel_spacing_mm)
        thickness = dict(zip(attenuating, t_sinos))

        mono = np.zeros_like(t_sinos[0], dtype=np.float64)
        for m, t in thickness.items():
            mono += spectrum.mu[m][spectrum.reference_bin] * t.astype(np.float64)
        gsi[i] = physics.to_hu(
            physics.fbp(mono, geometry.det_spacing_mm, size, geometry.pixel_spacing_mm),
            spectrum.mu_water)

        intensity = physics.project_poly(thickness, spectrum)
        noisy = physics.add_photon_noise(intensity, rng)
        p, n_starved = physics.log_normalize(noisy, spectrum.i0)
        p_corr = physics.water_linearize(p, spectrum, curve)
        ordinary[i] = physics.to_hu(
            physics.fbp(p_corr, geometry.det_spacing_mm, size, geometry.pixel_spacing_mm),
            spectrum.mu_water)

        masks[i] = (labels == METAL).astype(np.uint8)
        sinos[i] = p_corr
        starved.append(n_starved)

    return SimulatedPatient(ordinary=ordinary, gsi=gsi, masks=masks, sinograms=sinos,
                            implant_tag=spec.implant_tag, seed=seed, starved_bins=starved)
