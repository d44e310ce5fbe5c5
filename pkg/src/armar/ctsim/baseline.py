"""Classical sinogram-inpainting baseline: per-angle linear interpolation
across the metal trace."""
from __future__ import annotations

import warnings

import numpy as np

from . import physics


def metal_trace(mask, geometry, min_chord_mm=0.5):
    """Forward-project a metal mask; bins crossing any metal are flagged."""
    t = physics.radon(mask.astype(np.float32), geometry.n_angles, geometry.n_bins,
                      geometry.det_spacing_mm, geometry.pixel_spacing_mm)
    return t > min_chord_mm


def li_correct(sino, trace):
    """Replace trace bins with 1-D linear interpolation along each angle row.

    Untouched bins pass through unchanged; gaps at the row edges extend the
    nearest valid value. A fully masked row is filled from the nearest row
    that still has valid bins (with a warning).
    """
    sino = np.asarray(sino)
    trace = np.asarray(trace, dtype=bool)
    if trace.shape != sino.shape:
        raise ValueError(f"trace shape {trace.shape} != sinogram shape {sino.shape}")
    out = sino.copy()
    n_angles, n_bins = sino.shape
    cols = np.arange(n_bins)
    full_rows = []
    for a in range(n_angles):
        bad = trace[a]
        if not bad.any():
            continue
        good = ~bad
        if not good.any():
            full_rows.append(a)
            continue
        out[a, bad] = np.interp(cols[bad], cols[good], sino[a, good])
    if full_rows:
        warnings.warn(f"{len(full_rows)} fully masked angle rows filled from neighbours")
        valid_rows = [a for a in range(n_angles) if a not in set(full_rows)]
        if not valid_rows:
            raise ValueError("every angle row is fully masked")
        valid_rows = np.asarray(valid_rows)
        for a in full_rows:
            nearest = valid_rows[np.abs(valid_rows - a).argmin()]
            out[a] = out[nearest]
    return out


def li_reconstruct(sino, mask, geometry, mu_water):
    """LI-corrected reconstruction in HU for one slice."""
    corrected = li_correct(sino, metal_trace(mask, geometry))
    img = physics.fbp(corrected, geometry.det_spacing_mm, geometry.image_size,
                      geometry.pixel_spacing_mm)
    return physics.to_hu(img, mu_water)
