"""Sequence calibration and network input preparation.

Covers slice matching between the two sequences of one patient, similarity
registration, HU threshold masks, window normalization, volume assembly, and
the center-slice degradation used during encoder training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ctsim.phantom import ImplantTag  # re-exported: tags ride with prepared data
from .errors import DataError

__all__ = [
    "AugmentPolicy",
    "AugmentedVolume",
    "CtSequence",
    "ImplantTag",
    "RegistrationResult",
    "affine_register",
    "augment_center",
    "denormalize_hu",
    "gaussian_blur",
    "make_volume",
    "match_slices",
    "metal_mask",
    "normalize_hu",
    "normalized_cross_correlation",
]

MATCH_SCORE_FLOOR = 0.2


@dataclass
class CtSequence:
    data: np.ndarray              # (n, H, W) float32 HU
    modality: str                 # ordinary | gsi_surrogate | clean
    patient_id: str = ""
    pixel_spacing_mm: float = 1.0
    registered: bool = False

    def __len__(self):
        return self.data.shape[0]


@dataclass
class RegistrationResult:
    correspondence: list          # i -> j, monotone non-decreasing
    scores: list                  # chosen-pair NCC per slice
    transforms: list = field(default_factory=list)   # (scale, dx, dy) per slice
    unmatched: list = field(default_factory=list)    # slice indices below the score floor

    def to_dict(self):
        return {
            "correspondence": [int(j) for j in self.correspondence],
            "scores": [float(s) for s in self.scores],
            "transforms": [[float(v) for v in t] for t in self.transforms],
            "unmatched": [int(i) for i in self.unmatched],
        }


def normalized_cross_correlation(a, b):
    """NCC in [-1, 1]; zero-variance inputs score 0 (degenerate)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    az = a - a.mean()
    bz = b - b.mean()
    denom = np.sqrt((az * az).sum() * (bz * bz).sum())
    if denom < 1e-12:
        return 0.0
    return float(np.dot(az, bz) / denom)


def match_slices(seq_a, seq_b):
    """Best monotone correspondence between two sequences.

    Scores every pair with NCC, then a dynamic-programming pass picks, per
    slice of ``seq_a``, the match that maximizes the total score subject to
    non-decreasing indices. Ties resolve to the smallest index; slices whose
    chosen score falls below the floor are flagged unmatched.
    """
    a, b = seq_a.data, seq_b.data
    if len(a) == 0 or len(b) == 0:
        raise DataError("cannot match empty sequences")
    na, nb = len(a), len(b)
    score = np.empty((na, nb), dtype=np.float64)
    for i in range(na):
        for j in range(nb):
            score[i, j] = normalized_cross_correlation(a[i], b[j])

    best = np.full((na, nb), -np.inf)
    choice = np.zeros((na, nb), dtype=np.int64)
    best[0] = score[0]
    for i in range(1, na):
        run_max, run_arg = -np.inf, 0
        for j in range(nb):
            if best[i - 1, j] > run_max:      # strict: keeps the earliest argmax on ties
                run_max, run_arg = best[i - 1, j], j
            best[i, j] = score[i, j] + run_max
            choice[i, j] = run_arg

    j = int(np.flatnonzero(best[na - 1] == best[na - 1].max())[0])
    corr = [0] * na
    for i in range(na - 1, -1, -1):
        corr[i] = j
        j = int(choice[i, j])
    scores = [float(score[i, corr[i]]) for i in range(na)]
    unmatched = [i for i, s in enumerate(scores) if s < MATCH_SCORE_FLOOR]
    return RegistrationResult(correspondence=corr, scores=scores, unmatched=unmatched)


def _resample_batch(img, scale, dxs, dys):
    """Bilinear resamples of ``img`` under x' = scale*(x-c)+c+shift, one per
    (dx, dy) pair (edge clamp). Returns (len(dxs), H, W)."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dxs = np.atleast_1d(np.asarray(dxs, dtype=np.float64))
    dys = np.atleast_1d(np.asarray(dys, dtype=np.float64))
    rows = scale * (np.arange(h) - cy) + cy
    cols = scale * (np.arange(w) - cx) + cx
    src_r = dys[:, None] + rows[None, :]                     # (K, H)
    src_c = dxs[:, None] + cols[None, :]                     # (K, W)
    r0 = np.clip(np.floor(src_r).astype(np.int64), 0, h - 2)
    c0 = np.clip(np.floor(src_c).astype(np.int64), 0, w - 2)
    fr = np.clip(src_r - r0, 0.0, 1.0).astype(np.float32)[:, :, None]
    fc = np.clip(src_c - c0, 0.0, 1.0).astype(np.float32)[:, None, :]
    flat = (r0[:, :, None] * w + c0[:, None, :]).reshape(len(dxs), -1)
    pix = np.asarray(img, dtype=np.float32).ravel()
    g00 = pix.take(flat).reshape(fr.shape[0], h, w)
    g01 = pix.take(flat + 1).reshape(g00.shape)
    g10 = pix.take(flat + w).reshape(g00.shape)
    g11 = pix.take(flat + w + 1).reshape(g00.shape)
    return (g00 * (1 - fr) * (1 - fc) + g01 * (1 - fr) * fc
            + g10 * fr * (1 - fc) + g11 * fr * fc)


def _resample_similarity(img, scale, dx, dy):
    return _resample_batch(img, scale, [dx], [dy])[0]


def _ncc_batch(stack, fixed):
    """NCC of each stack image against ``fixed`` (zero for degenerate inputs)."""
    k = stack.shape[0]
    a = stack.reshape(k, -1)
    b = np.asarray(fixed, dtype=np.float32).ravel()
    az = a - a.mean(axis=1, keepdims=True)
    bz = b - b.mean()
    denom = np.sqrt((az * az).sum(axis=1, dtype=np.float64) * (bz * bz).sum(dtype=np.float64))
    out = np.zeros(k)
    ok = denom > 1e-12
    out[ok] = (az @ bz).astype(np.float64)[ok] / denom[ok]
    return out


def _quadratic_peak(fm, f0, fp, step):
    denom = fm - 2.0 * f0 + fp
    if abs(denom) < 1e-12:
        return 0.0
    delta = 0.5 * (fm - fp) / denom * step
    return float(np.clip(delta, -step, step))


def affine_register(moving, fixed, scales=None, shifts=None):
    """Similarity-transform registration by exhaustive NCC grid search.

    Scale 0.9..1.1 (step 0.01) and integer shifts -4..4 px, followed by one
    quadratic refinement per axis. Returns ((scale, dx, dy), resampled, score);
    raises when even the best alignment scores below the floor.
    """
    scales = np.round(np.arange(0.90, 1.1001, 0.01), 4) if scales is None else scales
    shifts = np.arange(-4, 5) if shifts is None else shifts
    grid_dx, grid_dy = [g.ravel() for g in np.meshgrid(shifts, shifts)]
    best = (-2.0, 1.0, 0.0, 0.0)
    for s in scales:
        stack = _resample_batch(moving, s, grid_dx, grid_dy)
        scores = _ncc_batch(stack, fixed)
        j = int(scores.argmax())
        if scores[j] > best[0]:
            best = (float(scores[j]), float(s), float(grid_dx[j]), float(grid_dy[j]))
    _, s, dx, dy = best
    if best[0] >= 1.0 - 1e-7:            # exact match: nothing left to refine
        return (s, dx, dy), _resample_similarity(moving, s, dx, dy), best[0]

    def eval_at(sv, dxv, dyv):
        return normalized_cross_correlation(_resample_similarity(moving, sv, dxv, dyv), fixed)

    s += _quadratic_peak(eval_at(s - 0.01, dx, dy), best[0], eval_at(s + 0.01, dx, dy), 0.01)
    dx += _quadratic_peak(eval_at(s, dx - 1, dy), eval_at(s, dx, dy), eval_at(s, dx + 1, dy), 1.0)
    dy += _quadratic_peak(eval_at(s, dx, dy - 1), eval_at(s, dx, dy), eval_at(s, dx, dy + 1), 1.0)
    resampled = _resample_similarity(moving, s, dx, dy)
    score = normalized_cross_correlation(resampled, fixed)
    if score < MATCH_SCORE_FLOOR:
        raise DataError(f"registration rejected: score {score:.3f} below {MATCH_SCORE_FLOOR}")
    return (s, dx, dy), resampled, score


def metal_mask(hu_slice, threshold):
    """Binary mask of pixels strictly above the HU threshold."""
    return (np.asarray(hu_slice) > threshold).astype(np.uint8)


def normalize_hu(hu, level=500.0, width=2000.0):
    """Window normalization to [-1, 1]: clamp((HU - level) / (width/2), -1, 1)."""
    if width <= 0:
        raise ValueError("window width must be positive")
    return np.clip((np.asarray(hu, dtype=np.float32) - level) / (width / 2.0), -1.0, 1.0)


def denormalize_hu(x, level=500.0, width=2000.0):
    return np.asarray(x, dtype=np.float32) * (width / 2.0) + level


def make_volume(seq_data, index, radius):
    """Stack 2*radius+1 neighbours around ``index``; edges replicate."""
    n = seq_data.shape[0]
    if n < 1:
        raise ValueError("empty sequence")
    idx = np.clip(np.arange(index - radius, index + radius + 1), 0, n - 1)
    return seq_data[idx].copy()


def gaussian_blur(img, sigma):
    radius = max(1, int(math.ceil(2.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    padded = np.pad(img, radius, mode="edge").astype(np.float64)
    tmp = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, padded)
    out = np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, tmp)
    return out.astype(np.float32)


@dataclass(frozen=True)
class AugmentPolicy:
    mask_prob: float = 0.3
    blur_prob: float = 0.3
    downup_prob: float = 0.3
    mask_frac: tuple = (0.2, 0.5)
    blur_sigma: tuple = (0.5, 1.5)
    fill_value: float = -1.0

    def validate(self):
        for p in (self.mask_prob, self.blur_prob, self.downup_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("augmentation probabilities must lie in [0, 1]")
        return self


@dataclass
class AugmentedVolume:
    volume: np.ndarray            # degraded copy
    target: np.ndarray            # original, unaltered center slice
    applied: tuple                # names of the degradations that fired


def augment_center(volume, policy, rng):
    """Degrade only the center layer; neighbours stay bit-identical.

    The untouched center is returned separately as the reconstruction target.
    """
    policy.validate()
    volume = np.asarray(volume)
    k = volume.shape[0] // 2
    out = volume.copy()
    target = volume[k].copy()
    center = out[k]
    h, w = center.shape
    applied = []
    if rng.random() < policy.mask_prob:
        fh = int(round(rng.uniform(*policy.mask_frac) * h))
        fw = int(round(rng.uniform(*policy.mask_frac) * w))
        fh, fw = max(fh, 1), max(fw, 1)
        r0 = int(rng.integers(0, h - fh + 1))
        c0 = int(rng.integers(0, w - fw + 1))
        center[r0:r0 + fh, c0:c0 + fw] = policy.fill_value
        applied.append("mask")
    if rng.random() < policy.blur_prob:
        center[:] = gaussian_blur(center, float(rng.uniform(*policy.blur_sigma)))
        applied.append("blur")
    if rng.random() < policy.downup_prob:
        down = 0.25 * (center[0::2, 0::2] + center[1::2, 0::2]
                       + center[0::2, 1::2] + center[1::2, 1::2])
        center[:] = down.repeat(2, axis=0).repeat(2, axis=1)
        applied.append("downup")
    return AugmentedVolume(volume=out, target=target, applied=tuple(applied))
