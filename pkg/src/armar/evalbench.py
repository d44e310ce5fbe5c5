"""Image-quality bench: PSNR, SSIM, streak severity, metal-region IoU, and
tab-separated / JSON reports over slice directories.

Metrics run on display-windowed HU (both sides clamped to the window), with
peak equal to the window width, so saturated metal compares as saturated
metal instead of swamping every score.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

PSNR_CAP_DB = 100.0


@dataclass(frozen=True)
class MetricConfig:
    window_level: float = 500.0
    window_width: float = 2000.0
    iou_threshold_hu: float = 1400.0
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    rescale_512: bool = False

    @property
    def peak(self):
        return self.window_width

    @classmethod
    def from_run_config(cls, cfg):
        return cls(window_level=cfg["prep.window_level"], window_width=cfg["prep.window_width"],
                   iou_threshold_hu=cfg["eval.iou_threshold_hu"], rescale_512=cfg["eval.rescale_512"])


def window_hu(hu, level=500.0, width=2000.0):
    half = width / 2.0
    return np.clip(np.asarray(hu, dtype=np.float64), level - half, level + half)


def psnr(pred, ref, peak):
    """10*log10(peak^2 / MSE), capped at 100 dB for near-exact matches."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"psnr: shape mismatch {pred.shape} vs {ref.shape}")
    if peak <= 0:
        raise ValueError("psnr: peak must be positive")
    mse = float(np.mean((pred - ref) ** 2))
    if mse < peak * peak * 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(sigma, radius):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter2(img, kernel):
    radius = (len(kernel) - 1) // 2
    padded = np.pad(img, radius, mode="reflect")
    tmp = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="valid"), 1, padded)
    return np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="valid"), 0, tmp)


def ssim(pred, ref, dynamic_range, sigma=1.5, k1=0.01, k2=0.03):
    """Mean local SSIM with an 11x11 Gaussian window."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"ssim: shape mismatch {pred.shape} vs {ref.shape}")
    if min(pred.shape) < 11:
        raise ValueError("ssim needs images of at least 11x11")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    kernel = _gaussian_kernel(sigma, 5)
    mu_p = _filter2(pred, kernel)
    mu_r = _filter2(ref, kernel)
    var_p = _filter2(pred * pred, kernel) - mu_p ** 2
    var_r = _filter2(ref * ref, kernel) - mu_r ** 2
    cov = _filter2(pred * ref, kernel) - mu_p * mu_r
    num = (2 * mu_p * mu_r + c1) * (2 * cov + c2)
    den = (mu_p ** 2 + mu_r ** 2 + c1) * (var_p + var_r + c2)
    return float(np.mean(num / den))


def dilate_mask(mask, iterations=3):
    m = np.asarray(mask, dtype=bool)
    for _ in range(iterations):
        m = (m | np.roll(m, 1, 0) | np.roll(m, -1, 0)
             | np.roll(m, 1, 1) | np.roll(m, -1, 1))
    return m


def artifact_index(hu_slice, metal_mask, ref_slice=None, band=(-200.0, 300.0), dilation=3):
    """Streak severity: HU standard deviation over the soft-tissue band.

    Band membership comes from the reference slice when given (else the slice
    itself); a dilated metal neighbourhood is excluded. Returns None when no
    band pixels remain.
    """
    hu_slice = np.asarray(hu_slice, dtype=np.float64)
    basis = hu_slice if ref_slice is None else np.asarray(ref_slice, dtype=np.float64)
    if metal_mask.shape != hu_slice.shape:
        raise ValueError("artifact_index: mask shape mismatch")
    sel = (basis >= band[0]) & (basis <= band[1]) & ~dilate_mask(metal_mask, dilation)
    if not sel.any():
        return None
    return float(np.std(hu_slice[sel]))


def metal_iou(pred_hu, gt_mask, threshold):
    """IoU between the thresholded prediction and the ground-truth metal mask.

    Two empty sets count as a perfect match.
    """
    pred = np.asarray(pred_hu) > threshold
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError("metal_iou: shape mismatch")
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def rescale_bilinear(img, out_size):
    """Plain bilinear resampling used by the optional 512x512 evaluation mode."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    rows = np.linspace(0, h - 1, out_size)
    cols = np.linspace(0, w - 1, out_size)
    r0 = np.clip(np.floor(rows).astype(np.int64), 0, h - 2)
    c0 = np.clip(np.floor(cols).astype(np.int64), 0, w - 2)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    a = img[np.ix_(r0, c0)]
    b = img[np.ix_(r0, c0 + 1)]
    c = img[np.ix_(r0 + 1, c0)]
    d = img[np.ix_(r0 + 1, c0 + 1)]
    return a * (1 - fr) * (1 - fc) + b * (1 - fr) * fc + c * fr * (1 - fc) + d * fr * fc


@dataclass
class SliceMetrics:
    name: str
    psnr: float
    ssim: float
    artifact_index: float | None
    metal_iou: float | None


@dataclass
class MetricReport:
    method: str
    dataset_digest: str
    rows: list = field(default_factory=list)
    missing: list = field(default_factory=list)

    def aggregate(self):
        def mean_of(vals):
            vals = [v for v in vals if v is not None]
            return float(np.mean(vals)) if vals else None

        return {
            "method": self.method,
            "n_slices": len(self.rows),
            "psnr": mean_of([r.psnr for r in self.rows]),
            "ssim": mean_of([r.ssim for r in self.rows]),
            "artifact_index": mean_of([r.artifact_index for r in self.rows]),
            "metal_iou": mean_of([r.metal_iou for r in self.rows]),
            "missing": list(self.missing),
            "dataset_digest": self.dataset_digest,
        }


def _digest_dir(paths):
    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _load_hu(path, shape):
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    n = int(np.prod(shape))
    if data.size != n:
        raise DataError(f"{path}: expected {n} values, found {data.size}")
    return data.reshape(shape)


def evaluate_dirs(pred_dir, ref_dir, config, masks_dir=None, method="pred", size=None):
    """Per-slice metrics of a prediction directory against a reference.

    Both directories hold ``NNN.raw`` float32 HU slices; an optional masks
    directory supplies ground-truth metal (uint8). Slices missing on the
    prediction side are excluded and listed in the report.
    """
    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)
    if not ref_dir.is_dir():
        raise DataError(f"reference directory not found: {ref_dir}")
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory not found: {pred_dir}")
    ref_files = sorted(ref_dir.glob("*.raw"))
    if not ref_files:
        raise DataError(f"no reference slices in {ref_dir}")
    if size is None:
        n = int(np.sqrt(np.frombuffer(ref_files[0].read_bytes(), dtype="<f4").size))
        size = (n, n)
    report = MetricReport(method=method, dataset_digest=_digest_dir(ref_files))
    for rf in ref_files:
        pf = pred_dir / rf.name
        if not pf.exists():
            report.missing.append(rf.name)
            continue
        ref_hu = _load_hu(rf, size)
        pred_hu = _load_hu(pf, size)
        mask = None
        if masks_dir is not None:
            mf = Path(masks_dir) / rf.name
            if mf.exists():
                mask = np.frombuffer(mf.read_bytes(), dtype="u1").reshape(size)
        wp = window_hu(pred_hu, config.window_level, config.window_width)
        wr = window_hu(ref_hu, config.window_level, config.window_width)
        if config.rescale_512:
            wp = rescale_bilinear(wp, 512)
            wr = rescale_bilinear(wr, 512)
        row = SliceMetrics(
            name=rf.name,
            psnr=psnr(wp, wr, config.peak),
            ssim=ssim(wp, wr, config.window_width, config.ssim_sigma,
                      config.ssim_k1, config.ssim_k2),
            artifact_index=(artifact_index(pred_hu, mask, ref_slice=ref_hu)
                            if mask is not None else None),
            metal_iou=(metal_iou(pred_hu, mask, config.iou_threshold_hu)
                       if mask is not None else None),
        )
        report.rows.append(row)
    return report


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_report(report, out_dir, stem="report"):
    """Emit ``stem.tsv`` (per-slice rows) and ``stem.json`` (aggregate)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["slice\tpsnr\tssim\tartifact_index\tmetal_iou"]
    for r in report.rows:
        lines.append(f"{r.name}\t{_fmt(r.psnr)}\t{_fmt(r.ssim)}\t"
                     f"{_fmt(r.artifact_index)}\t{_fmt(r.metal_iou)}")
    (out_dir / f"{stem}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / f"{stem}.json").write_text(
        json.dumps(report.aggregate(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out_dir / f"{stem}.json"


def write_comparison(aggregates, path):
    """One TSV row per method aggregate (the final comparison table)."""
    lines = ["method\tpsnr\tssim\tartifact_index\tmetal_iou\tn_slices"]
    for agg in aggregates:
        lines.append(f"{agg['method']}\t{_fmt(agg['psnr'])}\t{_fmt(agg['ssim'])}\t"
                     f"{_fmt(agg['artifact_index'])}\t{_fmt(agg['metal_iou'])}\t{agg['n_slices']}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_pgm(hu, path, level=500.0, width=2000.0):
    """8-bit grayscale export under the display window."""
    lo = level - width / 2.0
    arr = np.clip((np.asarray(hu, dtype=np.float64) - lo) / width, 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    h, w = u8.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + u8.tobytes())
