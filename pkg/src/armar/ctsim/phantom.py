"""Ellipse phantoms: body anatomy plus stylized metal implant geometries.

Slices of one phantom share their ellipse set but drift smoothly with slice
index, so adjacent slices carry redundant, non-identical anatomy.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

MATERIALS = ("air", "soft_tissue", "bone", "metal")
AIR, SOFT_TISSUE, BONE, METAL = range(4)


class ImplantTag(enum.Enum):
    NONE = "none"
    HIP_PROSTHESIS = "hip_prosthesis"
    FRACTURE_FIXATION = "fracture_fixation"
    SPINAL_FIXATION = "spinal_fixation"

    @classmethod
    def from_string(cls, s):
        for tag in cls:
            if tag.value == s:
                return tag
        raise ValueError(f"unknown implant tag {s!r}")


@dataclass(frozen=True)
class Ellipse:
    cx: float        # mm, image center origin, x rightward
    cy: float        # mm, y downward
    a: float         # semi-axis along the (rotated) x direction, mm
    b: float         # semi-axis along the (rotated) y direction, mm
    rot: float       # radians
    material: int    # index into MATERIALS


@dataclass(frozen=True)
class EllipseDrift:
    """Smooth sinusoidal slice-to-slice perturbation of one ellipse."""

    cx_amp: float = 0.0
    cy_amp: float = 0.0
    a_amp: float = 0.0
    b_amp: float = 0.0
    freq: int = 1
    phase: float = 0.0

    def offsets(self, i, n_slices):
        t = math.sin(2.0 * math.pi * self.freq * i / max(n_slices, 1) + self.phase)
        return self.cx_amp * t, self.cy_amp * t, self.a_amp * t, self.b_amp * t


@dataclass
class PhantomSpec:
    ellipses: list = field(default_factory=list)
    drifts: list = field(default_factory=list)   # parallel to ellipses
    n_slices: int = 16
    implant_tag: ImplantTag = ImplantTag.NONE

    def validate(self, fov_mm, min_slices=1):
        if len(self.drifts) != len(self.ellipses):
            raise ValueError("one drift entry per ellipse required")
        if self.n_slices < min_slices:
            raise ValueError(f"slice count {self.n_slices} < required {min_slices}")
        half = fov_mm / 2.0
        for e in self.ellipses:
            reach = max(e.a, e.b)
            if abs(e.cx) + reach > half or abs(e.cy) + reach > half:
                raise ValueError(f"ellipse at ({e.cx:.1f},{e.cy:.1f}) extends outside the field of view")
        has_metal = any(e.material == METAL for e in self.ellipses)
        if has_metal and self.implant_tag is ImplantTag.NONE:
            raise ValueError("metal present but implant tag is none")
        if not has_metal and self.implant_tag is not ImplantTag.NONE:
            raise ValueError(f"implant tag {self.implant_tag.value} without metal")
        return self

    def ellipses_at(self, i):
        out = []
        for e, d in zip(self.ellipses, self.drifts):
            dcx, dcy, da, db = d.offsets(i, self.n_slices)
            out.append(Ellipse(e.cx + dcx, e.cy + dcy, max(e.a + da, 0.5),
                               max(e.b + db, 0.5), e.rot, e.material))
        return out

    def without_metal(self):
        """Metal-free twin: same anatomy minus the implant."""
        keep = [(e, d) for e, d in zip(self.ellipses, self.drifts) if e.material != METAL]
        return PhantomSpec(
            ellipses=[e for e, _ in keep],
            drifts=[d for _, d in keep],
            n_slices=self.n_slices,
            implant_tag=ImplantTag.NONE,
        )


def rasterize(spec, slice_index, size, pixel_spacing):
    """Paint ellipses in order (later ones overwrite) onto an all-air canvas.

    Returns the material-label image and one indicator image per material.
    """
    if size <= 0:
        raise ValueError("rasterize: size must be positive")
    coords = (np.arange(size) - (size - 1) / 2.0) * pixel_spacing
    xs = coords[None, :]
    ys = coords[:, None]
    labels = np.full((size, size), AIR, dtype=np.uint8)
    for e in spec.ellipses_at(slice_index):
        dx = xs - e.cx
        dy = ys - e.cy
        if e.rot:
            c, s = math.cos(e.rot), math.sin(e.rot)
            u = dx * c + dy * s
            v = -dx * s + dy * c
        else:
            u, v = dx, dy
        inside = (u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0
        labels[inside] = e.material
    indicators = {m: (labels == i).astype(np.float32) for i, m in enumerate(MATERIALS)}
    return labels, indicators


def _uniform(rng, lo, hi):
    return float(rng.uniform(lo, hi))


def random_phantom(rng, tag, n_slices, fov_mm):
    """Synthetic patient anatomy: soft-tissue body, bony landmarks, optional
    air pockets, and the implant geometry matching ``tag``."""
    ellipses = []
    drifts = []

    def put(e, drift_scale=1.0, freq=None):
        ellipses.append(e)
        drifts.append(EllipseDrift(
            cx_amp=_uniform(rng, 0.5, 2.5) * drift_scale,
            cy_amp=_uniform(rng, 0.5, 2.5) * drift_scale,
            a_amp=_uniform(rng, 0.3, 1.5) * drift_scale,
            b_amp=_uniform(rng, 0.3, 1.5) * drift_scale,
            freq=int(freq if freq is not None else rng.integers(1, 3)),
            phase=_uniform(rng, 0.0, 2.0 * math.pi),
        ))

    cx0 = _uniform(rng, -5.0, 5.0)
    cy0 = _uniform(rng, -5.0, 5.0)
    body_a = _uniform(rng, 48.0, 58.0)
    body_b = _uniform(rng, 38.0, 47.0)
    put(Ellipse(cx0, cy0, body_a, body_b, _uniform(rng, -0.15, 0.15), SOFT_TISSUE))

    # spine
    put(Ellipse(cx0 + _uniform(rng, -3, 3), cy0 + _uniform(rng, 16, 24),
                _uniform(rng, 7, 9.5), _uniform(rng, 7, 9.5), 0.0, BONE), drift_scale=0.5)
    # femoral heads
    side_y = cy0 + _uniform(rng, 6, 14)
    for sx in (-1.0, 1.0):
        put(Ellipse(cx0 + sx * _uniform(rng, 26, 32), side_y + _uniform(rng, -3, 3),
                    _uniform(rng, 8, 11), _uniform(rng, 8, 11), 0.0, BONE), drift_scale=0.5)
    # anterior rib-like ovals
    for _ in range(int(rng.integers(1, 3))):
        put(Ellipse(cx0 + _uniform(rng, -25, 25), cy0 - _uniform(rng, 20, 32),
                    _uniform(rng, 6, 12), _uniform(rng, 2.5, 4.5),
                    _uniform(rng, -0.8, 0.8), BONE))
    # bowel gas pockets
    for _ in range(int(rng.integers(0, 3))):
        put(Ellipse(cx0 + _uniform(rng, -18, 18), cy0 - _uniform(rng, 2, 18),
                    _uniform(rng, 4, 8), _uniform(rng, 3, 6),
                    _uniform(rng, -1.0, 1.0), AIR))

    if tag is ImplantTag.HIP_PROSTHESIS:
        stem_y = side_y + _uniform(rng, -2, 2)
        r = _uniform(rng, 15.5, 18.5)
        for sx in (-1.0, 1.0):
            put(Ellipse(cx0 + sx * _uniform(rng, 27, 31), stem_y, r, r * _uniform(rng, 0.85, 1.0),
                        0.0, METAL), drift_scale=0.25, freq=1)
    elif tag is ImplantTag.FRACTURE_FIXATION:
        sx = 1.0 if rng.random() < 0.5 else -1.0
        px_ = cx0 + sx * _uniform(rng, 16, 24)
        py_ = cy0 + _uniform(rng, -6, 8)
        put(Ellipse(px_, py_, _uniform(rng, 23, 28), _uniform(rng, 11.5, 13.5),
                    _uniform(rng, -0.6, 0.6), METAL), drift_scale=0.25, freq=1)
        for dy in (-1.0, 1.0):
            r = _uniform(rng, 11, 13)
            put(Ellipse(px_ - sx * _uniform(rng, 14, 18), py_ + dy * _uniform(rng, 8, 14),
                        r, r, 0.0, METAL), drift_scale=0.25, freq=1)
    elif tag is ImplantTag.SPINAL_FIXATION:
        screw_y = cy0 + _uniform(rng, 16, 22)
        r = _uniform(rng, 14.5, 17.0)
        for sx in (-1.0, 1.0):
            put(Ellipse(cx0 + sx * _uniform(rng, 12, 15), screw_y + _uniform(rng, -2, 2),
                        r, r * _uniform(rng, 0.85, 1.0), 0.0, METAL), drift_scale=0.25, freq=1)

    spec = PhantomSpec(ellipses=ellipses, drifts=drifts, n_slices=n_slices, implant_tag=tag)
    return spec.validate(fov_mm, min_slices=1)
