"""On-disk corpus layout.

One directory per synthetic patient: ``ordinary/NNN.raw`` and ``gsi/NNN.raw``
(32-bit little-endian HU, row-major), ``masks/NNN.raw`` (8-bit, 1 = metal),
``sino/NNN.raw`` (32-bit LE, angles x bins, kept so the LI baseline works on
the measured projections), and ``meta.json``. The corpus root carries
``manifest.json`` with the train/test split.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DataError
from .phantom import ImplantTag
from .simulate import SimulatedPatient


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"missing {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt JSON at {path}: {e}")


def write_raw(path, arr, dtype):
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_raw(path, dtype, shape):
    data = np.frombuffer(Path(path).read_bytes(), dtype=dtype)
    expected = int(np.prod(shape))
    if data.size != expected:
        raise DataError(f"{path}: expected {expected} values, found {data.size}")
    return data.reshape(shape).copy()


def patient_dirname(index):
    return f"patient_{index:03d}"


def slice_filename(index):
    return f"{index:03d}.raw"


def write_patient(root, patient_id, sim: SimulatedPatient, geometry, spectrum,
                  window_level, window_width):
    pdir = Path(root) / patient_id
    n, h, w = sim.ordinary.shape
    for sub in ("ordinary", "gsi", "masks", "sino"):
        (pdir / sub).mkdir(parents=True, exist_ok=True)
    for i in range(n):
        name = slice_filename(i)
        write_raw(pdir / "ordinary" / name, sim.ordinary[i], "<f4")
        write_raw(pdir / "gsi" / name, sim.gsi[i], "<f4")
        write_raw(pdir / "masks" / name, sim.masks[i], "u1")
        write_raw(pdir / "sino" / name, sim.sinograms[i], "<f4")
    meta = {
        "patient_id": patient_id,
        "size": [h, w],
        "pixel_spacing_mm": geometry.pixel_spacing_mm,
        "n_slices": n,
        "n_angles": geometry.n_angles,
        "n_bins": geometry.n_bins,
        "det_spacing_mm": geometry.det_spacing_mm,
        "implant_tag": sim.implant_tag.value,
        "seed": sim.seed,
        "spectrum_digest": spectrum.digest(),
        "mu_water": spectrum.mu_water,
        "window_level": window_level,
        "window_width": window_width,
        "starved_bins": sim.starved_bins,
    }
    _write_json(pdir / "meta.json", meta)
    return pdir


@dataclass
class PatientData:
    patient_id: str
    ordinary: np.ndarray
    gsi: np.ndarray
    masks: np.ndarray
    sinograms: np.ndarray | None
    implant_tag: ImplantTag
    meta: dict


def read_patient(pdir, with_sinograms=False):
    pdir = Path(pdir)
    meta = _read_json(pdir / "meta.json")
    h, w = meta["size"]
    n = meta["n_slices"]

    def stack(sub, dtype, shape):
        out = []
        for i in range(n):
            out.append(read_raw(pdir / sub / slice_filename(i), dtype, shape))
        return np.stack(out)

    sinos = None
    if with_sinograms:
        sinos = stack("sino", "<f4", (meta["n_angles"], meta["n_bins"]))
    return PatientData(
        patient_id=meta["patient_id"],
        ordinary=stack("ordinary", "<f4", (h, w)),
        gsi=stack("gsi", "<f4", (h, w)),
        masks=stack("masks", "u1", (h, w)),
        sinograms=sinos,
        implant_tag=ImplantTag.from_string(meta["implant_tag"]),
        meta=meta,
    )


def write_manifest(root, manifest):
    _write_json(Path(root) / "manifest.json", manifest)


def read_manifest(root):
    return _read_json(Path(root) / "manifest.json")


def load_split(root, split):
    """Load all patients of one manifest split ('train' or 'test')."""
    root = Path(root)
    manifest = read_manifest(root)
    if split not in manifest["split"]:
        raise DataError(f"manifest has no {split!r} split")
    return [read_patient(root / pid) for pid in manifest["split"][split]]
