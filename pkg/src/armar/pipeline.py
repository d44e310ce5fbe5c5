"""End-to-end orchestration: corpus generation, staged training (VAE ->
invariance encoders -> alignment), inference, and the LI baseline.

Stages are strictly ordered with hard prerequisites so the freezing
contracts stay auditable: invariance pretraining needs the VAE checkpoint,
alignment needs both. Every random draw derives from the run seed through
fixed stage keys, which makes identically seeded runs bit-identical.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import align as align_mod
from . import arvae as arvae_mod
from . import checkpoint as ckpt_mod
from . import dataprep
from . import evalbench
from . import invariance as inv_mod
from . import nn
from .ctsim import baseline as li_mod
from .ctsim import dataset as ds
from .ctsim.phantom import ImplantTag, random_phantom
from .ctsim.physics import CtGeometry, default_spectrum
from .ctsim.simulate import simulate_pair
from .errors import DataError

STAGE_GEN, STAGE_VAE, STAGE_INV, STAGE_ALIGN = 1, 2, 3, 4

TAG_INDEX = {t: i for i, t in enumerate(ImplantTag)}


def stage_rng(seed, stage, *extra):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stage), *map(int, extra)]))


def stage_seed_int(seed, stage, *extra):
    return int(np.random.SeedSequence([int(seed), int(stage), *map(int, extra)]).generate_state(1)[0])


def geometry_from_config(cfg):
    return CtGeometry(
        image_size=cfg["data.image_size"],
        pixel_spacing_mm=cfg["data.pixel_spacing_mm"],
        n_angles=cfg["data.n_angles"],
        n_bins=cfg["data.n_bins"],
        det_spacing_mm=cfg["data.det_spacing_mm"],
    )


def cosine_lr(base_lr, step, total_steps, floor_frac=0.05):
    """Half-cosine decay from base_lr to floor_frac * base_lr over the run."""
    if total_steps <= 1:
        return base_lr
    t = min(step, total_steps - 1) / (total_steps - 1)
    floor = floor_frac * base_lr
    return floor + 0.5 * (base_lr - floor) * (1.0 + np.cos(np.pi * t))


class TrainLogger:
    """Appends one TSV row per (epoch x loss name): step, epoch, name, value."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, step, epoch, name, value):
        with self.path.open("a", encoding="utf-8") as f:
            f.write(f"{step}\t{epoch}\t{name}\t{value!r}\n")


# ---------------------------------------------------------------------------
# corpus generation


def _pick_tags(cfg, rng, n):
    """Implant mix: a metal-free fraction, the rest cycling the three types."""
    tags = []
    metal_types = [ImplantTag.HIP_PROSTHESIS, ImplantTag.FRACTURE_FIXATION,
                   ImplantTag.SPINAL_FIXATION]
    for i in range(n):
        if rng.random() < cfg["data.metal_free_fraction"]:
            tags.append(ImplantTag.NONE)
        else:
            tags.append(metal_types[int(rng.integers(0, 3))])
    return tags


def _register_pair(sim):
    """Calibrate the ordinary sequence against the surrogate one.

    The full match + grid-search runs per slice; transforms within half a
    pixel of the identity are snapped to it so already-registered raw slices
    are stored without a pointless resample.
    """
    seq_n = dataprep.CtSequence(sim.ordinary, "ordinary")
    seq_g = dataprep.CtSequence(sim.gsi, "gsi_surrogate")
    match = dataprep.match_slices(seq_n, seq_g)
    transforms = []
    for i, j in enumerate(match.correspondence):
        tf, resampled, _ = dataprep.affine_register(sim.ordinary[i], sim.gsi[j])
        s, dx, dy = tf
        if abs(s - 1.0) <= 0.005 and abs(dx) <= 0.5 and abs(dy) <= 0.5:
            # sub-half-pixel jitter around the identity: keep the raw slice
            transforms.append((1.0, 0.0, 0.0))
        else:
            sim.ordinary[i] = resampled
            transforms.append(tf)
    match.transforms = transforms
    return match


def generate_corpus(cfg, out_dir, force=False):
    """Emit the synthetic patient corpus plus manifest.

    The recorded split keeps every implant-free patient on the training side
    (they exist to feed the clean-decoder mix) and divides implant patients
    80/20 per implant type, so each type appears in the held-out benchmark.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise DataError(f"output directory {out_dir} is not empty (use --force)")
    out_dir.mkdir(parents=True, exist_ok=True)
    geometry = geometry_from_config(cfg)
    spectrum = default_spectrum(i0=cfg["data.i0"])
    n = cfg["data.n_patients"]
    seed = cfg.seed
    tag_rng = stage_rng(seed, STAGE_GEN, 0)
    tags = _pick_tags(cfg, tag_rng, n)
    patient_ids = []
    min_slices = 2 * cfg["prep.volume_radius"] + 1
    for i in range(n):
        rng = stage_rng(seed, STAGE_GEN, i + 1)
        spec = random_phantom(rng, tags[i], cfg["data.slices_per_patient"], geometry.fov_mm)
        spec.validate(geometry.fov_mm, min_slices=min_slices)
        sim = simulate_pair(spec, spectrum, geometry, seed=stage_seed_int(seed, STAGE_GEN, i + 1, 7))
        registration = _register_pair(sim)
        pid = ds.patient_dirname(i)
        pdir = ds.write_patient(out_dir, pid, sim, geometry, spectrum,
                                cfg["prep.window_level"], cfg["prep.window_width"])
        (pdir / "registration.json").write_text(
            json.dumps(registration.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        patient_ids.append(pid)

    # Implant-free patients exist to train the clean decoder and always land
    # in the training split; the held-out benchmark split draws from implant
    # patients, stratified per implant type so every type is tested.
    split_rng = stage_rng(seed, STAGE_GEN, 999)
    by_tag = {}
    for pid, tag in zip(patient_ids, tags):
        by_tag.setdefault(tag.value, []).append(pid)
    train, test = list(by_tag.pop(ImplantTag.NONE.value, [])), []
    for tag_value in sorted(by_tag):
        ids = by_tag[tag_value]
        perm = [ids[k] for k in split_rng.permutation(len(ids))]
        n_train = int(round(cfg["data.train_fraction"] * len(ids)))
        if len(ids) > 1:
            n_train = min(max(n_train, 1), len(ids) - 1)
        train += perm[:n_train]
        test += perm[n_train:]
    manifest = {
        "seed": seed,
        "n_patients": n,
        "tags": {pid: t.value for pid, t in zip(patient_ids, tags)},
        "split": {"train": sorted(train), "test": sorted(test)},
        "spectrum_digest": spectrum.digest(),
        "geometry": {
            "image_size": geometry.image_size,
            "pixel_spacing_mm": geometry.pixel_spacing_mm,
            "n_angles": geometry.n_angles,
            "n_bins": geometry.n_bins,
            "det_spacing_mm": geometry.det_spacing_mm,
        },
        "window": [cfg["prep.window_level"], cfg["prep.window_width"]],
        "train_fraction": cfg["data.train_fraction"],
    }
    ds.write_manifest(out_dir, manifest)
    return manifest


# ---------------------------------------------------------------------------
# in-memory training views


@dataclass
class PreparedPatient:
    patient_id: str
    tag: ImplantTag
    ordinary_hu: np.ndarray
    gsi_hu: np.ndarray
    masks: np.ndarray
    norm_ordinary: np.ndarray
    norm_gsi: np.ndarray
    meta: dict


def prepare_patients(corpus_dir, split, cfg):
    out = []
    for p in ds.load_split(corpus_dir, split):
        level, width = cfg["prep.window_level"], cfg["prep.window_width"]
        out.append(PreparedPatient(
            patient_id=p.patient_id,
            tag=p.implant_tag,
            ordinary_hu=p.ordinary,
            gsi_hu=p.gsi,
            masks=p.masks,
            norm_ordinary=dataprep.normalize_hu(p.ordinary, level, width),
            norm_gsi=dataprep.normalize_hu(p.gsi, level, width),
            meta=p.meta,
        ))
    if not out:
        raise DataError(f"empty {split!r} split in {corpus_dir}")
    return out


def _augment_policy(cfg):
    return dataprep.AugmentPolicy(
        mask_prob=cfg["prep.aug_mask_prob"],
        blur_prob=cfg["prep.aug_blur_prob"],
        downup_prob=cfg["prep.aug_downup_prob"],
    )


def _volume_batch(patients, items, which, k, policy, rng):
    vols, tgts = [], []
    for pi, si in items:
        seq = patients[pi].norm_ordinary if which == "ordinary" else patients[pi].norm_gsi
        aug = dataprep.augment_center(dataprep.make_volume(seq, si, k), policy, rng)
        vols.append(aug.volume)
        tgts.append(aug.target[None])
    return np.stack(vols), np.stack(tgts)


# ---------------------------------------------------------------------------
# stage 1: artifact-reducing VAE


def train_vae(patients, cfg, ckpt_path, resume=False):
    seed = cfg.seed
    vcfg = arvae_mod.ArVaeConfig.from_run_config(cfg)
    model = arvae_mod.ArVae(vcfg, seed=stage_seed_int(seed, STAGE_VAE, 0))
    start_epoch = 0
    if resume:
        state = ckpt_mod.load(ckpt_path)
        model.load_state_dict(state)
        meta = ckpt_mod.read_meta(state)
        start_epoch = int(meta.get("epochs_done", 0))
    optimizer = nn.AdamW(list(model.parameters()), lr=cfg["vae.lr"])
    logger = TrainLogger(Path(ckpt_path).with_suffix(".losses.tsv"))
    policy = _augment_policy(cfg)
    k = vcfg.volume_radius
    batch = cfg["vae.batch_size"]

    ordinary_items = [(pi, si) for pi, p in enumerate(patients)
                      for si in range(p.norm_ordinary.shape[0])]
    gsi_pool = [(pi, si) for pi, p in enumerate(patients) if p.tag is not ImplantTag.NONE
                for si in range(p.norm_gsi.shape[0])]
    clean_pool = [(pi, si) for pi, p in enumerate(patients) if p.tag is ImplantTag.NONE
                  for si in range(p.norm_gsi.shape[0])]
    ratio = vcfg.mix_ratio if gsi_pool and clean_pool else (1.0 if gsi_pool else 0.0)
    mix = arvae_mod.decoder_mix_sampler(gsi_pool, clean_pool, ratio,
                                        stage_rng(seed, STAGE_VAE, 1))
    shuffle_rng = stage_rng(seed, STAGE_VAE, 2)
    aug_rng = stage_rng(seed, STAGE_VAE, 3)
    sample_rng = stage_rng(seed, STAGE_VAE, 4)

    def save_vae(epochs_done):
        meta = dict(model.meta())
        meta["epochs_done"] = epochs_done
        ckpt_mod.save(ckpt_path, {**model.state_dict(),
                                  **{f"meta.{mk}": np.asarray(mv, np.float32).reshape(-1)
                                     for mk, mv in meta.items()}})

    save_vae(start_epoch)
    steps_per_epoch = (len(ordinary_items) + batch - 1) // batch
    total_steps = cfg["vae.epochs"] * steps_per_epoch
    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, cfg["vae.epochs"]):
        perm = shuffle_rng.permutation(len(ordinary_items))
        sums, count = {}, 0
        for lo in range(0, len(perm), batch):
            optimizer.lr = cosine_lr(cfg["vae.lr"], step, total_steps)
            items_n = [ordinary_items[j] for j in perm[lo:lo + batch]]
            items_g = [next(mix) for _ in items_n]
            vol_n, tgt_n = _volume_batch(patients, items_n, "ordinary", k, policy, aug_rng)
            vol_g, tgt_g = _volume_batch(patients, items_g, "gsi", k, policy, aug_rng)
            losses = arvae_mod.vae_train_step(
                model, optimizer, (vol_n, tgt_n, vol_g, tgt_g, sample_rng),
                batch_id=f"{epoch}:{lo // batch}")
            step += 1
            count += 1
            for name, v in losses.items():
                sums[name] = sums.get(name, 0.0) + v
        for name in sorted(sums):
            logger.log(step, epoch, name, sums[name] / max(count, 1))
        save_vae(epoch + 1)
    return model


def load_vae(ckpt_path, trainable=False):
    state = ckpt_mod.load(ckpt_path)
    meta = ckpt_mod.read_meta(state)
    vcfg = arvae_mod.ArVae.config_from_meta(meta)
    model = arvae_mod.ArVae(vcfg, seed=0)
    model.load_state_dict(state)
    model.set_trainable(trainable)
    return model, meta


def encode_sequences(model, patients, k, batch=16):
    """Deterministic (mean) latent codes for every slice of every patient.

    Returns two lists indexed like ``patients``: latents of the ordinary and
    surrogate sequences, each (n_slices, Cz, h, w).
    """
    lat_n, lat_g = [], []
    for p in patients:
        outs = []
        for seq in (p.norm_ordinary, p.norm_gsi):
            n = seq.shape[0]
            vols = np.stack([dataprep.make_volume(seq, i, k) for i in range(n)])
            zs = []
            for lo in range(0, n, batch):
                dist = model.encode(nn.Tensor(vols[lo:lo + batch]))
                zs.append(dist.mean.data.copy())
            outs.append(np.concatenate(zs, axis=0))
        lat_n.append(outs[0])
        lat_g.append(outs[1])
    return lat_n, lat_g


# ---------------------------------------------------------------------------
# stage 2: invariance encoders


def pretrain_invariance(patients, cfg, vae_ckpt, ckpt_path):
    seed = cfg.seed
    vae, _ = load_vae(vae_ckpt)
    icfg = inv_mod.ContrastiveConfig.from_run_config(cfg)
    enc_n, enc_g = inv_mod.build_encoders(icfg, stage_seed_int(seed, STAGE_INV, 0))
    optimizer = nn.AdamW(list(enc_n.parameters()) + list(enc_g.parameters()), lr=cfg["inv.lr"])
    logger = TrainLogger(Path(ckpt_path).with_suffix(".losses.tsv"))
    lat_n, lat_g = encode_sequences(vae, patients, cfg["prep.volume_radius"])

    rng = stage_rng(seed, STAGE_INV, 1)
    n_pat = len(patients)
    bp = min(cfg["inv.batch_patients"], n_pat)
    sp = cfg["inv.slices_per_patient"]
    sums, count = {}, 0
    for step in range(1, cfg["inv.steps"] + 1):
        pick_p = rng.choice(n_pat, size=bp, replace=n_pat < bp * 2)
        zs_n, zs_g = [], []
        for pi in pick_p:
            n_slices = lat_n[pi].shape[0]
            pick_s = rng.choice(n_slices, size=min(sp, n_slices), replace=False)
            zs_n.append(lat_n[pi][pick_s])
            zs_g.append(lat_g[pi][pick_s])
        loss, d_min, d_max = inv_mod.contrastive_step(
            enc_n, enc_g, optimizer, np.concatenate(zs_n), np.concatenate(zs_g),
            icfg.gamma, icfg.margin)
        for name, v in (("loss", loss), ("attract", d_min), ("repel", d_max)):
            sums[name] = sums.get(name, 0.0) + v
        count += 1
        if step % 100 == 0 or step == cfg["inv.steps"]:
            for name in sorted(sums):
                logger.log(step, 0, name, sums[name] / count)
            sums, count = {}, 0
    meta = {"feature_channels": icfg.feature_channels, "latent_channels": icfg.latent_channels,
            "gamma": icfg.gamma, "margin": icfg.margin}
    entries = {**enc_n.state_dict("inv.ec_n"), **enc_g.state_dict("inv.ec_g"),
               **{f"meta.{mk}": np.asarray(mv, np.float32).reshape(-1) for mk, mv in meta.items()}}
    ckpt_mod.save(ckpt_path, entries)
    return enc_n, enc_g


def load_invariance(ckpt_path, trainable=False):
    state = ckpt_mod.load(ckpt_path)
    meta = ckpt_mod.read_meta(state)
    icfg = inv_mod.ContrastiveConfig(
        gamma=float(meta["gamma"]), margin=float(meta["margin"]),
        feature_channels=int(meta["feature_channels"]),
        latent_channels=int(meta["latent_channels"]))
    enc_n, enc_g = inv_mod.build_encoders(icfg, seed=0)
    enc_n.load_state_dict(state, "inv.ec_n")
    enc_g.load_state_dict(state, "inv.ec_g")
    enc_n.set_trainable(trainable)
    enc_g.set_trainable(trainable)
    return enc_n, enc_g, icfg


# ---------------------------------------------------------------------------
# stage 3: alignment network


def _prior_masks(patients, cfg):
    thr = cfg["prep.metal_threshold_hu"]
    return [np.stack([dataprep.metal_mask(s, thr) for s in p.ordinary_hu])
            for p in patients]


def train_align(patients, cfg, vae_ckpt, inv_ckpt, ckpt_path, resume=False):
    seed = cfg.seed
    vae, vae_meta = load_vae(vae_ckpt)
    beta = cfg["align.beta"]
    encoders = None
    if beta != 0.0:
        if inv_ckpt is None:
            raise DataError("alignment with beta != 0 requires the invariance checkpoint")
        enc_n, enc_g, _ = load_invariance(inv_ckpt)
        encoders = (enc_n, enc_g)
    k = int(vae_meta["k"])
    acfg = align_mod.AlignConfig.from_run_config(cfg, latent_size=vae.config.latent_size)
    net = align_mod.AlignNet(acfg, seed=stage_seed_int(seed, STAGE_ALIGN, 0))
    start_epoch = 0
    if resume:
        state = ckpt_mod.load(ckpt_path)
        net.load_state_dict(state, "align")
        start_epoch = int(ckpt_mod.read_meta(state).get("epochs_done", 0))
    optimizer = nn.AdamW(list(net.parameters()), lr=cfg["align.lr"])
    logger = TrainLogger(Path(ckpt_path).with_suffix(".losses.tsv"))

    lat_n, lat_g = encode_sequences(vae, patients, k)
    masks = _prior_masks(patients, cfg)
    items = [(pi, si) for pi, p in enumerate(patients)
             for si in range(p.norm_gsi.shape[0])]
    batch = cfg["align.batch_size"]
    alpha = cfg["align.alpha"]
    shuffle_rng = stage_rng(seed, STAGE_ALIGN, 1)

    def save_align(epochs_done):
        meta = dict(net.meta())
        meta.update({"alpha": alpha, "beta": beta, "epochs_done": epochs_done})
        ckpt_mod.save(ckpt_path, {**net.state_dict("align"),
                                  **{f"meta.{mk}": np.asarray(mv, np.float32).reshape(-1)
                                     for mk, mv in meta.items()}})

    save_align(start_epoch)
    steps_per_epoch = (len(items) + batch - 1) // batch
    total_steps = cfg["align.epochs"] * steps_per_epoch
    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, cfg["align.epochs"]):
        perm = shuffle_rng.permutation(len(items))
        sums, count = {}, 0
        for lo in range(0, len(perm), batch):
            optimizer.lr = cosine_lr(cfg["align.lr"], step, total_steps)
            chunk = [items[j] for j in perm[lo:lo + batch]]
            z_in = np.stack([lat_n[pi][si] for pi, si in chunk])
            z_ref = np.stack([lat_g[pi][si] for pi, si in chunk])
            target = np.stack([patients[pi].norm_gsi[si][None] for pi, si in chunk])
            mask_imgs = np.stack([masks[pi][si] for pi, si in chunk])
            tags = [TAG_INDEX[patients[pi].tag] for pi, si in chunk]
            priors = align_mod.build_priors(mask_imgs, tags, acfg)
            losses = align_mod.align_train_step(
                net, optimizer, vae, encoders, (z_in, z_ref, target, priors), alpha, beta)
            step += 1
            count += 1
            for name, v in losses.items():
                sums[name] = sums.get(name, 0.0) + v
        for name in sorted(sums):
            logger.log(step, epoch, name, sums[name] / max(count, 1))
        save_align(epoch + 1)
    return net


def load_align(ckpt_path, trainable=False):
    state = ckpt_mod.load(ckpt_path)
    meta = ckpt_mod.read_meta(state)
    acfg = align_mod.AlignNet.config_from_meta(meta)
    net = align_mod.AlignNet(acfg, seed=0)
    net.load_state_dict(state, "align")
    net.set_trainable(trainable)
    return net, meta


# ---------------------------------------------------------------------------
# inference and baselines


def _read_slice(path, shape):
    try:
        data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    except ValueError as e:
        raise DataError(f"{path}: {e}")
    if data.size != int(np.prod(shape)):
        raise DataError(f"{path}: wrong size")
    return data.reshape(shape)


def infer_sequence(patient_dir, ckpt_dir, out_dir, metal_threshold=2500.0, batch=16):
    """Run the full pipeline over one patient directory.

    The prior mask is thresholded from each input slice; the implant tag comes
    from meta.json (missing tag means none). Corrupt slices are skipped and
    listed in the returned summary.
    """
    patient_dir, ckpt_dir, out_dir = Path(patient_dir), Path(ckpt_dir), Path(out_dir)
    for stage, fname in (("train-vae", "arvae.ckpt"), ("train-align", "align.ckpt")):
        if not (ckpt_dir / fname).exists():
            raise DataError(f"missing checkpoint {fname}; run {stage} first")
    vae, vae_meta = load_vae(ckpt_dir / "arvae.ckpt")
    net, align_meta = load_align(ckpt_dir / "align.ckpt")
    if align_meta.get("beta", 0.0) != 0.0 and not (ckpt_dir / "inv.ckpt").exists():
        # the invariance encoders never run at inference, but a pipeline
        # trained with L_inv is incomplete without its third checkpoint
        raise DataError("missing checkpoint inv.ckpt; run pretrain-inv first")
    meta = ds._read_json(patient_dir / "meta.json")
    level, width = meta["window_level"], meta["window_width"]
    h, w = meta["size"]
    tag = ImplantTag.from_string(meta.get("implant_tag", "none"))
    k = int(vae_meta["k"])

    slices = []
    skipped = []
    names = sorted(p.name for p in (patient_dir / "ordinary").glob("*.raw"))
    for name in names:
        try:
            slices.append((name, _read_slice(patient_dir / "ordinary" / name, (h, w))))
        except DataError:
            skipped.append(name)
    if not slices:
        raise DataError(f"no readable slices in {patient_dir}")

    hu_stack = np.stack([s for _, s in slices])
    norm = dataprep.normalize_hu(hu_stack, level, width)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = hu_stack.shape[0]
    outputs = []
    for lo in range(0, n, batch):
        idx = range(lo, min(lo + batch, n))
        vols = np.stack([dataprep.make_volume(norm, i, k) for i in idx])
        z = vae.encode(nn.Tensor(vols)).mean
        mask_imgs = np.stack([dataprep.metal_mask(hu_stack[i], metal_threshold) for i in idx])
        priors = align_mod.build_priors(mask_imgs, [TAG_INDEX[tag]] * len(mask_imgs), net.config)
        aligned = align_mod.align_forward(net, nn.Tensor(z.data), priors)
        recon = vae.decode_clean(aligned).data[:, 0]
        outputs.append(dataprep.denormalize_hu(recon, level, width))
    out_hu = np.concatenate(outputs, axis=0)
    for (name, _), img in zip(slices, out_hu):
        ds.write_raw(out_dir / name, img, "<f4")
        evalbench.write_pgm(img, out_dir / (Path(name).stem + ".pgm"), level, width)
    summary = {"n_outputs": int(out_hu.shape[0]), "skipped": skipped}
    (out_dir / "infer.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return summary


def li_sequence(patient_dir, out_dir):
    """LI-corrected reconstructions for one patient (trace from the stored
    ground-truth masks, projections from the stored measured sinograms)."""
    patient_dir, out_dir = Path(patient_dir), Path(out_dir)
    p = ds.read_patient(patient_dir, with_sinograms=True)
    geo = CtGeometry(image_size=p.meta["size"][0], pixel_spacing_mm=p.meta["pixel_spacing_mm"],
                     n_angles=p.meta["n_angles"], n_bins=p.meta["n_bins"],
                     det_spacing_mm=p.meta["det_spacing_mm"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(p.ordinary.shape[0]):
        hu = li_mod.li_reconstruct(p.sinograms[i], p.masks[i], geo, p.meta["mu_water"])
        name = ds.slice_filename(i)
        ds.write_raw(out_dir / name, hu, "<f4")
        evalbench.write_pgm(hu, out_dir / f"{i:03d}.pgm",
                            p.meta["window_level"], p.meta["window_width"])
    return p.ordinary.shape[0]


def corpus_patients(corpus_dir, split):
    manifest = ds.read_manifest(corpus_dir)
    if split not in manifest["split"]:
        raise DataError(f"manifest has no split {split!r}")
    return manifest["split"][split]


def infer_corpus(corpus_dir, ckpt_dir, out_root, split="test", metal_threshold=2500.0):
    corpus_dir, out_root = Path(corpus_dir), Path(out_root)
    for pid in corpus_patients(corpus_dir, split):
        infer_sequence(corpus_dir / pid, ckpt_dir, out_root / pid, metal_threshold)
    return out_root


def li_corpus(corpus_dir, out_root, split="test"):
    corpus_dir, out_root = Path(corpus_dir), Path(out_root)
    for pid in corpus_patients(corpus_dir, split):
        li_sequence(corpus_dir / pid, out_root / pid)
    return out_root


def evaluate_corpus(corpus_dir, metric_cfg, split="test", pred_root=None,
                    pred_sub=None, method="pred"):
    """Merge per-patient slice metrics against each patient's surrogate
    reference. Predictions come from ``pred_root/<pid>`` or, for built-in
    baselines like the uncorrected input, from ``corpus/<pid>/<pred_sub>``."""
    corpus_dir = Path(corpus_dir)
    merged = None
    for pid in corpus_patients(corpus_dir, split):
        pdir = (Path(pred_root) / pid) if pred_root is not None else corpus_dir / pid / pred_sub
        rep = evalbench.evaluate_dirs(pdir, corpus_dir / pid / "gsi", metric_cfg,
                                      masks_dir=corpus_dir / pid / "masks", method=method)
        for row in rep.rows:
            row.name = f"{pid}/{row.name}"
        if merged is None:
            merged = rep
        else:
            merged.rows.extend(rep.rows)
            merged.missing.extend(f"{pid}/{m}" for m in rep.missing)
            merged.dataset_digest = hashlib.sha256(
                (merged.dataset_digest + rep.dataset_digest).encode()).hexdigest()[:16]
    return merged
