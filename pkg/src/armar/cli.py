"""Command-line front end.

Verbs: ``gen``, ``train-vae``, ``pretrain-inv``, ``train-align``, ``infer``,
``eval``, ``baseline-li``. Exit codes: 0 success, 1 usage, 2 data error,
3 numeric failure. ``ARMAR_SEED`` overrides the configured seed.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as config_mod
from . import evalbench
from . import pipeline
from .errors import ConfigError, DataError, NumericError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _build_parser():
    p = _Parser(prog="armar", description="CT metal artifact reduction at desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="emit the synthetic patient corpus")
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")

    for name, extra in (("train-vae", ()), ("pretrain-inv", ("arvae",)),
                        ("train-align", ("arvae", "inv"))):
        t = sub.add_parser(name, help=f"{name} stage")
        t.add_argument("--config", default=None)
        t.add_argument("--data", required=True)
        t.add_argument("--ckpt", required=True)
        if name != "pretrain-inv":
            t.add_argument("--resume", action="store_true")
        for prereq in extra:
            t.add_argument(f"--{prereq}", default=None,
                           help=f"{prereq} checkpoint (default: sibling {prereq}.ckpt)")

    i = sub.add_parser("infer", help="run the trained pipeline over a sequence")
    i.add_argument("--ckpt", required=True, help="directory holding arvae.ckpt and align.ckpt")
    i.add_argument("--in", dest="input", required=True, help="patient directory")
    i.add_argument("--out", required=True)
    i.add_argument("--config", default=None)

    e = sub.add_parser("eval", help="score prediction directories against a reference")
    e.add_argument("--pred", action="append", required=True,
                   help="prediction dir, optionally label=dir (repeatable)")
    e.add_argument("--ref", required=True)
    e.add_argument("--masks", default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--config", default=None)

    b = sub.add_parser("baseline-li", help="classical LI reconstruction")
    b.add_argument("--data", required=True, help="patient directory or corpus root")
    b.add_argument("--out", required=True)
    return p


def _sibling(ckpt, explicit, name):
    if explicit is not None:
        return Path(explicit)
    return Path(ckpt).parent / f"{name}.ckpt"


def _require(path, stage):
    if not Path(path).exists():
        raise DataError(f"missing prerequisite checkpoint {path}; run {stage} first")
    return path


def _cmd_gen(args, cfg):
    manifest = pipeline.generate_corpus(cfg, args.out, force=args.force)
    print(f"generated {manifest['n_patients']} patients -> {args.out}")
    print(f"split: {len(manifest['split']['train'])} train / {len(manifest['split']['test'])} test")


def _cmd_train_vae(args, cfg):
    patients = pipeline.prepare_patients(args.data, "train", cfg)
    if Path(args.ckpt).exists() and not args.resume:
        raise DataError(f"checkpoint {args.ckpt} exists (pass --resume to continue)")
    pipeline.train_vae(patients, cfg, args.ckpt, resume=args.resume)
    print(f"wrote {args.ckpt}")


def _cmd_pretrain_inv(args, cfg):
    patients = pipeline.prepare_patients(args.data, "train", cfg)
    vae_ckpt = _require(_sibling(args.ckpt, args.arvae, "arvae"), "train-vae")
    pipeline.pretrain_invariance(patients, cfg, vae_ckpt, args.ckpt)
    print(f"wrote {args.ckpt}")


def _cmd_train_align(args, cfg):
    patients = pipeline.prepare_patients(args.data, "train", cfg)
    vae_ckpt = _require(_sibling(args.ckpt, args.arvae, "arvae"), "train-vae")
    inv_ckpt = None
    if cfg["align.beta"] != 0.0:
        inv_ckpt = _require(_sibling(args.ckpt, args.inv, "inv"), "pretrain-inv")
    if Path(args.ckpt).exists() and not args.resume:
        raise DataError(f"checkpoint {args.ckpt} exists (pass --resume to continue)")
    pipeline.train_align(patients, cfg, vae_ckpt, inv_ckpt, args.ckpt, resume=args.resume)
    print(f"wrote {args.ckpt}")


def _cmd_infer(args, cfg):
    summary = pipeline.infer_sequence(args.input, args.ckpt, args.out,
                                      metal_threshold=cfg["prep.metal_threshold_hu"])
    print(f"{summary['n_outputs']} slices -> {args.out}")
    if summary["skipped"]:
        print(f"skipped corrupt slices: {', '.join(summary['skipped'])}")


def _cmd_eval(args, cfg):
    metric_cfg = evalbench.MetricConfig.from_run_config(cfg)
    aggregates = []
    for spec in args.pred:
        label, _, path = spec.rpartition("=")
        label = label or "pred"
        report = evalbench.evaluate_dirs(path, args.ref, metric_cfg,
                                         masks_dir=args.masks, method=label)
        evalbench.write_report(report, args.out, stem=f"report_{label}")
        aggregates.append(report.aggregate())
        agg = aggregates[-1]
        psnr_s = "n/a" if agg["psnr"] is None else f"{agg['psnr']:.2f}"
        ssim_s = "n/a" if agg["ssim"] is None else f"{agg['ssim']:.4f}"
        print(f"{label}: psnr {psnr_s} dB, ssim {ssim_s}, slices {agg['n_slices']}")
        if report.missing:
            print(f"{label}: missing slices: {', '.join(report.missing)}")
    if len(aggregates) > 1:
        evalbench.write_comparison(aggregates, Path(args.out) / "comparison.tsv")
        print(f"comparison table -> {Path(args.out) / 'comparison.tsv'}")


def _cmd_baseline_li(args):
    data = Path(args.data)
    if (data / "manifest.json").exists():
        manifest = pipeline.ds.read_manifest(data)
        pids = manifest["split"]["train"] + manifest["split"]["test"]
        for pid in sorted(pids):
            pipeline.li_sequence(data / pid, Path(args.out) / pid)
        print(f"LI reconstructions for {len(pids)} patients -> {args.out}")
    else:
        n = pipeline.li_sequence(data, args.out)
        print(f"{n} LI slices -> {args.out}")


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = config_mod.load(getattr(args, "config", None))
        if args.command == "gen":
            _cmd_gen(args, cfg)
        elif args.command == "train-vae":
            _cmd_train_vae(args, cfg)
        elif args.command == "pretrain-inv":
            _cmd_pretrain_inv(args, cfg)
        elif args.command == "train-align":
            _cmd_train_align(args, cfg)
        elif args.command == "infer":
            _cmd_infer(args, cfg)
        elif args.command == "eval":
            _cmd_eval(args, cfg)
        elif args.command == "baseline-li":
            _cmd_baseline_li(args)
        return 0
    except ConfigError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
