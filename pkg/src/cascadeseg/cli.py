"""
Command-line entry point.

    cascadeseg phantom  --config cfg.yaml --out data/
    cascadeseg train    --config cfg.yaml --out run/ --step all
    cascadeseg predict  --checkpoint run/checkpoint_final.pt --input img.nii.gz --output seg.nii.gz
    cascadeseg evaluate --pred seg.nii.gz --truth label.nii.gz [--out metrics.csv]
    cascadeseg summary  --config cfg.yaml
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import nibabel as nib
import torch

from .config import TrainConfig, dump_config, load_config
from .metrics import evaluate_volume
from .networks import build_net1, build_net2, summary
from .phantom import generate_dataset, read_manifest, write_dataset
from .sampler import prepare_case
from .trainer import Trainer, load_checkpoint
from .volumes import load_volume, save_volume


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig.from_dict({})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _dataset(cfg: TrainConfig):
    if cfg.data.manifest:
        return read_manifest(cfg.data.manifest)
    return generate_dataset(cfg.phantom, cfg.data.num_cases, cfg.data.seed_base)


def cmd_phantom(args) -> int:
    cfg = _config(args)
    manifest = write_dataset(cfg.phantom, cfg.data.num_cases, cfg.data.seed_base, args.out)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    torch.manual_seed(cfg.schedule.seed)
    cases = [prepare_case(iv, lv, cfg.inference.coarse_spacing) for iv, lv in _dataset(cfg)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    kwargs = dict(sampler_cfg=cfg.sampler, loss_cfg=cfg.loss, out_dir=out,
                  inference={"coarse_spacing": cfg.inference.coarse_spacing,
                             "roi_margin": cfg.inference.roi_margin,
                             "refine_net1_on_roi": cfg.inference.refine_net1_on_roi})
    if args.resume:
        trainer = Trainer.from_checkpoint(load_checkpoint(args.resume), cases, cfg.schedule, **kwargs)
    else:
        trainer = Trainer(build_net1(cfg.net1), build_net2(cfg.net2), cases, cfg.schedule, **kwargs)
    if args.step == "all":
        trainer.run_all()
    else:
        trainer.run_step(int(args.step), from_scratch=args.from_scratch)
    print(out)
    return 0


def cmd_predict(args) -> int:
    from .inference import predict

    iv = load_volume(args.input, as_labels=False)
    seg = predict(iv, load_checkpoint(args.checkpoint))
    # copy the input's header geometry verbatim
    save_volume(seg, args.output, affine=nib.load(args.input).affine)
    print(args.output)
    return 0


def cmd_evaluate(args) -> int:
    truth = load_volume(args.truth, as_labels=True)
    pred = load_volume(args.pred, as_labels=True, num_classes=truth.num_classes)
    table = evaluate_volume(pred, truth).to_csv()
    if args.out:
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_summary(args) -> int:
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        net1, net2 = ckpt.net1, ckpt.net2
    else:
        cfg = _config(args)
        net1, net2 = build_net1(cfg.net1), build_net2(cfg.net2)
    print("network 1\n" + summary(net1) + "\n\nnetwork 2\n" + summary(net2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascadeseg", description=__doc__.strip().splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        return p

    p = add("phantom", cmd_phantom, "write a synthetic phantom dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "run one training step or the whole schedule")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--step", choices=["1", "2", "3", "4", "all"], default="all")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--from-scratch", action="store_true",
                   help="allow a later step without its predecessor's checkpoint")
    p.add_argument("--out", required=True, help="directory for checkpoints and the training log")

    p = add("predict", cmd_predict, "segment a volume at native resolution")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = add("evaluate", cmd_evaluate, "per-class Dice, Jaccard and ASD as CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")

    p = add("summary", cmd_summary, "print layer tables and parameter counts")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError, FloatingPointError) as exc:
        print(f"cascadeseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
