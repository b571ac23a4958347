"""Command-line entry point: ``drc {gen-data,train,infer,eval,sample-prior}``.

Exit codes: 0 success, 1 usage/config error, 2 IO error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import RunConfig
from .errors import ConfigurationError, IngestionError, NumericalFailure, UsageError

log = logging.getLogger("drc")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3


def _load_config(path):
    return RunConfig.load(path) if path else RunConfig().validate()


def _echo_config(cfg, out):
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")


def _save_rgb(path, chw):
    from .synth_data import quantize
    Image.fromarray(quantize(np.asarray(chw).transpose(1, 2, 0))).save(path, format="PNG")


def _save_gray(path, hw):
    Image.fromarray(np.round(np.clip(np.asarray(hw), 0, 1) * 255).astype(np.uint8)).save(path, format="PNG")


def cmd_gen_data(args):
    from .synth_data import write_dataset
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    cfg = _load_config(args.config)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    manifest = write_dataset(args.n, out, cfg.data, seed=args.seed)
    print(f"wrote {manifest['n']} samples to {out}")


def _dataset_for(cfg, data_dir, need_masks=False):
    from .synth_data import ingest_folder
    ds = ingest_folder(data_dir, size=cfg.model.image_size)
    if len(ds) == 0:
        raise UsageError(f"dataset {data_dir} is empty")
    if need_masks and not ds.has_masks:
        raise UsageError(f"dataset {data_dir} has no ground-truth masks (expected {data_dir}/masks/)")
    return ds


def cmd_train(args):
    from .trainer import train
    if args.resume and not args.config:
        from .trainer import load_checkpoint
        cfg = load_checkpoint(args.resume).cfg
    else:
        cfg = _load_config(args.config)
    out = Path(args.out)
    _echo_config(cfg, out)
    ds = _dataset_for(cfg, args.data)

    def progress(rec):
        if rec["iter"] % max(1, args.log_every) == 0:
            log.info("iter %d loss %.4f pi_f %.3f (%.2fs)", rec["iter"], rec["loss_total"],
                     rec["pi_f_mean"], rec["seconds"])

    state, records = train(cfg, ds, out, resume=args.resume, on_record=progress)
    print(f"trained to iteration {state.iteration}; {len(records)} new records in {out / 'metrics.jsonl'}")


def cmd_infer(args):
    from .metrics import binarize
    from .trainer import load_model
    model = load_model(args.ckpt)
    cfg = model.cfg
    ds = _dataset_for(cfg, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    steps = cfg.langevin.test_steps if args.steps is None else args.steps
    bs = args.batch_size
    for start in range(0, len(ds), bs):
        mix = model.infer(ds.images[start:start + bs], steps, seed=args.seed + start)
        for j in range(mix.pi_f.shape[0]):
            name = ds.names[start + j]
            _save_rgb(out / f"{name}_composed.png", mix.composed[j].numpy())
            _save_rgb(out / f"{name}_fg.png", mix.fg_rgb[j].numpy())
            _save_rgb(out / f"{name}_bg.png", mix.bg_rgb_reassigned[j].numpy())
            pi = mix.pi_f[j, 0].numpy()
            _save_gray(out / f"{name}_pi_f.png", pi)
            _save_gray(out / f"{name}_mask.png", binarize(pi, cfg.eval.threshold).astype(np.float64))
    print(f"wrote inference outputs for {len(ds)} images to {out}")


def cmd_eval(args):
    from .metrics import evaluate_run
    from .trainer import load_model
    model = load_model(args.ckpt)
    cfg = model.cfg
    ds = _dataset_for(cfg, args.data, need_masks=True)
    if args.steps is not None:
        cfg.langevin.test_steps = args.steps
    threshold = cfg.eval.threshold if args.threshold is None else args.threshold
    report = evaluate_run(model, ds, cfg.langevin, threshold=threshold,
                          permute=args.permute or cfg.eval.permute, seed=args.seed)
    report.write(args.out)
    print(json.dumps({"n": report.n, "mean_iou": report.mean_iou, "mean_dice": report.mean_dice,
                      "mode": report.config["mode"]}))


def cmd_sample_prior(args):
    from .trainer import load_model
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    model = load_model(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, mix = model.sample_prior(args.n, steps=args.steps, seed=args.seed)
    for i in range(args.n):
        _save_rgb(out / f"prior_{i:04d}.png", mix.composed[i].numpy())
    print(f"wrote {args.n} prior samples to {out}")


def build_parser():
    p = argparse.ArgumentParser(prog="drc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a Textured Multi-dSprites dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="learn the model by EM")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="posterior inference; writes region images and masks")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--steps", type=int)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--batch-size", type=int, default=16)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score inferred foreground masks (IoU / Dice)")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--permute", action="store_true", help="best match over foreground/background masks")
    e.add_argument("--steps", type=int)
    e.add_argument("--threshold", type=float)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample-prior", help="decode samples from the learned priors")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample_prior)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    threads = os.environ.get("DRC_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        args.func(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (IngestionError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
