"""Command-line entry point: ``u2airway <subcommand> ...``.

Exit status: 0 success, 1 validation error (bad config, file or extent),
2 numeric failure (non-finite loss, gradient check above tolerance).
"""
import argparse
import logging
import sys

import numpy as np

from . import volio
from .config import load_config
from .errors import NumericError, ValidationError
from .gradcheck import network_grad_check
from .phantom import gen_phantom
from .postprocess import component_report, refine
from .preprocess import Volume, make_inputs, normalize_volume
from .train import (dsc_table, evaluate, load_checkpoint, predict_volume,
                    save_checkpoint, train)
from .u2net import describe

log = logging.getLogger("u2airway")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat key = value run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--connectivity", type=int, choices=(6, 26))
    p.add_argument("--side-channels", type=int, dest="side_channels")
    p.add_argument("--width-factor", type=float, dest="width_factor")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _cfg(args):
    keys = ("seed", "threshold", "connectivity", "side_channels", "width_factor")
    return load_config(args.config, {k: getattr(args, k) for k in keys})


def cmd_phantom(args, cfg):
    ph = gen_phantom(cfg.phantom_config(), cfg.seed)
    volio.write_volume(ph.volume, args.volume)
    volio.write_volume(ph.mask, args.mask)
    print(f"phantom {ph.volume.dims}: {int(ph.mask.values.sum())} lumen voxels, {ph.clipped} clipped branch(es)")


def cmd_preprocess(args, cfg):
    vol = volio.read_any(args.input)
    volio.write_volume(normalize_volume(vol), args.output)


def _training_pairs(cfg, paths):
    if len(paths) % 2:
        raise ValidationError("training inputs must come in VOLUME MASK pairs")
    data = []
    for vpath, mpath in zip(paths[::2], paths[1::2]):
        vol = volio.read_any(vpath)
        mask = volio.read_any(mpath)
        if vol.dims != mask.dims:
            raise ValidationError(f"{vpath} {vol.dims} and {mpath} {mask.dims} differ in shape")
        stack = make_inputs(normalize_volume(vol), mode=cfg.input_mode)
        for z in range(0, vol.dims[0], cfg.slice_step):
            data.append((stack.slices[z], (mask.values[z] != 0).astype(np.float32)))
    return data


def cmd_train(args, cfg):
    data = _training_pairs(cfg, args.pairs)
    progress = None
    if args.verbose:
        def progress(p):
            log.info("epoch %d step %d train %.5f val %s", p.epoch, p.step, p.train_loss, p.val_loss)
    ckpt, curve = train(cfg.train_config(), cfg.net_spec(), data, progress=progress)
    save_checkpoint(ckpt, args.checkpoint)
    curve.save(args.curve)
    last = curve.points[-1]
    print(f"trained {ckpt.step} steps; final train loss {last.train_loss:.5f}")


def cmd_predict(args, cfg):
    ckpt = load_checkpoint(args.checkpoint)
    vol = volio.read_any(args.volume)
    probs = predict_volume(ckpt, vol, input_mode=cfg.input_mode)
    volio.write_volume(Volume(probs, vol.spacing), args.output)


def cmd_refine(args, cfg):
    prob = volio.read_any(args.input)
    mask, lm = refine(prob.values, cfg.threshold, cfg.connectivity, return_labels=True)
    volio.write_volume(Volume(mask, prob.spacing), args.output)
    report = component_report(lm)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(report)
    sys.stdout.write(report)


def cmd_eval(args, cfg):
    ckpt = load_checkpoint(args.checkpoint)
    if len(args.pairs) % 2:
        raise ValidationError("eval inputs must come in VOLUME MASK pairs")
    cases = []
    for vpath, mpath in zip(args.pairs[::2], args.pairs[1::2]):
        cases.append((vpath, volio.read_any(vpath), volio.read_any(mpath)))
    results, mean = evaluate(ckpt, cases, cfg.threshold, cfg.connectivity)
    table = dsc_table(results, mean)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    sys.stdout.write(table)
    if any(r.error for r in results):
        return 1
    return 0


def cmd_gradcheck(args, cfg):
    spec = cfg.net_spec()
    err = network_grad_check(spec, seed=cfg.seed, n_samples=args.samples, h=args.h)
    print(f"max relative error {err:.3e} (tolerance {args.tolerance:g}, {args.samples} samples, h={args.h:g})")
    if not err < args.tolerance:
        raise NumericError(f"gradient check failed: {err:.3e} >= {args.tolerance:g}")


def cmd_describe(args, cfg):
    text = describe(cfg.net_spec())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)


def cmd_montage(args, cfg):
    obj = volio.read_any(args.input)
    paths = volio.export_montage(obj, args.outdir, args.every_k, kind=args.kind)
    print(f"wrote {len(paths)} image(s) to {args.outdir}")


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="u2airway", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate a phantom volume and lumen mask")
    p.add_argument("volume")
    p.add_argument("mask")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", parents=[common], help="per-slice normalization")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train on VOLUME MASK pairs")
    p.add_argument("pairs", nargs="+", metavar="VOLUME MASK")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--curve", required=True, help="loss-curve CSV output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="fused probability map for a volume")
    p.add_argument("checkpoint")
    p.add_argument("volume")
    p.add_argument("output")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("refine", parents=[common], help="threshold and keep the largest component")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--report", help="also write the component report here")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", parents=[common], help="per-case DSC table")
    p.add_argument("checkpoint")
    p.add_argument("pairs", nargs="+", metavar="VOLUME MASK")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check through the network")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--h", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("describe", parents=[common], help="layer table for the configured network")
    p.add_argument("--out")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("montage", parents=[common], help="PGM images of axial slices")
    p.add_argument("input")
    p.add_argument("outdir")
    p.add_argument("--every-k", type=int, default=1, dest="every_k")
    p.add_argument("--kind", choices=("auto", "volume", "mask", "labels"), default="auto")
    p.set_defaults(func=cmd_montage)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _cfg(args)
        return args.func(args, cfg) or 0
    except ValidationError as exc:
        where = f" [{exc.field}]" if getattr(exc, "field", None) else ""
        print(f"error{where}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        where = f" [step {exc.step}]" if exc.step is not None else ""
        print(f"numeric failure{where}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
