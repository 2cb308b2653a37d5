"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or configuration,
3 self-check failure. All reports are JSON; images are PNG.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import training as tr
from .color import luma_plane, rgb_to_ycc
from .dct import (
    ChannelStats,
    load_freqmaps,
    load_stats,
    plane_to_blocks,
    save_freqmaps,
    save_stats,
)
from .enhance import MergeJob, merge_channels, parse_selection, reconstruct_merged
from .errors import InvalidInputError
from .images import center_crop_multiple, load_image, save_image
from .infer import super_resolve
from .metrics import TABLE_ANNULUS_WEIGHTS, region_residual_profile, table1_weights
from .model import ModelConfig, load_checkpoint
from .resample import bicubic_resize

log = logging.getLogger(__name__)

BLOCK = 32


def _png_images(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise InvalidInputError(f"{d} is not a directory")
    paths = sorted(d.glob("*.png"))
    if not paths:
        raise InvalidInputError(f"no .png files in {d}")
    return [(p.name, load_image(p)) for p in paths]


def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _print_json(doc) -> None:
    print(json.dumps(doc, indent=2))


def _stats_from_sidecar(doc: dict) -> ChannelStats:
    return ChannelStats(means=np.asarray(doc["means"]),
                        stds=np.asarray(doc["stds"]),
                        samples=int(doc["samples"]))


def _resolve_stats(args, bundle) -> ChannelStats:
    if getattr(args, "stats", None):
        return load_stats(args.stats)
    if "stats" in bundle.sidecar:
        return _stats_from_sidecar(bundle.sidecar["stats"])
    raise InvalidInputError(
        "checkpoint carries no channel stats; pass --stats explicitly"
    )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_stats(args) -> int:
    images = _png_images(args.train_dir)
    stats = tr.corpus_stats(images, scale=args.scale, r=args.r)
    save_stats(args.out, stats)
    _print_json({
        "out": str(args.out),
        "r": stats.r,
        "images": len(images),
        "samples": stats.samples,
        "std_min": float(stats.stds.min()),
        "std_max": float(stats.stds.max()),
    })
    return 0


def _load_train_configs(args):
    model_doc, train_doc = {}, {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
        extra = set(doc) - {"model", "train"}
        if extra:
            raise InvalidInputError(f"unknown config sections: {sorted(extra)}")
        model_doc = doc.get("model", {})
        train_doc = doc.get("train", {})
    mcfg = ModelConfig.from_dict(model_doc)
    tcfg = tr.TrainConfig.from_dict(train_doc)

    # CLI flags win over the config file, which wins over defaults.
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.iterations is not None:
        tcfg = replace(tcfg, iterations=args.iterations)
    if args.batch_size is not None:
        tcfg = replace(tcfg, batch_size=args.batch_size)
    if args.epsilon is not None:
        tcfg = replace(tcfg, epsilon=args.epsilon)
    if args.precision is not None:
        tcfg = replace(tcfg, precision=args.precision)
    if args.eta_max is not None:
        tcfg = replace(tcfg, coslr=replace(tcfg.coslr, eta_max=args.eta_max))
    if args.w1 is not None:
        mcfg = replace(mcfg, w1=args.w1)
    if args.w2 is not None:
        mcfg = replace(mcfg, w2=args.w2)
    return mcfg, tcfg


def cmd_train(args) -> int:
    mcfg, tcfg = _load_train_configs(args)
    images = _png_images(args.data_dir)
    stats = load_stats(args.stats) if args.stats else None
    _print_json({
        "effective_config": {"model": mcfg.to_dict(), "train": tcfg.to_dict()},
        "data_dir": str(args.data_dir),
        "out_dir": str(args.out_dir),
        "images": len(images),
    })
    result = tr.train(images, mcfg, tcfg, args.out_dir, stats=stats)
    _print_json({
        "checkpoint": str(result.checkpoint_path),
        "log": str(result.log_path),
        "baseline_l_freq": result.baseline_l_freq,
        "first_l_freq": result.first_l_freq,
        "final_l_freq": result.final_l_freq,
        "iterations": result.iterations,
    })
    return 0


def cmd_infer(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    cfg = bundle.cfg
    if args.w1 is not None:
        cfg = replace(cfg, w1=args.w1)
    if args.w2 is not None:
        cfg = replace(cfg, w2=args.w2)
    stats = _resolve_stats(args, bundle)
    lr = load_image(args.input)
    result = super_resolve(lr, bundle.params, cfg, stats, scale=args.scale)
    save_image(args.out, result.image)
    if args.maps_out:
        save_freqmaps(args.maps_out, result.maps)
    _print_json({
        "out": str(args.out),
        "maps_out": str(args.maps_out) if args.maps_out else None,
        "lr_shape": list(lr.shape),
        "sr_shape": list(result.image.shape),
        "w1": cfg.w1,
        "w2": cfg.w2,
    })
    return 0


def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    stats = _resolve_stats(args, bundle)
    images = _png_images(args.data_dir)
    report = tr.evaluate(images, bundle.params, bundle.cfg, stats,
                         epsilon=args.epsilon, scale=args.scale)
    if args.out:
        _write_json(args.out, report)
    _print_json(report["aggregate"])
    return 0


def _aligned_pair_grids(name, hr, lr, scale=4):
    """Block grids for one HR/LR pair; LR may be full-size or 1/scale-size."""
    if hr.shape[:2] == lr.shape[:2]:
        hr_c = center_crop_multiple(hr, BLOCK)
        lr_c = center_crop_multiple(lr, BLOCK)
        lr_up = luma_plane(lr_c)
    else:
        h, w = lr.shape[0], lr.shape[1]
        if (h * scale, w * scale) != hr.shape[:2]:
            raise InvalidInputError(
                f"pair {name}: LR {lr.shape} matches HR {hr.shape} neither "
                f"at full size nor at 1/{scale}"
            )
        unit = BLOCK // scale
        th, tw = h // unit * unit, w // unit * unit
        if th == 0 or tw == 0:
            raise InvalidInputError(f"pair {name}: LR too small to crop")
        oy, ox = (h - th) // 2, (w - tw) // 2
        lr_c = lr[oy : oy + th, ox : ox + tw]
        hr_c = hr[oy * scale : (oy + th) * scale, ox * scale : (ox + tw) * scale]
        lr_up = bicubic_resize(luma_plane(lr_c), float(scale))
    return plane_to_blocks(luma_plane(hr_c)), plane_to_blocks(lr_up)


def cmd_weights(args) -> int:
    root = Path(args.pairs_dir)
    hr_dir, lr_dir = root / "hr", root / "lr"
    if not hr_dir.is_dir() or not lr_dir.is_dir():
        raise InvalidInputError(f"{root} must contain hr/ and lr/ directories")
    hr_paths = sorted(hr_dir.glob("*.png"))
    if not hr_paths:
        raise InvalidInputError(f"no .png files in {hr_dir}")
    pairs = []
    for hp in hr_paths:
        lp = lr_dir / hp.name
        if not lp.is_file():
            raise InvalidInputError(f"pair {hp.name}: missing {lp}")
        pairs.append(_aligned_pair_grids(hp.name, load_image(hp),
                                         load_image(lp), scale=args.scale))
    profile = region_residual_profile(pairs)
    reference = table1_weights()
    doc = {
        "samples": profile["samples"],
        "res": [float(x) for x in profile["res"]],
        "v": [float(x) for x in profile["v"]],
        "reference_profile": {
            "id": reference.profile_id,
            "annulus_weights": TABLE_ANNULUS_WEIGHTS,
            "weights_in_ring_order": list(TABLE_ANNULUS_WEIGHTS.values()),
            "betas": reference.betas.tolist(),
        },
    }
    _write_json(args.out, doc)
    _print_json({"out": str(args.out), "samples": doc["samples"],
                 "res": doc["res"], "v": doc["v"]})
    return 0


def cmd_merge(args) -> int:
    sr = load_image(args.sr)
    if sr.shape[0] % BLOCK or sr.shape[1] % BLOCK:
        log.warning("SR image %s is not 32-aligned; center-cropping", args.sr)
        sr = center_crop_multiple(sr, BLOCK)
    maps = load_freqmaps(args.maps)
    if maps.normalized:
        raise InvalidInputError("merge needs denormalized maps (infer --maps-out)")
    selection = parse_selection(args.selection, maps.r)

    lr_fill = None
    if args.fill_mode == "lr":
        if not args.lr:
            raise InvalidInputError("--fill-mode lr requires --lr (the LR image)")
        lr_img = load_image(args.lr)
        h, w = lr_img.shape[0], lr_img.shape[1]
        if sr.shape[0] % h or sr.shape[1] % w or sr.shape[0] // h != sr.shape[1] // w:
            raise InvalidInputError(
                f"LR {lr_img.shape} does not evenly upscale to SR {sr.shape}"
            )
        scale = sr.shape[0] // h
        lr_fill = plane_to_blocks(bicubic_resize(luma_plane(lr_img), float(scale)))

    job = MergeJob(sr_image=sr, freqnet_maps=maps, selection=selection,
                   lr_fill=lr_fill, fill_mode=args.fill_mode)
    merged, fill = merge_channels(job)
    chroma = None
    if sr.ndim == 3:
        ycc = rgb_to_ycc(sr)
        chroma = (ycc.cb, ycc.cr)
    out = reconstruct_merged(merged, fill, chroma=chroma)
    save_image(args.out, out)
    _print_json({
        "out": str(args.out),
        "channels_replaced": len(selection),
        "fill_mode": args.fill_mode,
        "shape": list(out.shape),
    })
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    ok, lines = run_selfcheck(quick=args.quick)
    for line in lines:
        print(line)
    return 0 if ok else 3


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freqnet",
        description="Frequency-domain single-image super-resolution toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="channel statistics over a training set")
    p.add_argument("--train-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--r", type=int, default=10)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="JSON file with model/train sections")
    p.add_argument("--stats", help="precomputed channel stats JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--eta-max", type=float)
    p.add_argument("--w1", type=float)
    p.add_argument("--w2", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve one LR image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--maps-out", help="write the output frequency maps (FQM1)")
    p.add_argument("--stats", help="override the checkpoint's channel stats")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--w1", type=float)
    p.add_argument("--w2", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", help="write the full JSON report here")
    p.add_argument("--stats")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("weights", help="ring residual profile from HR/LR pairs")
    p.add_argument("--pairs-dir", required=True,
                   help="directory containing hr/ and lr/ subdirectories")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("merge", help="merge model frequency channels into an SR image")
    p.add_argument("--sr", required=True, help="third-party SR image (PNG)")
    p.add_argument("--maps", required=True, help="model output maps (FQM1)")
    p.add_argument("--selection", required=True,
                   help='e.g. "0-8,annulus:6-5,annulus:7-6" (may be empty)')
    p.add_argument("--fill-mode", choices=("lr", "sr"), default="lr")
    p.add_argument("--lr", help="LR image (required for --fill-mode lr)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("selfcheck", help="run the numeric verification suites")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures: I/O, divergence, state
        print(f"error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
