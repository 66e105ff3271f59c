"""Command-line front end.

Subcommands mirror the pipeline: gen-data, train-source, adapt, eval,
diagnose, report. Every command takes --config (flat key = value file) plus
a few overrides, writes all of its outputs under --out, and drops a run.json
recording exactly what was run. Deliberate failures print one
`ErrorClass: message` line on stderr and exit 1.
"""

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import config as C
from . import synthdata as SD
from .engine import adapt as run_adapt
from .engine import evaluate, train_source
from .errors import SegAdaptError
from .network import build_segmentor, load_checkpoint, save_checkpoint
from .plots import bar_figure, scatter_figure
from .report import write_report


def _ensure_out(path):
    os.makedirs(path, exist_ok=True)
    return path


def _write_manifest(out_dir, command, args, cfg, started):
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in cfg.items()},
        "package_version": __version__,
        "started_unix": round(started, 3),
        "finished_unix": round(time.time(), 3),
    }
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _resolve(args, extra_overrides=None):
    overrides = dict(extra_overrides or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return C.resolve_config(args.config, overrides)


def cmd_gen_data(args):
    started = time.time()
    cfg = _resolve(args, {
        k: v for k, v in {
            "data.source_count": args.source_count,
            "data.target_count": args.target_count,
            "data.val_count": args.val_count,
        }.items() if v is not None})
    spec = C.data_spec(cfg)
    out = _ensure_out(args.out)
    SD.write_dataset(os.path.join(out, "source"), spec, "source",
                     cfg["data.source_count"])
    SD.write_dataset(os.path.join(out, "target"), spec, "target",
                     cfg["data.target_count"])
    # Validation images continue the target index range so they never
    # collide with the training samples.
    SD.write_dataset(os.path.join(out, "target_val"), spec, "target",
                     cfg["data.val_count"],
                     start_index=cfg["data.target_count"])
    _write_manifest(out, "gen-data", args, cfg, started)
    print(f"wrote {cfg['data.source_count']} source, "
          f"{cfg['data.target_count']} target, "
          f"{cfg['data.val_count']} target-val samples under {out}")
    return 0


def cmd_train_source(args):
    started = time.time()
    cfg = _resolve(args)
    out = _ensure_out(args.out)
    dataset = SD.load_dataset(args.data)
    net = build_segmentor(C.segmentor_spec(cfg), seed=cfg["seed"])
    epochs = args.epochs if args.epochs is not None else cfg["source.epochs"]
    losses = train_source(net, dataset, epochs=epochs, lr=cfg["source.lr"],
                          momentum=cfg["source.momentum"],
                          batch_size=cfg["source.batch_size"],
                          bn_momentum=cfg["source.bn_momentum"],
                          seed=cfg["seed"], log=print)
    ckpt = os.path.join(out, "source.ckpt")
    save_checkpoint(ckpt, net)
    with open(os.path.join(out, "source_train.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_ce"])
        w.writerows([[i, v] for i, v in enumerate(losses)])
    _write_manifest(out, "train-source", args, cfg, started)
    print(f"saved {ckpt} (final ce {losses[-1]:.4f})")
    return 0


def cmd_adapt(args):
    started = time.time()
    overrides = {}
    if args.epochs is not None:
        overrides["adapt.epochs"] = args.epochs
    if args.no_se:
        overrides["adapt.use_se"] = False
    if args.no_mcsf:
        overrides["adapt.use_mcsf"] = False
    if args.no_scaling_adjust:
        overrides["adapt.use_scaling_adjust"] = False
    if args.no_adaptive_channels:
        overrides["adapt.use_adaptive_channels"] = False
    cfg = _resolve(args, overrides)
    out = _ensure_out(args.out)
    net = load_checkpoint(args.ckpt)
    dataset = SD.load_dataset(args.data, need_masks=False)
    val = SD.load_dataset(args.val) if args.val else None
    result = run_adapt(net, dataset, C.adapt_config(cfg), out_dir=out,
                       val_dataset=val, log=print)
    _write_manifest(out, "adapt", args, cfg, started)
    summary = result["summary"]
    line = (f"adapted {summary['images']} images over "
            f"{summary['iterations']} iterations "
            f"({summary['wall_clock_s']}s), variant {summary['variant']}")
    if "final_val_dice_foreground" in summary:
        line += f", final val fg DSC {summary['final_val_dice_foreground']:.4f}"
    print(line)
    return 0


def cmd_eval(args):
    started = time.time()
    cfg = _resolve(args)
    out = _ensure_out(args.out)
    net = load_checkpoint(args.ckpt)
    dataset = SD.load_dataset(args.data)
    mode = args.bn_stats or cfg["eval.bn_stats"]
    scores = evaluate(net, dataset, mode=mode,
                      batch_size=cfg["eval.batch_size"])
    with open(os.path.join(out, "eval.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "class", "dice", "hausdorff"])
        for row in scores["per_image"]:
            w.writerow([row["image"], row["class"], row["dice"],
                        row["hausdorff"]])
    brief = {k: scores[k] for k in ("dice_mean", "dice_std",
                                    "hausdorff_mean", "dice_foreground",
                                    "mean_entropy")}
    brief["bn_stats"] = mode
    with open(os.path.join(out, "eval.json"), "w") as fh:
        json.dump(brief, fh, indent=2, sort_keys=True)
    _write_manifest(out, "eval", args, cfg, started)
    for c, m in scores["dice_mean"].items():
        print(f"class {c}: dice {m:.4f} +- {scores['dice_std'][c]:.4f}, "
              f"hausdorff {scores['hausdorff_mean'][c]:.2f}")
    print(f"foreground dice {scores['dice_foreground']:.4f} "
          f"(bn stats: {mode}, mean entropy {scores['mean_entropy']:.4f})")
    return 0


def cmd_diagnose(args):
    from .diagnostics import (a_distance_study, prune_study,
                              scaling_gradient_study)
    started = time.time()
    cfg = _resolve(args)
    out = _ensure_out(args.out)
    adapted = load_checkpoint(args.adapted_ckpt)
    eval_data = SD.load_dataset(args.eval_data)
    report = {}

    rows = prune_study(adapted, eval_data, fraction=args.prune_fraction,
                       batch_size=cfg["eval.batch_size"])
    report["pruning"] = rows
    bar_figure(os.path.join(out, "prune_dsc.png"),
               [r["order"] for r in rows],
               [r["dice_foreground"] for r in rows],
               ylabel="foreground DSC",
               title=f"pruning {args.prune_fraction:.0f}% of channels")

    if args.source_ckpt and args.source_data and args.target_data:
        source_net = load_checkpoint(args.source_ckpt)
        source_data = SD.load_dataset(args.source_data, need_masks=False)
        target_data = SD.load_dataset(args.target_data, need_masks=False)
        ad = a_distance_study(source_net, adapted, source_data, target_data,
                              batch_size=cfg["eval.batch_size"],
                              seed=cfg["seed"])
        report["a_distance"] = ad
        bar_figure(os.path.join(out, "a_distance.png"),
                   ["before", "after"], [ad["before"], ad["after"]],
                   ylabel="proxy A-distance",
                   title="feature discrepancy across adaptation")
        study_images = target_data.images[:cfg["eval.batch_size"]]
    else:
        study_images = eval_data.images[:cfg["eval.batch_size"]]

    grad = scaling_gradient_study(adapted, study_images)
    report["scaling_spearman"] = grad["spearman_gamma_vs_grad"]
    with open(os.path.join(out, "scaling_grad.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["layer", "channel", "gamma_src",
                                           "grad_mag"])
        w.writeheader()
        w.writerows(grad["rows"])
    scatter_figure(os.path.join(out, "scaling_grad.png"),
                   [abs(r["gamma_src"]) for r in grad["rows"]],
                   [r["grad_mag"] for r in grad["rows"]],
                   xlabel="|gamma_src|", ylabel="mean |grad|",
                   title=f"scale vs gradient "
                         f"(spearman {grad['spearman_gamma_vs_grad']:.2f})")

    with open(os.path.join(out, "diagnose.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    _write_manifest(out, "diagnose", args, cfg, started)
    drops = {r["order"]: r["drop"] for r in report["pruning"]}
    print(f"prune drops: smallest {drops.get('smallest', float('nan')):.4f}, "
          f"largest {drops.get('largest', float('nan')):.4f}")
    if "a_distance" in report:
        print(f"proxy A-distance before {report['a_distance']['before']:.3f} "
              f"after {report['a_distance']['after']:.3f}")
    print(f"scaling/gradient spearman {report['scaling_spearman']:.3f}")
    return 0


def cmd_report(args):
    started = time.time()
    cfg = _resolve(args)
    out = _ensure_out(args.out)
    result = write_report(args.runs, out)
    _write_manifest(out, "report", args, cfg, started)
    print(f"wrote {result['table']} and {len(result['figures'])} figures "
          f"covering {len(result['rows'])} runs")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="segadapt",
        description="source-free BN-statistics domain adaptation for "
                    "segmentation, desk scale")
    parser.add_argument("--debug", action="store_true",
                        help="re-raise errors with a traceback")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None,
                       help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="render a synthetic domain pair")
    common(p)
    p.add_argument("--source-count", type=int, default=None)
    p.add_argument("--target-count", type=int, default=None)
    p.add_argument("--val-count", type=int, default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-source", help="supervised source training")
    common(p)
    p.add_argument("--data", required=True, help="labelled source dataset")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_train_source)

    p = sub.add_parser("adapt", help="source-free adaptation on target data")
    common(p)
    p.add_argument("--ckpt", required=True, help="source checkpoint")
    p.add_argument("--data", required=True, help="unlabelled target dataset")
    p.add_argument("--val", default=None,
                   help="labelled target dataset for per-epoch diagnostics")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--no-se", action="store_true",
                   help="drop the self-entropy term")
    p.add_argument("--no-mcsf", action="store_true",
                   help="drop the memory-consistent self-training term")
    p.add_argument("--no-scaling-adjust", action="store_true",
                   help="plain consistency weights, no exp(-gamma) damping")
    p.add_argument("--no-adaptive-channels", action="store_true",
                   help="uniform channel weights instead of transferability")
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("eval", help="score a checkpoint on labelled data")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bn-stats", choices=["run", "src", "batch"], default=None,
                   help="normalisation statistics at inference")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("diagnose", help="pruning / discrepancy / scaling studies")
    common(p)
    p.add_argument("--adapted-ckpt", required=True)
    p.add_argument("--eval-data", required=True,
                   help="labelled target data for the pruning study")
    p.add_argument("--source-ckpt", default=None)
    p.add_argument("--source-data", default=None)
    p.add_argument("--target-data", default=None)
    p.add_argument("--prune-fraction", type=float, default=10.0)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("report", help="aggregate adaptation runs")
    common(p)
    p.add_argument("--runs", nargs="+", required=True,
                   help="adaptation output directories")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SegAdaptError as exc:
        if args.debug:
            raise
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        if args.debug:
            raise
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
