"""Command-line surface.

Subcommands: synth-gen, train, eval, ablate, gradcheck, export-mesh.
Exit codes: 0 success, 2 config error, 3 numeric error, 4 I/O or integrity
error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .autograd import Tensor, no_grad
from .body import build_template, export_obj, pose_mesh
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import synth_dataset, synth_sample
from .errors import ConfigError, IntegrityError, NumericError, UpperPoseError
from . import gradchecks, report
from .training import ablate, evaluate, restore_model, train


def _cmd_synth_gen(args) -> int:
    report.ensure_dir(args.out)
    template = build_template(args.seed)
    samples = synth_dataset(args.seed, args.count, args.occlusion_prob,
                            template=template)
    with open(os.path.join(args.out, "samples.tsv"), "w") as fh:
        fh.write("index\tdigest\toccluded\tcam_s\tcam_tx\tcam_ty\n")
        for i, s in enumerate(samples):
            cam = s.gt_params.camera.data
            fh.write(f"{i}\t{s.digest()}\t{int(s.occlusion is not None)}\t"
                     f"{cam[0]:.6f}\t{cam[1]:.6f}\t{cam[2]:.6f}\n")
            if args.images:
                report.save_image(os.path.join(args.out, f"sample{i:04d}.png"),
                                  s.image)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = load_config(args.config) if args.config else RunConfig().validate()
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(config, resume=resume,
                   on_step=(lambda s, l: print(f"step {s}: loss {l:.6f}"))
                   if args.verbose else None)
    report.ensure_dir(config.out_dir)
    ckpt_path = os.path.join(config.out_dir, "checkpoint.coev")
    save_checkpoint(ckpt_path, result.checkpoint)
    report.write_trace(os.path.join(config.out_dir, "trace.tsv"), result.trace)
    if result.trace:
        report.plot_trace(os.path.join(config.out_dir, "loss_curve.png"), result.trace)
    print(f"trained {config.steps} steps; checkpoint at {ckpt_path}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = restore_model(ckpt)
    rep = evaluate(model, args.seed, args.count,
                   occlusion_prob=args.occlusion_prob,
                   with_scale=not args.pa_no_scale,
                   image_size=ckpt.config.image_size)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.ckpt))
    report.ensure_dir(out_dir)
    report.write_report(os.path.join(out_dir, "metrics.tsv"), rep)
    report.plot_report(os.path.join(out_dir, "metrics.png"), rep)
    print(report.report_table(rep))
    return 0


def _cmd_ablate(args) -> int:
    config = load_config(args.config) if args.config else RunConfig().validate()
    result = ablate(config)
    report.ensure_dir(config.out_dir)
    table = report.ablation_table(result.reports)
    with open(os.path.join(config.out_dir, "ablation.tsv"), "w") as fh:
        fh.write(table)
    report.plot_ablation(os.path.join(config.out_dir, "ablation.png"),
                         result.reports)
    print(table, end="")
    for base in ("w/o C.E.E.", "w/o P.F.E."):
        verdict = "yes" if result.majority_better(base) else "no"
        print(f"full model better than {base} (majority over seeds): {verdict}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradchecks.run(module=args.module)
    failed = False
    for name, err, tol in results:
        status = "ok" if err < tol else "FAIL"
        failed |= err >= tol
        print(f"{status:4s}  {name:40s} rel_err={err:.3e} tol={tol:.0e}")
    return 0 if not failed else 3


def _cmd_export_mesh(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = restore_model(ckpt)
    sample = synth_sample(args.sample_seed, 0, template=model.template,
                          image_size=ckpt.config.image_size)
    with no_grad():
        out = model.forward(Tensor(sample.image))
    export_obj(args.obj, out.mesh.vertices.data, model.template.faces)
    print(f"wrote mesh ({model.template.vertex_count} vertices) to {args.obj}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="upperpose",
        description="Upper-body pose-and-shape pipeline on synthetic data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic sample set")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--occlusion-prob", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--images", action="store_true", help="also write PNGs")
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="key=value config file (defaults if omitted)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--occlusion-prob", type=float, default=0.0)
    p.add_argument("--pa-no-scale", action="store_true",
                   help="rigid (no-scale) Procrustes alignment")
    p.add_argument("--out", help="report directory (default: next to ckpt)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and compare full/variant models")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--module", default="all",
                   choices=["all", "tensor", "foreground", "interaction",
                            "body", "metrics", "model"])
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("export-mesh", help="export a predicted mesh as OBJ")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--obj", required=True)
    p.set_defaults(func=_cmd_export_mesh)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (IntegrityError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except UpperPoseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
