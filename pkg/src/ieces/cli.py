"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort or
failed self-check.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import selfcheck
from .augment import AugmentConfig, compose_augment, motion_blur, perspective_jitter, random_erase, rotate
from .dataset import DatasetError, normalize, resolve_data
from .encoder import EncodeTrace, EncoderConfig
from .evaluator import (CONDITIONS, heatmap, infer, read_groups, robustness_report, single_branch_check,
                        write_reports)
from .image import CLEAN, PPMError, SignImage, read_pnm, write_ppm
from .siamese import SiameseConfig, encode_templates
from .trainer import (CheckpointError, NumericalAbort, ResumeError, TrainConfig, build_model, load_checkpoint,
                      model_from_checkpoint, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OPS = ("erase", "blur", "rotate", "perspective", "compose")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _echo(config: dict, seed) -> None:
    print("config " + json.dumps(config, sort_keys=True, default=str), file=sys.stderr)
    print(f"seed {seed}", file=sys.stderr)


def _train_config(args) -> TrainConfig:
    siamese = SiameseConfig(margin=args.margin, alpha=args.alpha, negatives=args.negatives, mode=args.mode,
                            refresh=args.refresh)
    return TrainConfig(lr=args.lr, weight_decay=args.wd, batch_size=args.batch, epochs=args.epochs,
                       patience=args.patience, seed=args.seed, ckpt_interval=args.ckpt_interval,
                       dtype="float64" if args.f64 else "float32", max_steps=args.max_steps,
                       siamese=siamese, augment=AugmentConfig())


def cmd_train(args) -> int:
    try:
        cfg = _train_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    resolved = {"data": args.data, "out": args.out, "train": cfg.to_dict(), "encoder": asdict(EncoderConfig())}
    if args.print_config:
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return EXIT_OK
    _echo(resolved, cfg.seed)
    split, templates = resolve_data(args.data, cfg.seed, args.templates)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split.write_manifest(out / "manifest.tsv")
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"param_count {build_model(split.num_classes).param_count()}")
    try:
        res = train(split, templates, cfg, out, resume=args.resume)
    except ResumeError as exc:
        raise DatasetError(str(exc)) from None
    print(f"steps {res.steps} epochs {res.epochs_run} stopped {res.stopped}")
    if res.val_history:
        print(f"val_acc {res.val_history[-1]:.6f}")
    print(f"checkpoint {res.checkpoint}")
    print(f"log {res.log}")
    return EXIT_OK


def _load(args):
    ckpt = load_checkpoint(args.ckpt)
    return ckpt, model_from_checkpoint(ckpt)


def _data_for(args, model, seed):
    split, templates = resolve_data(args.data, seed, args.templates)
    if split.num_classes != model.num_classes:
        raise DatasetError(f"checkpoint has {model.num_classes} classes, data has {split.num_classes}")
    return split, templates


def cmd_eval(args) -> int:
    conditions = [c.strip() for c in args.conditions.split(",") if c.strip()]
    unknown = [c for c in conditions if c not in CONDITIONS]
    if unknown or not conditions:
        raise UsageError(f"unknown conditions {unknown}; choose from {','.join(CONDITIONS)}")
    resolved = {"ckpt": args.ckpt, "data": args.data, "conditions": conditions, "out": args.out,
                "groups": args.groups}
    if args.print_config:
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return EXIT_OK
    _echo(resolved, args.seed)
    ckpt, model = _load(args)
    print(f"param_count {model.param_count()}")
    split, _ = _data_for(args, model, int(ckpt.rng["seed"]))
    if not split.test:
        raise DatasetError(f"{args.data}: no test images")
    groups = None
    if args.groups is not None:
        try:
            groups = read_groups(args.groups, model.num_classes)
        except (OSError, ValueError) as exc:
            raise DatasetError(str(exc)) from None
    report = robustness_report(model, split.test, conditions, seed=args.seed)
    for path in write_reports(args.out, report, groups):
        print(f"wrote {path}")
    sys.stdout.write(report.summary_text())
    return EXIT_OK


def cmd_infer(args) -> int:
    resolved = {"ckpt": args.ckpt, "images": args.image}
    if args.print_config:
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return EXIT_OK
    _echo(resolved, None)
    _, model = _load(args)
    print(f"param_count {model.param_count()}", file=sys.stderr)
    status = EXIT_OK
    times, n_ok = [], 0
    trace = EncodeTrace()
    for path in args.image:
        try:
            px = normalize(read_pnm(path))
        except (OSError, PPMError, ValueError) as exc:
            print(f"error {path}: {exc}", file=sys.stderr)
            status = EXIT_DATA
            continue
        res = infer(model, [px], trace)
        pred = res.predictions[0]
        n_ok += 1
        times.append(res.seconds[0])
        print(f"{path}\t{pred.class_index}\t{pred.max_probability:.6f}")
        print(f"time {path} {res.seconds[0]:.4f}s", file=sys.stderr)
    if times:
        print(f"time mean {np.mean(times):.4f}s over {len(times)} images", file=sys.stderr)
    ok = single_branch_check(trace, n_ok)
    print(f"single_branch_check {'pass' if ok else 'fail'} (encoder passes {trace.sample_passes}, "
          f"template passes {trace.template_passes})", file=sys.stderr)
    if not ok:
        return EXIT_NUMERIC
    return status


def cmd_augment(args) -> int:
    if args.op not in OPS:
        raise UsageError(f"unknown op {args.op!r}; choose from {', '.join(OPS)}")
    resolved = {"in": args.input, "out": args.out, "op": args.op, "seed": args.seed, "p": args.p,
                "augment": asdict(AugmentConfig())}
    if args.print_config:
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return EXIT_OK
    _echo(resolved, args.seed)
    try:
        image = SignImage(normalize(read_pnm(args.input)), 0, CLEAN, str(args.input))
    except (OSError, PPMError) as exc:
        raise DatasetError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    rng = np.random.default_rng(args.seed)
    p = 1.0 if args.p is None else args.p
    applied = rng.random() < p
    outputs = []
    base = AugmentConfig()
    if args.op == "compose":
        steps: list = []
        result = compose_augment(image, base if args.p is None else _scaled(base, args.p), seed=args.seed, steps=steps)
        for name, im in steps:
            outputs.append((out / f"{stem}_compose_{name}_s{args.seed}.ppm", im))
        outputs.append((out / f"{stem}_compose_s{args.seed}.ppm", result))
    else:
        result = image
        if applied:
            if args.op == "erase":
                result = random_erase(image, replace(base, erase_p=1.0), seed=rng)
            elif args.op == "blur":
                length = int(rng.integers(base.blur_length[0], base.blur_length[1] + 1))
                result = motion_blur(image, length, rng.uniform(*base.blur_angle))
            elif args.op == "rotate":
                result = rotate(image, rng.uniform(*base.rotate_range))
            else:
                result = perspective_jitter(image, base.perspective_jitter, seed=rng)
        outputs.append((out / f"{stem}_{args.op}_s{args.seed}.ppm", result))
    for path, im in outputs:
        write_ppm(path, im.pixels)
        print(f"wrote {path}")
    return EXIT_OK


def _scaled(config: AugmentConfig, p: float) -> AugmentConfig:
    return replace(config, erase_p=p, blur_p=p, rotate_p=p, scale_p=p, perspective_p=p)


def cmd_heatmap(args) -> int:
    resolved = {"ckpt": args.ckpt, "data": args.data, "out": args.out}
    if args.print_config:
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return EXIT_OK
    ckpt, model = _load(args)
    seed = int(ckpt.rng["seed"])
    _echo(resolved, seed)
    split, templates = _data_for(args, model, seed)
    hm = heatmap(model.encoder, encode_templates(model.encoder, templates), split.test, model.num_classes)
    csv_path, pgm_path = hm.write(args.out)
    rows = hm.present_rows()
    diag = hm.mean[rows, rows]
    off = hm.mean[rows][~np.eye(hm.num_classes, dtype=bool)[rows]]
    print(f"wrote {csv_path}\nwrote {pgm_path}")
    print(f"diagonal_argmin_fraction={hm.diagonal_fraction():.6f}")
    print(f"intra_inter_ratio={hm.intra_inter_ratio():.6f}")
    print(f"mean_same_distance={np.nanmean(diag):.6f} (reference 1.5, not enforced)")
    print(f"mean_diff_distance={np.nanmean(off):.6f} (reference 2.5, not enforced)")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    if args.grid < 1:
        raise UsageError("--grid must be >= 1")
    if args.print_config:
        print(json.dumps({"grid": args.grid, "seed": args.seed}, indent=2))
        return EXIT_OK
    _echo({"grid": args.grid}, args.seed)
    start = time.perf_counter()
    outcomes = selfcheck.run_all(args.grid, args.seed)
    sys.stdout.write(selfcheck.report(outcomes))
    print(f"elapsed {time.perf_counter() - start:.1f}s")
    return EXIT_NUMERIC if selfcheck.failures(outcomes) else EXIT_OK


def build_parser() -> Parser:
    d = TrainConfig()
    parser = Parser(prog="ieces", description="Template-anchored siamese traffic-sign recognition.")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    def common(p):
        p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
        return p

    def templates(p):
        p.add_argument("--templates", default=None,
                       help="GTSRB only: folder of <class_id>.ppm pictograms replacing the largest-image templates")
        return p

    t = templates(common(sub.add_parser("train", help="train encoder + classifier")))
    t.add_argument("--data", required=True, help="dataset path or synthetic:C,n")
    t.add_argument("--out", required=True)
    t.add_argument("--lr", type=float, default=d.lr)
    t.add_argument("--wd", type=float, default=d.weight_decay)
    t.add_argument("--batch", type=int, default=d.batch_size, help="batch size (512 for the full-scale setting)")
    t.add_argument("--alpha", type=float, default=d.siamese.alpha)
    t.add_argument("--margin", type=float, default=d.siamese.margin)
    t.add_argument("--negatives", type=int, default=d.siamese.negatives)
    t.add_argument("--mode", choices=("template", "ema"), default=d.siamese.mode)
    t.add_argument("--refresh", choices=("step", "epoch"), default=d.siamese.refresh)
    t.add_argument("--epochs", type=int, default=d.epochs)
    t.add_argument("--patience", type=int, default=d.patience)
    t.add_argument("--ckpt-interval", type=int, default=d.ckpt_interval)
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=d.seed)
    t.add_argument("--f64", action="store_true", help="train in 64-bit floating point")
    t.add_argument("--resume", default=None, help="continue from this checkpoint")
    t.set_defaults(func=cmd_train)

    e = templates(common(sub.add_parser("eval", help="metrics on clean / blurred / occluded test images")))
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--conditions", default=",".join(CONDITIONS))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.add_argument("--groups", default=None, help="file of 'class_id group' lines for group-level reports")
    e.set_defaults(func=cmd_eval)

    i = common(sub.add_parser("infer", help="classify PPM images"))
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", action="append", required=True)
    i.set_defaults(func=cmd_infer)

    a = common(sub.add_parser("augment", help="write augmented previews of one image"))
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--op", default="compose")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--p", type=float, default=None, help="application probability (default 1 for single ops)")
    a.set_defaults(func=cmd_augment)

    h = templates(common(sub.add_parser("heatmap", help="test-code to template-code distance matrix")))
    h.add_argument("--ckpt", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_heatmap)

    s = common(sub.add_parser("selfcheck", help="gradient, loss and theory oracles"))
    s.add_argument("--grid", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ieces {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, PPMError, FileNotFoundError) as exc:
        print(f"ieces {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"ieces {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
