"""Command-line front end.

Verbs: summary, gradcheck, train, infer, analyze-coverage. Global flags
(--seed, --config, --preset, --out) are accepted before or after the verb.
Exit codes: 0 ok, 1 check failed, 2 usage or input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, pnm
from .config import ConfigError, RunConfig, format_run_config, load_run_config
from .gradcheck import check_parameters, parameter_group
from .network import build, get_preset, known_presets
from .tensor import ShapeError, Tensor
from .train import (
    DivergenceError,
    Sample,
    TrainConfig,
    cross_entropy_loss,
    history_csv,
    predict,
    synth_dataset,
    train_loop,
)
from .weights import WeightFileError, load_into, save_weights

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_MAX = (32, 48)
DEFAULT_PRESET = {"summary": "final", "gradcheck": "gradcheck", "train": "tiny", "infer": "tiny"}


class UsageError(Exception):
    pass


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="seed for every random choice (default 0)")
    p.add_argument("--config", type=Path, default=d(None), help="key=value run configuration file")
    p.add_argument("--preset", default=d(None), help="network preset (see `summary --preset list`)")
    p.add_argument("--out", type=Path, default=d(None), help="output path (meaning depends on the verb)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mscfnet", description=__doc__.splitlines()[0])
    _globals(ap, suppress=False)
    sub = ap.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("summary", help="parameter/MAC census, receptive fields, coverage")
    _globals(s, suppress=True)
    s.add_argument("--size", type=parse_size, default=(360, 480), help="input HxW (default 360x480)")
    s.add_argument("--classes", type=int, default=None)
    s.set_defaults(func=cmd_summary)

    g = sub.add_parser("gradcheck", help="end-to-end finite-difference gradient check")
    _globals(g, suppress=True)
    g.add_argument("--size", type=parse_size, default=(16, 24), help="input HxW, at most 32x48")
    g.add_argument("--batch", type=int, default=2)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--coords", type=int, default=3, help="coordinates probed per parameter tensor")
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="train and save best-mIoU weights plus the metric history")
    _globals(t, suppress=True)
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--synth", action="store_true", help="use the synthetic shapes dataset")
    src.add_argument("--data", type=Path, help="directory with train/ and val/ splits of images/*.ppm, labels/*.pgm")
    t.add_argument("--classes", type=int, default=3)
    t.add_argument("--size", type=parse_size, default=(64, 96), help="synthetic image HxW")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
    t.add_argument("--train-count", type=int, default=128)
    t.add_argument("--val-count", type=int, default=32)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment a P6 image")
    _globals(i, suppress=True)
    i.add_argument("--weights", type=Path, required=True)
    i.add_argument("--input", type=Path, required=True)
    i.add_argument("--classes", type=int, default=None)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("analyze-coverage", help="footprint of a dilation schedule")
    _globals(c, suppress=True)
    c.add_argument("rates", nargs="*", type=int, help="dilation rates (default: the preset's schedules)")
    c.add_argument("--kernel", type=int, default=3)
    c.add_argument("--expect", choices=("full", "gapped"), default=None, help="exit 1 unless every verdict matches")
    c.set_defaults(func=cmd_coverage)
    return ap


def resolve_run_config(args, verb: str) -> RunConfig:
    preset = args.preset or DEFAULT_PRESET.get(verb, "final")
    try:
        if args.config is not None:
            rc = load_run_config(args.config, default_preset=preset)
        else:
            rc = RunConfig(get_preset(preset), TrainConfig(), preset)
    except KeyError as e:
        raise UsageError(e.args[0]) from None
    except (ConfigError, OSError) as e:
        raise UsageError(str(e)) from None
    classes = getattr(args, "classes", None)
    if classes is not None:
        try:
            rc = replace(rc, network=replace(rc.network, num_classes=classes))
        except ValueError as e:
            raise UsageError(str(e)) from None
    return rc


# ---------------------------------------------------------------------------
# verbs


def cmd_summary(args) -> int:
    if args.preset == "list":
        print("\n".join(known_presets()))
        return EXIT_OK
    rc = resolve_run_config(args, "summary")
    net = build(rc.network, args.seed)
    try:
        report = analysis.analyze(net, (1, 3) + tuple(args.size))
    except ShapeError as e:
        raise UsageError(str(e)) from None
    sys.stdout.write(report.to_text())
    if args.out is not None:
        _check_parent(args.out)
        args.out.write_text(report.to_csv())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    h, w = args.size
    if h > GRADCHECK_MAX[0] or w > GRADCHECK_MAX[1]:
        raise UsageError(f"gradcheck input {h}x{w} exceeds {GRADCHECK_MAX[0]}x{GRADCHECK_MAX[1]}")
    rc = resolve_run_config(args, "gradcheck")
    net = build(rc.network, args.seed)
    net.train()
    rng = np.random.default_rng(args.seed)
    x = Tensor(rng.random((args.batch, 3, h, w)))
    y = rng.integers(0, rc.network.num_classes, size=(args.batch, h, w))
    try:
        net(x)
    except ShapeError as e:
        raise UsageError(str(e)) from None
    params = [(n, p) for n, p in net.named_parameters() if p.trainable]
    reports = check_parameters(
        lambda: cross_entropy_loss(net(x), y), params, args.step, args.tolerance, args.coords, args.seed
    )
    groups: dict[str, list[str]] = {}
    for name in reports:
        groups.setdefault(parameter_group(name), []).append(name)
    failed_names = []
    for group, names in groups.items():
        worst = max(names, key=lambda n: reports[n].max_rel_error)
        bad = [n for n in names if not reports[n].passed]
        failed_names += bad
        print(f"{'PASS' if not bad else 'FAIL'}  {group:<14} worst rel error {reports[worst].max_rel_error:.3e} ({worst})")
    overall = max(r.max_rel_error for r in reports.values())
    print(f"checked {sum(r.n_checked for r in reports.values())} coordinates in {len(reports)} tensors; "
          f"worst rel error {overall:.3e}; tolerance {args.tolerance:g}")
    if failed_names:
        print("failing parameters: " + ", ".join(failed_names))
        return EXIT_CHECK
    return EXIT_OK


def _check_parent(path: Path) -> None:
    if not path.parent.is_dir():
        raise UsageError(f"output directory {path.parent} does not exist")


def _load_split(root: Path, num_classes: int) -> list[Sample]:
    img_dir, lab_dir = root / "images", root / "labels"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        raise UsageError(f"{root} needs images/ and labels/ subdirectories")
    out = []
    for img_path in sorted(img_dir.glob("*.ppm")):
        lab_path = lab_dir / (img_path.stem + ".pgm")
        if not lab_path.exists():
            raise UsageError(f"missing label map {lab_path}")
        try:
            rgb, labels = pnm.read_pnm(img_path), pnm.read_pnm(lab_path)
            if rgb.ndim != 3 or labels.ndim != 2:
                raise UsageError(f"{img_path.name}: expected a P6 image and a P5 label map")
            bad = (labels >= num_classes) & (labels != 255)
            if bad.any():
                raise UsageError(f"{lab_path}: label values must be < {num_classes} or 255")
            out.append(Sample(pnm.image_to_tensor_data(rgb), labels))
        except (pnm.PnmError, ValueError) as e:
            raise UsageError(f"{img_path.stem}: {e}") from None
    if not out:
        raise UsageError(f"no samples in {img_dir}")
    return out


def cmd_train(args) -> int:
    if args.out is None:
        raise UsageError("train needs --out DIR")
    if not args.out.is_dir():
        raise UsageError(f"output directory {args.out} does not exist")
    rc = resolve_run_config(args, "train")
    over = {k: v for k, v in (("epochs", args.epochs), ("batch_size", args.batch_size),
                              ("lr_base", args.lr), ("optimizer", args.optimizer)) if v is not None}
    tcfg = replace(rc.train, seed=args.seed, **over)
    rc = replace(rc, train=tcfg)
    k = rc.network.num_classes
    if args.synth:
        h, w = args.size
        try:
            train_set = synth_dataset(args.seed, args.train_count, h, w, k)
            val_set = synth_dataset(args.seed + 1, args.val_count, h, w, k)
        except ValueError as e:
            raise UsageError(str(e)) from None
    else:
        train_set = _load_split(args.data / "train", k)
        val_set = _load_split(args.data / "val", k)
    net = build(rc.network, args.seed)
    try:
        result = train_loop(net, train_set, val_set, tcfg)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        raise UsageError(str(e)) from None
    save_weights(result.best_state, args.out / "weights.mscf")
    (args.out / "history.csv").write_text(history_csv(result.history))
    (args.out / "run.cfg").write_text(format_run_config(rc))
    last = result.history[-1]
    print(f"epochs {len(result.history)}  final loss {last.loss:.4f}  final mIoU {last.miou:.4f}  "
          f"best mIoU {result.best_miou:.4f}")
    print(f"wrote {args.out / 'weights.mscf'}, {args.out / 'history.csv'}, {args.out / 'run.cfg'}")
    return EXIT_OK


def label_path_for(out: Path) -> Path:
    return out.with_suffix(".pgm") if out.suffix.lower() == ".ppm" else out.with_name(out.name + ".labels.pgm")


def cmd_infer(args) -> int:
    if args.out is None:
        raise UsageError("infer needs --out PATH for the color rendering")
    _check_parent(args.out)
    rc = resolve_run_config(args, "infer")
    try:
        rgb = pnm.read_pnm(args.input)
    except pnm.PnmError as e:
        raise UsageError(f"{args.input}: malformed pixmap: {e}") from None
    except OSError as e:
        raise UsageError(str(e)) from None
    if rgb.ndim != 3:
        raise UsageError(f"{args.input}: expected a P6 color image")
    net = build(rc.network, args.seed)
    try:
        load_into(net, args.weights)
    except WeightFileError as e:
        raise UsageError(f"{args.weights}: [{e.code}] {e}") from None
    except OSError as e:
        raise UsageError(str(e)) from None
    try:
        labels = predict(net, pnm.image_to_tensor_data(rgb)[None])[0]
    except ShapeError as e:
        raise UsageError(str(e)) from None
    pnm.write_pnm(args.out, pnm.colorize(labels, rc.network.num_classes))
    pnm.write_pnm(label_path_for(args.out), labels)
    print(f"wrote {args.out} and {label_path_for(args.out)}")
    return EXIT_OK


def cmd_coverage(args) -> int:
    if args.rates:
        schedules = {"rates": tuple(args.rates)}
    else:
        cfg = resolve_run_config(args, "analyze-coverage").network
        schedules = {"schedule 1": cfg.dilation_schedule_1, "schedule 2": cfg.dilation_schedule_2}
    if args.kernel < 1 or args.kernel % 2 == 0:
        raise UsageError("kernel must be a positive odd size")
    if any(r < 1 for s in schedules.values() for r in s):
        raise UsageError("dilation rates must be >= 1")
    ok = True
    for name, sched in schedules.items():
        cov = analysis.dilation_coverage(sched, args.kernel)
        print(f"{name} {list(sched)}: receptive field {cov.receptive_field}, reachable {cov.reachable}, "
              f"density {cov.density:.4f}, largest gap {cov.largest_gap}, coverage: {cov.verdict}")
        ok &= args.expect is None or cov.verdict == args.expect
    return EXIT_OK if ok else EXIT_CHECK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
