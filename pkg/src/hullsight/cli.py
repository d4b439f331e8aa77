"""Command-line entry point: ``hullsight <subcommand> ...``.

Exit status: 0 on success, 1 on usage errors, 2 on data errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

from . import boxes, detection, model, noise, quality
from .image import ImageFormatError, load_image, save_image
from .io import (AnnotationError, load_annotation_dir, load_run_config, parse_annotations, parse_size)
from .ops import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

DATA_ERRORS = (ImageFormatError, AnnotationError, model.CheckpointFormatError, model.ConfigError,
               model.TrainingError, boxes.InsufficientDataError, ShapeError, FileNotFoundError,
               IsADirectoryError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj, out: Optional[str]) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


# ---------------------------------------------------------------------------


def cmd_noise(a) -> int:
    img = load_image(a.input)
    if a.kind == "sp":
        out = noise.apply_sp_noise(img, a.ps, a.pp, a.seed, workers=a.workers)
    else:
        out = noise.apply_shot_noise(img, a.p, a.seed, workers=a.workers)
    save_image(out, a.output)
    return EXIT_OK


def cmd_metrics(a) -> int:
    ref, test = load_image(a.ref), load_image(a.test)
    _emit(quality.metric_report(ref, test).to_dict(), a.out)
    return EXIT_OK


def _write_log(logs, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(model.EpochLog.FIELDS)
        for e in logs:
            w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in e.row()])


def cmd_train(a) -> int:
    rc = load_run_config(a.config)
    tc = rc.train
    if a.noise:
        tc.noise = a.noise
    ckpt, logs = model.train(a.data, tc, rc.model)
    model.save(ckpt, a.out)
    log_path = Path(a.log) if a.log else Path(a.out).with_suffix(".csv")
    _write_log(logs, log_path)
    if not a.no_figures:
        from .plotting import plot_training_log
        plot_training_log(logs, log_path.with_suffix(".png"))
    last = logs[-1]

    def finite(v):
        return v if math.isfinite(v) else None

    _emit({"epochs": last.epoch, "final_loss": last.loss, "log": str(log_path),
           "val_denoise_psnr": finite(last.val_denoise_psnr),
           "val_noisy_psnr": finite(last.val_noisy_psnr)}, None)
    return EXIT_OK


def cmd_enhance(a) -> int:
    ckpt = model.load(a.ckpt)
    den, sr = model.infer(ckpt, load_image(a.input))
    save_image(den, a.out_denoised)
    save_image(sr, a.out_sr)
    return EXIT_OK


def cmd_eval_det(a) -> int:
    size = parse_size(a.img_size)
    gts = load_annotation_dir(a.gt, size)
    dets = load_annotation_dir(a.pred, size)
    if any(isinstance(g, detection.Detection) for g in gts):
        raise AnnotationError(a.gt, 0, "ground-truth directory contains prediction records")
    if any(not isinstance(d, detection.Detection) for d in dets):
        raise AnnotationError(a.pred, 0, "prediction records need a confidence field")
    classes = [int(c) for c in a.classes.split(",")] if a.classes else None
    report = detection.evaluate(dets, gts, classes=classes, conf_threshold=a.conf)
    _emit(report.to_dict(), a.out)
    if a.figure:
        from .plotting import plot_pr_curves
        plot_pr_curves(dets, gts, sorted(report.per_class), a.figure)
    return EXIT_OK


def _records(a):
    return parse_annotations(a.pred, parse_size(a.img_size))


def _overlay(a, recs, flagged, labels):
    if a.overlay:
        if not a.image:
            raise UsageError("--overlay requires --image")
        from .plotting import draw_overlay
        draw_overlay(load_image(a.image), recs, a.overlay, flagged, labels)


def _record_dict(i, r):
    d = {"index": i, "class_id": r.class_id,
         "box": [r.box.x_min, r.box.y_min, r.box.x_max, r.box.y_max]}
    if isinstance(r, detection.Detection):
        d["confidence"] = r.confidence
    return d


def cmd_measure(a) -> int:
    recs = _records(a)
    scale = boxes.CalibrationScale(a.mm_per_px) if a.mm_per_px is not None else None
    diags = [boxes.diagonal(r.box) for r in recs]
    flagged = set(boxes.flag_anomalies(diags, a.k).flagged) if len(diags) >= 4 else None
    rows = []
    for i, (r, d) in enumerate(zip(recs, diags)):
        row = _record_dict(i, r)
        row["diagonal_px"] = d
        row["length_mm"] = boxes.to_millimeters(d, scale) if scale else None
        row["anomaly"] = (i in flagged) if flagged is not None else None
        rows.append(row)
    _emit({"mm_per_px": a.mm_per_px, "records": rows}, a.out)
    labels = {i: (f"{row['length_mm']:.1f} mm" if scale else f"{row['diagonal_px']:.1f} px")
              for i, row in enumerate(rows)}
    _overlay(a, recs, flagged or (), labels)
    return EXIT_OK


def cmd_anomaly(a) -> int:
    recs = _records(a)
    diags = [boxes.diagonal(r.box) for r in recs]
    res = boxes.flag_anomalies(diags, a.k)
    out = res.to_dict()
    out["diagonals"] = diags
    out["count"] = len(diags)
    _emit(out, a.out)
    if a.figure:
        from .plotting import plot_diagonal_distribution
        plot_diagonal_distribution(diags, res, a.figure)
    _overlay(a, recs, res.flagged, None)
    return EXIT_OK


def cmd_synth(a) -> int:
    from .synthetic import write_dataset
    paths = write_dataset(a.out, a.count, a.size, a.seed, a.channels)
    _emit({"count": len(paths), "dir": str(a.out)}, None)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hullsight", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("noise", help="corrupt an image with simulated radiation noise")
    s.add_argument("--kind", choices=("sp", "shot"), required=True)
    s.add_argument("--ps", type=float, default=0.0, help="salt probability")
    s.add_argument("--pp", type=float, default=0.0, help="pepper probability")
    s.add_argument("--p", type=float, default=0.0, help="shot-noise probability")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_noise)

    s = sub.add_parser("metrics", help="PSNR and SSIM of a test image against a reference")
    s.add_argument("--ref", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("train", help="train the denoising/super-resolution network")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--noise", choices=("sp", "shot"))
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="per-epoch CSV (default: next to --out)")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", help="denoise and super-resolve an image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out-denoised", required=True)
    s.add_argument("--out-sr", required=True)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("eval-det", help="mAP report for predictions against ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--img-size", required=True)
    s.add_argument("--classes", help="comma-separated known class ids")
    s.add_argument("--conf", type=float, default=0.5)
    s.add_argument("--out")
    s.add_argument("--figure", help="write precision-recall curves to this PNG")
    s.set_defaults(func=cmd_eval_det)

    for name, func, hlp in (("measure", cmd_measure, "bounding-box diagonal lengths"),
                            ("anomaly", cmd_anomaly, "flag unusually long objects (IQR rule)")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--pred", required=True)
        s.add_argument("--img-size", required=True)
        s.add_argument("--k", type=float, default=1.5)
        s.add_argument("--out")
        s.add_argument("--image", help="image the annotations refer to (for --overlay)")
        s.add_argument("--overlay", help="write boxes drawn over --image to this PNG")
        if name == "measure":
            s.add_argument("--mm-per-px", type=float)
        else:
            s.add_argument("--figure", help="write the diagonal distribution plot to this PNG")
        s.set_defaults(func=func)

    s = sub.add_parser("synth", help="write procedural clean scenes for training")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=80)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--channels", type=int, choices=(1, 3), default=1)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def cli_dispatch(argv: List[str]) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
