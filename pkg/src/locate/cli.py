"""Command-line entry point: generate, preprocess, train, predict, nms, eval, report."""

from __future__ import annotations

import os
import sys

# BLAS thread pools must be capped before numpy is first imported.
_THREADS = os.environ.get("LOCATE_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ[_var] = _THREADS

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
from html import escape  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .data import DataError, SyntheticConfig, class_span_counts, generate_synthetic, load_dataset, preprocess, save_dataset  # noqa: E402
from .evaluation import (  # noqa: E402
    DEFAULT_THRESHOLDS,
    EvalReport,
    confusion_matrix,
    ground_truth_of,
    map_sweep,
    read_detections,
    temporal_nms,
    write_detections,
)
from .model import ModelConfig  # noqa: E402
from .trainer import CheckpointError, TrainConfig, TrainingDiverged, fit, load_checkpoint, predict, save_checkpoint  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


def _print_config(name: str, cfg: dict) -> None:
    print(f"{name} config: {json.dumps(cfg, sort_keys=True)}", flush=True)


def _thresholds(text: str) -> list[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None
    if not values or any(not 0 < v <= 1 for v in values):
        raise argparse.ArgumentTypeError("thresholds must be in (0, 1]")
    return values


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {path} does not exist")
    return p


# ---------------------------------------------------------------- subcommands


def cmd_generate(args) -> int:
    cfg = SyntheticConfig(
        num_sequences=args.sequences,
        num_classes=args.classes,
        duration_range=(args.duration_min, args.duration_max),
        noise_std=args.noise,
        seed=args.seed,
    )
    _print_config("generate", {**cfg.__dict__, "out": args.out})
    dataset = generate_synthetic(cfg)
    save_dataset(dataset, args.out)
    for name, n in zip(dataset.class_names, class_span_counts(dataset.sequences, dataset.num_classes)):
        print(f"{name}: {n} spans")
    return EXIT_OK


def _model_config(args, num_classes: int) -> ModelConfig:
    L_e = args.layers_enc if args.layers_enc is not None else args.layers
    L_d = args.layers_dec if args.layers_dec is not None else args.layers
    return ModelConfig(
        T=args.seq_len, N_f=args.snippet, C=args.dim, L_e=L_e, L_d=L_d, H=args.heads, K=args.samples_k,
        N_a=args.queries, C_cls=num_classes, seed=args.seed,
    )


def cmd_preprocess(args) -> int:
    path = _require_file(args.train, "--train")
    _print_config("preprocess", {"train": str(path), "seq_len": args.seq_len, "snippet": args.snippet, "out": args.out})
    dataset = load_dataset(path, min_frames=args.snippet)
    data = np.stack([preprocess(s, args.snippet, args.seq_len).data for s in dataset.sequences])
    with open(args.out, "wb") as fh:
        np.save(fh, data)
    print(f"wrote {data.shape[0]} x {data.shape[1]} x {data.shape[2]} snippet tensor")
    return EXIT_OK


def cmd_train(args) -> int:
    train_path = _require_file(args.train, "--train")
    val_path = _require_file(args.val, "--val") if args.val is not None else None
    train = load_dataset(train_path, min_frames=args.snippet)
    val = load_dataset(val_path, min_frames=args.snippet) if val_path else None
    if val is not None and val.class_names != train.class_names:
        raise UsageError("train and val datasets have different class lists")
    model_cfg = _model_config(args, train.num_classes)
    train_cfg = TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed,
        grad_clip_norm=None if args.clip <= 0 else args.clip, lambda_iou=args.lambda_iou, lambda_l1=args.lambda_l1,
        cb_beta=args.cb_beta, cb_gamma=args.cb_gamma, score_threshold=args.score_threshold, nms_iou=args.nms_iou,
        eval_every=args.eval_every,
    )
    out = Path(args.out)
    _print_config("train", {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                            "train_file": str(train_path), "val_file": None if val_path is None else str(val_path),
                            "out": str(out), "threads": _THREADS})
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"

    def progress(row):
        print(f"epoch {row.epoch}: loss {row.l_total:.5f} (cb {row.l_cb:.5f}, span {row.l_span:.5f}) val mAP@0.5 {row.val_map50:.4f}",
              flush=True)

    try:
        result = fit(train.sequences, val.sequences if val else None, model_cfg, train_cfg,
                     class_names=train.class_names, data_seed=args.seed, progress=progress)
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        if err.checkpoint is not None:
            save_checkpoint(err.checkpoint, out / "last_good.ckpt")
            print(f"last good checkpoint written to {out / 'last_good.ckpt'}", file=sys.stderr)
        return EXIT_DIVERGED
    log_path.write_text(result.log_csv())
    save_checkpoint(result.best, out / "best.ckpt")
    save_checkpoint(result.final, out / "last.ckpt")
    print(f"best checkpoint from epoch {result.best.epoch} written to {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt_path = _require_file(args.ckpt, "--ckpt")
    data_path = _require_file(args.data, "--data")
    ckpt = load_checkpoint(ckpt_path)
    cfg = ckpt.model_config
    dataset = load_dataset(data_path, min_frames=cfg.N_f)
    if dataset.num_classes != cfg.C_cls:
        raise UsageError(f"dataset has {dataset.num_classes} classes, checkpoint expects {cfg.C_cls}")
    _print_config("predict", {"ckpt": str(ckpt_path), "data": str(data_path), "model": cfg.to_dict(),
                              "score_threshold": args.score_threshold, "nms_iou": args.nms_iou, "out": args.out})
    dets = predict(ckpt.model_params(), cfg, dataset.sequences, args.score_threshold, args.nms_iou)
    write_detections(dets, args.out)
    print(f"wrote {len(dets)} detections")
    return EXIT_OK


def cmd_nms(args) -> int:
    path = _require_file(args.detections, "--detections")
    _print_config("nms", {"detections": str(path), "nms_iou": args.nms_iou, "out": args.out})
    dets = read_detections(path)
    kept = temporal_nms(dets, args.nms_iou)
    write_detections(kept, args.out)
    print(f"kept {len(kept)} of {len(dets)} detections")
    return EXIT_OK


def cmd_eval(args) -> int:
    det_path = _require_file(args.detections, "--detections")
    data_path = _require_file(args.data, "--data")
    _print_config("eval", {"detections": str(det_path), "data": str(data_path), "thresholds": args.thresholds, "out": args.out})
    dataset = load_dataset(data_path)
    dets = read_detections(det_path)
    gts = ground_truth_of(dataset.sequences)
    report = map_sweep(dets, gts, dataset.num_classes, args.thresholds, class_names=dataset.class_names)
    report.confusion = confusion_matrix(dets, gts, dataset.num_classes, 0.5)
    out = Path(args.out)
    out.write_text(json.dumps(report.to_json(), sort_keys=True, indent=1) + "\n")
    out.with_suffix(".csv").write_text(report.to_csv())
    for t, m in zip(report.thresholds, report.map_per_threshold):
        print(f"mAP@{t:g}: {m:.4f}")
    print(f"average mAP: {report.avg_map:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = _require_file(args.report, "--report")
    _print_config("report", {"report": str(path), "out": args.out})
    try:
        report = EvalReport.from_json(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
        raise DataError(f"{path}: not an eval report ({err})") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ap_vs_tiou.svg").write_text(ap_curve_svg(report))
    written = ["ap_vs_tiou.svg"]
    if report.confusion is not None:
        (out / "confusion.svg").write_text(confusion_svg(report))
        written.append("confusion.svg")
    print("wrote " + ", ".join(str(out / w) for w in written))
    return EXIT_OK


# ---------------------------------------------------------------- SVG rendering

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _class_name(report: EvalReport, c: int) -> str:
    return report.class_names[c] if c < len(report.class_names) else f"class {c}"


def ap_curve_svg(report: EvalReport, width: int = 480, height: int = 320) -> str:
    """One AP-vs-tIoU polyline per class on shared axes."""
    left, right, top, bottom = 50, 130, 20, 40
    pw, ph = width - left - right, height - top - bottom
    ts = report.thresholds
    t0, t1 = (min(ts), max(ts)) if ts else (0.0, 1.0)
    span = (t1 - t0) or 1.0

    def xy(t, ap):
        return left + pw * (t - t0) / span, top + ph * (1.0 - ap)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<line class="axis" x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">tIoU threshold</text>',
        f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {top + ph / 2:.1f})">AP</text>',
    ]
    for t in ts:
        x, _ = xy(t, 0.0)
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 14}" text-anchor="middle" font-size="9">{t:g}</text>')
    for v in (0.0, 0.5, 1.0):
        _, y = xy(t0, v)
        parts.append(f'<text x="{left - 6}" y="{y + 3:.1f}" text-anchor="end" font-size="9">{v:g}</text>')
    for c in range(report.ap.shape[0]):
        color = _PALETTE[c % len(_PALETTE)]
        points = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(t, a) for t, a in zip(ts, report.ap[c])))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
        ly = top + 12 + 14 * c
        parts.append(f'<text x="{left + pw + 8}" y="{ly}" font-size="10" fill="{color}">{escape(_class_name(report, c))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def confusion_svg(report: EvalReport, cell: int = 28) -> str:
    """Heat grid of the column-normalized confusion matrix (rows: ground truth, columns: prediction)."""
    conf = report.confusion
    norm = conf.column_normalized()
    rows, cols = norm.shape
    n = report.ap.shape[0]
    row_labels = [_class_name(report, c) for c in range(n)] + ["unmatched"]
    col_labels = [_class_name(report, c) for c in range(n)] + ["missed"]
    left, top = 90, 90
    width, height = left + cols * cell + 10, top + rows * cell + 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">']
    for j, label in enumerate(col_labels[:cols]):
        x = left + j * cell + cell / 2
        parts.append(f'<text x="{x:.1f}" y="{top - 6}" font-size="9" transform="rotate(-60 {x:.1f} {top - 6})">{escape(label)}</text>')
    for i, label in enumerate(row_labels[:rows]):
        parts.append(f'<text x="{left - 4}" y="{top + i * cell + cell / 2 + 3:.1f}" font-size="9" text-anchor="end">{escape(label)}</text>')
        for j in range(cols):
            shade = int(round(255 * (1.0 - float(norm[i, j]))))
            parts.append(
                f'<rect class="cell" x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                f'fill="rgb({shade},{shade},255)" stroke="#ccc"><title>{int(conf.counts[i, j])}</title></rect>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="locate", description="Temporal action localization on 3D skeleton motion.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic labeled motion dataset")
    g.add_argument("--classes", type=int, default=5, help="number of action classes")
    g.add_argument("--sequences", type=int, default=20, help="number of sequences")
    g.add_argument("--duration-min", type=float, default=8.0, help="shortest sequence in seconds")
    g.add_argument("--duration-max", type=float, default=14.0, help="longest sequence in seconds")
    g.add_argument("--noise", type=float, default=0.005, help="joint noise standard deviation")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("-o", "--out", required=True, help="output dataset JSON")
    g.set_defaults(func=cmd_generate)

    def model_flags(p):
        p.add_argument("--seq-len", type=int, default=100, help="snippets per sequence (T)")
        p.add_argument("--snippet", type=int, default=8, help="frames per snippet (N_f)")

    pp = sub.add_parser("preprocess", help="normalize and snippetize a dataset into a .npy tensor")
    pp.add_argument("--train", required=True, help="dataset JSON")
    model_flags(pp)
    pp.add_argument("-o", "--out", required=True, help="output .npy file")
    pp.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="train a model and write best.ckpt and train_log.csv")
    t.add_argument("--train", required=True, help="training dataset JSON")
    t.add_argument("--val", help="validation dataset JSON (training set is scored when omitted)")
    model_flags(t)
    t.add_argument("--dim", type=int, default=256, help="model width C")
    t.add_argument("--layers", type=int, default=4, help="encoder and decoder depth")
    t.add_argument("--layers-enc", type=int, help="encoder depth (overrides --layers)")
    t.add_argument("--layers-dec", type=int, help="decoder depth (overrides --layers)")
    t.add_argument("--heads", type=int, default=4, help="attention heads")
    t.add_argument("--samples-k", type=int, default=4, help="sampling points per head")
    t.add_argument("--queries", type=int, default=30, help="action queries N_a")
    t.add_argument("--lr", type=float, default=4e-3, help="Adam learning rate")
    t.add_argument("--epochs", type=int, default=100, help="training epochs")
    t.add_argument("--batch", type=int, default=4, help="sequences per batch")
    t.add_argument("--clip", type=float, default=0.1, help="global gradient norm cap (<= 0 disables)")
    t.add_argument("--lambda-iou", type=float, default=2.0, help="gIoU span loss weight")
    t.add_argument("--lambda-l1", type=float, default=5.0, help="L1 span loss weight")
    t.add_argument("--cb-beta", type=float, default=0.99, help="class-balance beta")
    t.add_argument("--cb-gamma", type=float, default=2.0, help="focal gamma")
    t.add_argument("--score-threshold", type=float, default=0.0, help="validation detection score floor")
    t.add_argument("--nms-iou", type=float, default=0.5, help="validation NMS tIoU")
    t.add_argument("--eval-every", type=int, default=1, help="score mAP@0.5 every N epochs (0: final epoch only)")
    t.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed")
    t.add_argument("-o", "--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write detections for a dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset JSON")
    p.add_argument("--score-threshold", type=float, default=0.0, help="drop detections scoring below this")
    p.add_argument("--nms-iou", type=float, help="apply per-class NMS at this tIoU")
    p.add_argument("-o", "--out", required=True, help="output detections file")
    p.set_defaults(func=cmd_predict)

    n = sub.add_parser("nms", help="per-class temporal non-maximum suppression")
    n.add_argument("--detections", required=True, help="input detections file")
    n.add_argument("--nms-iou", type=float, default=0.5, help="suppression tIoU")
    n.add_argument("-o", "--out", required=True, help="output detections file")
    n.set_defaults(func=cmd_nms)

    e = sub.add_parser("eval", help="mAP over tIoU thresholds plus a confusion matrix")
    e.add_argument("--detections", required=True, help="detections file")
    e.add_argument("--data", required=True, help="dataset JSON with ground truth")
    e.add_argument("--thresholds", type=_thresholds, default=list(DEFAULT_THRESHOLDS), help="comma-separated tIoU list")
    e.add_argument("-o", "--out", required=True, help="report JSON (a .csv is written alongside)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render SVG plots from an eval report")
    r.add_argument("--report", required=True, help="eval report JSON")
    r.add_argument("-o", "--out", required=True, help="output directory")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, DataError, CheckpointError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
