"""Command line interface.

Subcommands cover the full pipeline: ``gen-data`` writes a synthetic
shapes dataset, ``train`` fits the network (and, in cosine mode, the
label embedding), ``eval`` scores a checkpoint on classification, point
localization, or box localization, ``export-cam`` dumps activation maps
and localization read-outs for one image, and ``inspect-embedding``
prints co-occurrence and spectrum diagnostics.

Exit codes: 0 on success, 1 on data or validation errors, 2 on usage
errors (argparse's default).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import dataset as ds
from .detection import (
    cam_probabilities,
    default_point_tolerance,
    format_box_record,
    format_point_record,
    predict_box,
    predict_point,
)
from .embedding import backproject, fit_from_labels, project, save_embedding
from .metrics import (
    classification_map,
    corloc,
    format_table,
    metric_lines,
    pointloc_map,
)
from .netpbm import write_pgm
from .network import (
    AugmentationConfig,
    NetworkConfig,
    TrainingConfig,
    build_network,
    config_digest,
    forward_cam,
    load_checkpoint,
    reference_training_preset,
    pyramid_label,
    save_checkpoint,
    train,
    warm_start,
)
from .pyramid import PyramidSpec, spp_average_pool

_LOSS_MODES = {"cosine-ppmi": "cosine_ppmi", "logistic": "binary_logistic"}
_LABEL_LEVELS = {"image": (1,), "pyramid2": (1, 2)}


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise ValueError(f"size must look like 64x64, got {text!r}") from None


def _parse_blocks(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(c) for c in text.split(","))
    except ValueError:
        raise ValueError(f"blocks must be a comma list of channel counts, got {text!r}") from None


def _manifest_field(data_dir: str, key: str) -> str:
    with open(os.path.join(data_dir, "manifest.txt"), "r", encoding="ascii") as fh:
        for line in fh:
            k, _, v = line.strip().partition("=")
            if k == key:
                return v
    return ""


def _label_matrix(samples, spec: PyramidSpec, image_size) -> np.ndarray:
    return np.stack([pyramid_label(s, spec, image_size) for s in samples])


def _write_report(text: str, report_out: str | None) -> None:
    print(text)
    if report_out:
        with open(report_out, "w", encoding="ascii") as fh:
            fh.write(text + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    config = ds.DatasetConfig(
        image_size=_parse_size(args.size),
        class_count=args.classes,
        image_count=args.images,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
        cooccurrence_bias=ds.bias_preset(args.bias_preset, args.classes),
        seed=args.seed,
    )
    manifest = ds.generate_dataset(config, args.out)
    print(f"wrote {manifest['images']} images to {args.out}")
    print(f"content_sha256={manifest['content_sha256']}")
    return 0


def _cmd_train(args) -> int:
    samples, doc = ds.load_dataset(args.data)
    width, height = doc["image_size"]
    class_count = len(doc["class_names"])
    levels = _LABEL_LEVELS[args.labels]
    loss_mode = _LOSS_MODES[args.loss]

    base = (reference_training_preset(loss_mode, levels, args.seed)
            if args.reference_schedule else
            TrainingConfig(seed=args.seed, loss_mode=loss_mode, levels=levels))
    cfg = TrainingConfig(
        batch_size=args.batch if args.batch is not None else base.batch_size,
        iterations=args.iters if args.iters is not None else base.iterations,
        warmup_iters=args.warmup_iters if args.warmup_iters is not None else base.warmup_iters,
        lr_initial=args.lr_initial if args.lr_initial is not None else base.lr_initial,
        lr_main=args.lr_main if args.lr_main is not None else base.lr_main,
        momentum=args.momentum, seed=args.seed, loss_mode=loss_mode, levels=levels)

    net_cfg = NetworkConfig(input_size=(width, height), class_count=class_count,
                            block_channels=_parse_blocks(args.blocks),
                            head_channels=args.head)
    net = build_network(net_cfg, seed=args.seed)
    if args.warm_start:
        warm_start(net, args.warm_start)

    spec = PyramidSpec(levels=levels, class_count=class_count)
    embedding = None
    if loss_mode == "cosine_ppmi":
        embedding = fit_from_labels(_label_matrix(samples, spec, (width, height)))
        embed_out = args.embedding_out or args.checkpoint_out + ".embed"
        save_embedding(embedding, embed_out)
        print(f"embedding dim={embedding.class_dim} "
              f"clamped_mass={embedding.clamped_mass:.6g} -> {embed_out}")

    aug = AugmentationConfig.disabled() if args.no_augment else AugmentationConfig()
    history = train(net, samples, cfg, embedding=embedding, aug=aug, log_path=args.log)

    meta = {
        "seed": str(args.seed),
        "loss": args.loss,
        "labels": args.labels,
        "data_sha256": _manifest_field(args.data, "content_sha256"),
        "config": config_digest(cfg, net_cfg, aug),
    }
    save_checkpoint(net, args.checkpoint_out, meta=meta)
    tail = history[-1] if history else float("nan")
    print(f"trained {cfg.iterations} iterations (batch {cfg.batch_size}), "
          f"final loss {tail:.6g}")
    print(f"checkpoint -> {args.checkpoint_out}")
    return 0


def _eval_header(args, meta: dict, image_count: int) -> list[str]:
    lines = [f"# task={args.task} data={args.data} images={image_count}",
             f"# checkpoint={args.checkpoint}"]
    lines += [f"# meta.{k}={v}" for k, v in sorted(meta.items())]
    return lines


def _cmd_eval(args) -> int:
    samples, doc = ds.load_dataset(args.data)
    width, height = doc["image_size"]
    class_names = doc["class_names"]
    class_count = len(class_names)
    net, meta = load_checkpoint(args.checkpoint)
    if net.config.class_count != class_count:
        raise ValueError(
            f"checkpoint has {net.config.class_count} classes, dataset has {class_count}")
    if net.config.input_size != (width, height):
        raise ValueError("checkpoint input size does not match dataset")

    cams = [forward_cam(net, s.image) for s in samples]
    gt_boxes_by_image = {
        s.image_id: [(inst.cls, inst.box) for inst in s.instances]
        for s in samples
    }
    lines = _eval_header(args, meta, len(samples))

    if args.task == "classify":
        spec = PyramidSpec(levels=(1, 2), class_count=class_count)
        pooled = np.stack([spp_average_pool(c, spec) for c in cams])
        gt = _label_matrix(samples, spec, (width, height))
        report = classification_map(pooled, gt, spec)
        rows = [[class_names[k], _fmt(report.image_ap[k])] for k in range(class_count)]
        rows.append(["mean", _fmt(report.image_map)])
        lines.append(format_table(["class", "image-ap"], rows))
        lines.append("")
        lines += metric_lines("classification-image-ap", report.image_ap, report.image_map)
        for level in spec.levels[1:]:
            for t, v in enumerate(report.tile_ap[level]):
                lines.append(f"metric=classification-tile{level}-ap tile={t} value={_fmt(v)}")
            lines.append(f"metric=classification-tile{level}-map class=mean "
                         f"value={_fmt(report.tile_map[level])}")
    elif args.task == "pointloc":
        tolerance = (args.tolerance_px if args.tolerance_px is not None
                     else default_point_tolerance((width, height)))
        predictions = []
        for s, cam in zip(samples, cams):
            probs = cam_probabilities(cam)
            for cls in range(class_count):
                predictions.append((s.image_id, predict_point(probs, cls, (width, height))))
        report = pointloc_map(predictions, gt_boxes_by_image, class_count, tolerance)
        rows = [[class_names[k], _fmt(report.per_class[k])] for k in range(class_count)]
        rows.append(["mean", _fmt(report.mean_ap)])
        lines.append(format_table(["class", "point-ap"], rows))
        lines.append(f"tolerance_px={tolerance}")
        lines.append("")
        lines += metric_lines("pointloc-ap", report.per_class, report.mean_ap)
    else:  # corloc
        predicted = []
        for s, cam in zip(samples, cams):
            # Sigmoid outputs never reach 10% of their own peak, so the
            # fraction-of-peak cut only separates figure from ground on the
            # raw maps; "prob" remains the default argument convention.
            field = cam_probabilities(cam) if args.cam_space == "prob" else cam
            for cls in s.present_classes:
                box = predict_box(field, cls, (width, height), args.threshold_frac)
                if box is not None:
                    predicted.append((s.image_id, cls, box))
        report = corloc(predicted, gt_boxes_by_image, class_count,
                        iou_threshold=args.iou_threshold, strict=True)
        rows = [[class_names[k], _fmt(report.per_class[k])] for k in range(class_count)]
        rows.append(["mean", _fmt(report.mean_corloc)])
        rows.append(["pooled", _fmt(report.pooled)])
        lines.append(f"cam_space={args.cam_space}")
        lines.append(format_table(["class", "corloc"], rows))
        lines.append("")
        lines += metric_lines("corloc", report.per_class, report.mean_corloc)
        lines.append(f"metric=corloc class=pooled value={_fmt(report.pooled)}")

    _write_report("\n".join(lines), args.report_out)
    return 0


def _fmt(value) -> str:
    return "undefined" if value is None else f"{value:.17g}"


def _upscale(map2d: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    width, height = image_size
    h, w = map2d.shape
    if height % h or width % w:
        raise ValueError("image size must be a multiple of the map size")
    return np.repeat(np.repeat(map2d, height // h, axis=0), width // w, axis=1)


def _cmd_export_cam(args) -> int:
    samples, doc = ds.load_dataset(args.data)
    width, height = doc["image_size"]
    net, _ = load_checkpoint(args.checkpoint)
    by_id = {s.image_id: s for s in samples}
    if args.image_id not in by_id:
        raise ValueError(f"image id {args.image_id!r} not in dataset {args.data}")
    sample = by_id[args.image_id]

    os.makedirs(args.out_dir, exist_ok=True)
    probs = cam_probabilities(forward_cam(net, sample.image))
    records = []
    for cls in range(net.config.class_count):
        gray = np.round(255.0 * _upscale(probs[cls], (width, height))).astype(np.uint8)
        write_pgm(os.path.join(args.out_dir, f"cam_{sample.image_id}_class{cls}.pgm"), gray)
        mask = probs[cls] > args.threshold_frac * probs[cls].max()
        mask8 = (_upscale(mask.astype(np.uint8), (width, height)) * 255).astype(np.uint8)
        write_pgm(os.path.join(args.out_dir, f"mask_{sample.image_id}_class{cls}.pgm"), mask8)
        point = predict_point(probs, cls, (width, height))
        records.append(format_point_record(sample.image_id, point))
        box = predict_box(probs, cls, (width, height), args.threshold_frac)
        if box is not None:
            records.append(format_box_record(sample.image_id, cls, box,
                                             float(probs[cls].max())))
    with open(os.path.join(args.out_dir, f"boxes_{sample.image_id}.txt"),
              "w", encoding="ascii") as fh:
        fh.write("\n".join(records) + "\n")
    print(f"exported {2 * net.config.class_count} maps for {sample.image_id} "
          f"to {args.out_dir}")
    return 0


def _cmd_inspect_embedding(args) -> int:
    samples, doc = ds.load_dataset(args.data)
    width, height = doc["image_size"]
    class_count = len(doc["class_names"])
    spec = PyramidSpec(levels=_LABEL_LEVELS[args.labels], class_count=class_count)
    labels = _label_matrix(samples, spec, (width, height))
    model = fit_from_labels(labels)

    print(f"units={labels.shape[0]} dim={model.class_dim} levels={spec.levels}")
    print(f"clamped_mass={model.clamped_mass:.17g}")
    print("eigenvalues (descending):")
    print("  " + " ".join(f"{v:.6g}" for v in model.eigenvalues))
    clamped = (model.eigenvectors * np.maximum(model.eigenvalues, 0.0)) @ model.eigenvectors.T
    residual = float(np.max(np.abs(model.transform @ model.transform.T - clamped)))
    print(f"reconstruction_residual={residual:.6g}")
    if model.class_dim <= 12:
        print("ppmi:")
        for row in model.ppmi:
            print("  " + " ".join(f"{v:8.4f}" for v in row))
    # Round-trip sanity on a one-hot label for each class.
    worst = 0.0
    for k in range(model.class_dim):
        one_hot = np.zeros(model.class_dim)
        one_hot[k] = 1.0
        back = backproject(model, project(model, one_hot))
        worst = max(worst, float(np.max(np.abs(back - one_hot))))
    print(f"onehot_roundtrip_max_err={worst:.6g}")
    if args.save:
        save_embedding(model, args.save)
        print(f"embedding -> {args.save}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camloc",
        description="Weakly supervised localization from image activation maps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="64x64")
    p.add_argument("--classes", type=int, default=4, choices=range(1, 5))
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=3)
    p.add_argument("--bias-preset", default="uniform", choices=("uniform", "correlated"))
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a network on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--loss", default="cosine-ppmi", choices=sorted(_LOSS_MODES))
    p.add_argument("--labels", default="pyramid2", choices=sorted(_LABEL_LEVELS))
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--warmup-iters", type=int, default=None)
    p.add_argument("--lr-initial", type=float, default=None)
    p.add_argument("--lr-main", type=float, default=None)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", default="16,32,64")
    p.add_argument("--head", type=int, default=64)
    p.add_argument("--reference-schedule", action="store_true",
                   help="batch 256 / 2000 iterations preset")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--embedding-out", default=None)
    p.add_argument("--log", default=None)
    p.add_argument("--warm-start", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=("classify", "pointloc", "corloc"))
    p.add_argument("--threshold-frac", type=float, default=0.10)
    p.add_argument("--cam-space", default="prob", choices=("prob", "raw"),
                   help="map the box threshold is applied to (corloc only)")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--tolerance-px", type=int, default=None)
    p.add_argument("--report-out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export-cam", help="dump activation maps for one image")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threshold-frac", type=float, default=0.10)
    p.set_defaults(func=_cmd_export_cam)

    p = sub.add_parser("inspect-embedding", help="co-occurrence and spectrum diagnostics")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", default="pyramid2", choices=sorted(_LABEL_LEVELS))
    p.add_argument("--save", default=None)
    p.set_defaults(func=_cmd_inspect_embedding)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
