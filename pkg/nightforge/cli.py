"""Command line interface for low-light enhancement, domain transfer, fusion and evaluation."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from . import boxops, dataset, enhance, transfer, zerodce
from .batch import BatchAborted, ImageTask, RunReport, TaskOutput, render_table, run_tasks
from .config import PipelineConfig, apply_overrides, load_config, write_config
from .errors import ConfigError, IngestionError, NightforgeError, ParameterError, UsageError
from .imgcore import Image, read_png, write_png

logger = logging.getLogger(__name__)

TRANSFER_MANIFEST = "transfer_manifest.tsv"
AP_REPORT = "ap_report.json"

# Share of darkened pixels clipped to black above which a transfer image is flagged.
BLACK_CLIP_WARNING = 0.05

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _as_rgb(img: Image) -> Image:
    if img.channels == 3:
        return img
    return Image(np.repeat(img.data, 3, axis=0), linear_range=img.linear_range)


def _flat_channel_warnings(img: Image) -> List[str]:
    return [
        f"channel {index} is flat after colour balance"
        for index in range(img.channels)
        if np.ptp(img.data[index]) == 0
    ]


def _black_clip_warnings(dark: Image) -> List[str]:
    share = float(np.mean(dark.data == 0.0))
    if share > BLACK_CLIP_WARNING:
        return [f"{share:.1%} of darkened pixels clipped to black"]
    return []


def _curve_fit_warnings(fit: zerodce.CurveFit) -> List[str]:
    if fit.step_underflow:
        return [f"curve fit stopped on step size underflow after {fit.accepted_steps} accepted steps"]
    return []


def _empty_leaf_warnings(leaves: Iterable[boxops.Leaf]) -> List[str]:
    return [
        f"{leaf.model_id}/{leaf.transform.name} has no detections" for leaf in leaves if not leaf.detections
    ]


def _png_tasks(input_dir: Path, output_dir: Path) -> List[ImageTask]:
    if not input_dir.is_dir():
        raise UsageError(f"Input directory not found: {input_dir}")
    sources = sorted(input_dir.rglob("*.png"))
    return [
        ImageTask(
            index=index,
            name=source.relative_to(input_dir).as_posix(),
            source=source,
            destination=output_dir / source.relative_to(input_dir),
        )
        for index, source in enumerate(sources)
    ]


def _finish(report: RunReport, output_dir: Path) -> int:
    path = report.write(output_dir)
    logger.info("Run report written to %s", path)
    print(report.render())
    return EXIT_OK


def cmd_enhance(cfg: PipelineConfig, input_dir: Path, output_dir: Path, method: str) -> RunReport:
    if method not in enhance.ENHANCE_METHODS:
        raise UsageError(f"Unknown method '{method}'. Choose from {enhance.ENHANCE_METHODS}.")

    def work(task: ImageTask) -> TaskOutput:
        img = _as_rgb(read_png(task.source))
        if method == "zerodce":
            result = zerodce.enhance_zerodce(img, cfg.zerodce)
            task.destination.parent.mkdir(parents=True, exist_ok=True)
            task.destination.with_suffix(".dce").write_bytes(result.fit.curve_map.to_bytes())
            out = result.image
            metrics = {f"loss_{term}": value for term, value in result.breakdown.as_dict().items()}
            metrics["steps"] = float(result.fit.accepted_steps)
            warnings = _curve_fit_warnings(result.fit)
        else:
            out = enhance.enhance_image(
                img,
                method,
                msrcr_cfg=cfg.msrcr,
                fusion_cfg=cfg.fusion,
                saliency_cfg=cfg.saliency,
            )
            metrics = {}
            warnings = _flat_channel_warnings(out)
        write_png(task.destination, out)
        metrics.update({"mean_in": img.mean(), "mean_out": out.mean()})
        return TaskOutput(metrics=metrics, warnings=warnings)

    tasks = _png_tasks(input_dir, output_dir)
    write_config(cfg, output_dir)
    return run_tasks(tasks, work, workers=cfg.workers, strict=cfg.strict, command=f"enhance[{method}]")


def cmd_transfer(cfg: PipelineConfig, input_dir: Path, output_dir: Path) -> RunReport:
    records: Dict[int, Tuple[str, transfer.TransferResult]] = {}

    def work(task: ImageTask) -> TaskOutput:
        img = _as_rgb(read_png(task.source))
        result = transfer.transfer_pipeline(img, cfg.darken, cfg.msrcr, task.index, seed=cfg.seed)
        write_png(task.destination, result.image)
        records[task.index] = (task.name, result)
        return TaskOutput(
            metrics={"gamma": result.gamma, "scale": result.scale, "dark_mean": result.dark.mean()},
            warnings=_black_clip_warnings(result.dark) + _flat_channel_warnings(result.image),
        )

    tasks = _png_tasks(input_dir, output_dir)
    write_config(cfg, output_dir)
    report = run_tasks(tasks, work, workers=cfg.workers, strict=cfg.strict, command="transfer")
    transfer.write_manifest(output_dir / TRANSFER_MANIFEST, [records[i] for i in sorted(records)])
    return report


def _image_widths(value: Optional[str]) -> Tuple[Optional[float], Dict[str, float]]:
    """``--image-width`` is a single width or a file of ``image_id<TAB>width`` rows."""

    if value is None:
        return None, {}
    path = Path(value)
    if path.is_file():
        table: Dict[str, float] = {}
        for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            try:
                table[parts[0].strip()] = float(parts[1])
            except (IndexError, ValueError) as exc:
                raise ConfigError(f"Bad width row at {path}:{number}") from exc
        return None, table
    try:
        return float(value), {}
    except ValueError as exc:
        raise ConfigError(f"--image-width must be a number or a file, got '{value}'") from exc


def cmd_fuse(
    cfg: PipelineConfig, preds_root: Path, output_dir: Path, image_width: Optional[str] = None
) -> RunReport:
    default_width, widths = _image_widths(image_width)
    by_image = boxops.collect_leaves(preds_root)

    def work(task: ImageTask) -> TaskOutput:
        width = widths.get(task.name, default_width)
        fused = boxops.ensemble(by_image[task.name], cfg.boxes, width)
        boxops.write_detections(task.destination, fused)
        return TaskOutput(
            metrics={"leaves": float(len(by_image[task.name])), "fused": float(len(fused))},
            warnings=_empty_leaf_warnings(by_image[task.name]),
        )

    tasks = [
        ImageTask(index=i, name=name, destination=output_dir / f"{name}.txt")
        for i, name in enumerate(sorted(by_image))
    ]
    write_config(cfg, output_dir)
    return run_tasks(tasks, work, workers=cfg.workers, strict=cfg.strict, command="fuse")


def _load_predictions(gts: List[dataset.ImageAnnotations], preds_dir: Path) -> Dict[str, List[boxops.Detection]]:
    if not preds_dir.is_dir():
        raise UsageError(f"Prediction directory not found: {preds_dir}")
    expected = {ann.image_id for ann in gts}
    present = {p.stem: p for p in preds_dir.glob("*.txt")}
    missing = sorted(expected - set(present))
    extra = sorted(set(present) - expected)
    if missing or extra:
        raise IngestionError(
            f"Prediction files do not match the ground truth: "
            f"missing [{', '.join(missing)}], extra [{', '.join(extra)}]",
            path=str(preds_dir),
        )
    return {image_id: boxops.read_detections(present[image_id]) for image_id in sorted(expected)}


def _load_ground_truth(gt_manifest: Path, root: Optional[Path]) -> List[dataset.ImageAnnotations]:
    return dataset.parse_annotations(root or gt_manifest.parent, gt_manifest)


def cmd_eval(
    cfg: PipelineConfig,
    gt_manifest: Path,
    preds_dir: Path,
    *,
    root: Optional[Path] = None,
    output: Optional[Path] = None,
) -> dataset.APReport:
    gts = _load_ground_truth(gt_manifest, root)
    report = dataset.evaluate_map(gts, _load_predictions(gts, preds_dir), cfg.dataset.iou_thr)
    target = output or preds_dir / AP_REPORT
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(report.to_json(), encoding="utf-8")
    return report


def cmd_split(
    cfg: PipelineConfig, gt_manifest: Path, out_prefix: str, *, root: Optional[Path] = None
) -> dataset.SplitResult:
    gts = _load_ground_truth(gt_manifest, root)
    result = dataset.stratified_split(gts, cfg.dataset.val_fraction, cfg.seed)
    for part, members in (("train", result.train), ("val", result.val)):
        target = Path(f"{out_prefix}.{part}.txt")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text("".join(m + "\n" for m in members), encoding="utf-8")
    return result


def cmd_anchors(
    cfg: PipelineConfig, gt_manifest: Path, k: Optional[int] = None, *, root: Optional[Path] = None
) -> dataset.AnchorReport:
    gts = _load_ground_truth(gt_manifest, root)
    return dataset.anchor_stats(gts, k or cfg.dataset.anchor_k, cfg.seed)


def _parse_setting(value: str) -> Tuple[str, Path]:
    name, sep, path = value.partition("=")
    if not sep or not name or not path:
        raise UsageError(f"Expected NAME=PREDS_DIR, got '{value}'")
    return name, Path(path)


def cmd_compare(
    cfg: PipelineConfig,
    gt_manifest: Path,
    settings: Iterable[str],
    *,
    root: Optional[Path] = None,
    csv_path: Optional[Path] = None,
) -> pd.DataFrame:
    """Evaluate several prediction directories against one ground truth."""

    gts = _load_ground_truth(gt_manifest, root)
    rows = []
    for name, preds_dir in (_parse_setting(s) for s in settings):
        report = dataset.evaluate_map(gts, _load_predictions(gts, preds_dir), cfg.dataset.iou_thr)
        rows.append({"setting": name, "mAP": report.ap, "detections": report.n_det})
    frame = pd.DataFrame(rows, columns=["setting", "mAP", "detections"])
    if csv_path is not None:
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(csv_path, index=False)
    return frame


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: $NIGHTFORGE_CONFIG).")
    common.add_argument("--seed", type=int, help="Global seed overriding the config.")
    common.add_argument("--workers", type=int, help="Worker threads overriding the config.")
    common.add_argument(
        "--strict",
        action="store_true",
        default=None,
        help="Abort on the first failing image instead of recording it.",
    )
    common.add_argument(
        "--log-level",
        default=None,
        help="Logging level (default: $NIGHTFORGE_LOG_LEVEL or INFO).",
    )
    return common


def parse_args(argv: Iterable[str]) -> argparse.Namespace:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        description="Low-light face detection toolkit: enhancement, domain transfer, fusion, evaluation."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enhance", parents=[common], help="Enhance a tree of PNG images.")
    p.add_argument("input_dir", type=Path)
    p.add_argument("output_dir", type=Path)
    p.add_argument("--method", choices=enhance.ENHANCE_METHODS, default="msrcr")
    p.add_argument("--alpha", type=float, help="Saliency blend weight overriding the config.")

    p = sub.add_parser("transfer", parents=[common], help="Darken, add noise and re-enhance images.")
    p.add_argument("input_dir", type=Path)
    p.add_argument("output_dir", type=Path)

    p = sub.add_parser("fuse", parents=[common], help="Fuse preds/<model>/<transform>/<image>.txt files.")
    p.add_argument("preds_root", type=Path)
    p.add_argument("output_dir", type=Path)
    p.add_argument("--image-width", help="Image width for hflip backmapping, or a TSV of image_id/width.")

    p = sub.add_parser("eval", parents=[common], help="Average precision of a prediction directory.")
    p.add_argument("gt_manifest", type=Path)
    p.add_argument("preds_dir", type=Path)
    p.add_argument("--root", type=Path, help="Base directory of manifest paths (default: its folder).")
    p.add_argument("--output", type=Path, help=f"AP report path (default: <preds_dir>/{AP_REPORT}).")

    p = sub.add_parser("split", parents=[common], help="Face-count stratified train/val split.")
    p.add_argument("gt_manifest", type=Path)
    p.add_argument("out_prefix")
    p.add_argument("--root", type=Path)

    p = sub.add_parser("anchors", parents=[common], help="Face width histogram and anchor centres.")
    p.add_argument("gt_manifest", type=Path)
    p.add_argument("--k", type=int)
    p.add_argument("--root", type=Path)

    p = sub.add_parser("compare", parents=[common], help="Tabulate mAP of several prediction sets.")
    p.add_argument("gt_manifest", type=Path)
    p.add_argument("settings", nargs="+", help="NAME=PREDS_DIR pairs.")
    p.add_argument("--root", type=Path)
    p.add_argument("--csv", type=Path, help="Also write the table as CSV.")

    return parser.parse_args(list(argv))


def _configure_logging(level: Optional[str]) -> None:
    name = (level or os.environ.get("NIGHTFORGE_LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(level=getattr(logging, name, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    return apply_overrides(
        load_config(args.config),
        seed=args.seed,
        workers=args.workers,
        strict=args.strict,
        alpha=getattr(args, "alpha", None),
    )


def main(argv: Iterable[str] | None = None) -> int:
    args = parse_args(sys.argv[1:] if argv is None else argv)
    _configure_logging(args.log_level)

    try:
        cfg = _resolve_config(args)
    except (ConfigError, ParameterError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "enhance":
            return _finish(cmd_enhance(cfg, args.input_dir, args.output_dir, args.method), args.output_dir)
        if args.command == "transfer":
            return _finish(cmd_transfer(cfg, args.input_dir, args.output_dir), args.output_dir)
        if args.command == "fuse":
            return _finish(cmd_fuse(cfg, args.preds_root, args.output_dir, args.image_width), args.output_dir)
        if args.command == "eval":
            report = cmd_eval(cfg, args.gt_manifest, args.preds_dir, root=args.root, output=args.output)
            print(f"mAP {report.ap:.4f}")
        elif args.command == "split":
            result = cmd_split(cfg, args.gt_manifest, args.out_prefix, root=args.root)
            rows = [[g.bucket, g.size, len(g.val)] for g in result.groups]
            print(render_table(rows, ["Faces", "Images", "Validation"]))
        elif args.command == "anchors":
            anchors = cmd_anchors(cfg, args.gt_manifest, args.k, root=args.root)
            rows = [[f"{c:.2f}", n] for c, n in zip(anchors.centers, anchors.populations)]
            print(render_table(rows, ["Anchor width (px)", "Faces"]))
        elif args.command == "compare":
            frame = cmd_compare(cfg, args.gt_manifest, args.settings, root=args.root, csv_path=args.csv)
            rows = [[r.setting, f"{r.mAP:.4f}", r.detections] for r in frame.itertuples()]
            print(render_table(rows, ["Setting", "mAP", "Detections"]))
    except (ConfigError, UsageError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BatchAborted as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (NightforgeError, OSError) as exc:  # pragma: no cover - CLI entry point
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
