"""Face annotation ingestion, stratified splitting, box-aware geometry, anchor statistics and AP."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field

from .boxops import BBox, Detection, iou
from .errors import IngestionError, ParameterError, ShapeError, UsageError
from .imgcore import Image, resize_bilinear

logger = logging.getLogger(__name__)

# Upper bounds of the face-count groups used by ``stratified_split``; the last group is open.
COUNT_BUCKETS: Tuple[Tuple[int, int], ...] = ((0, 0), (1, 2), (3, 5), (6, 10), (11, 20))
HISTOGRAM_BIN = 4
MIN_CROP_RETENTION = 0.3
KMEANS_MAX_ITER = 300


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    val_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    crop: Tuple[int, int] = (1000, 800)
    multiscale: Tuple[Tuple[int, int], Tuple[int, int]] = ((2160, 1440), (4320, 2880))
    anchor_k: int = Field(default=5, ge=1)
    iou_thr: float = Field(default=0.5, gt=0.0, lt=1.0)


@dataclass
class ImageAnnotations:
    image_path: str
    width: int
    height: int
    boxes: List[BBox] = field(default_factory=list)
    dropped: int = 0

    @property
    def image_id(self) -> str:
        return Path(self.image_path).stem


@dataclass
class GroupSplit:
    bucket: str
    size: int
    val: List[str]


@dataclass
class SplitResult:
    train: List[str]
    val: List[str]
    groups: List[GroupSplit]

    def group_report(self) -> Dict[str, Dict[str, object]]:
        return {g.bucket: {"size": g.size, "val": len(g.val), "members": list(g.val)} for g in self.groups}


@dataclass
class AnchorReport:
    histogram: List[int]
    centers: List[float]
    populations: List[int]
    bin_width: int = HISTOGRAM_BIN

    @property
    def total(self) -> int:
        return int(sum(self.histogram))


@dataclass
class APReport:
    ap: float
    n_images: int
    n_gt: int
    n_det: int
    iou_thr: float
    pr_curve: List[Tuple[float, float]]

    def to_dict(self) -> Dict[str, object]:
        return {
            "ap": self.ap,
            "n_images": self.n_images,
            "n_gt": self.n_gt,
            "n_det": self.n_det,
            "iou_thr": self.iou_thr,
            "pr_curve": [[r, p] for r, p in self.pr_curve],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def read_annotation_file(path: Union[str, Path]) -> List[Tuple[float, float, float, float]]:
    """Read ``N`` then ``N`` lines of ``x1 y1 x2 y2``. Coordinates are returned unclamped."""

    source = Path(path)
    if not source.is_file():
        raise IngestionError("Annotation file not found", path=str(source))
    lines = [line.strip() for line in source.read_text(encoding="utf-8").splitlines()]
    lines = [line for line in lines if line]
    if not lines:
        raise IngestionError("Empty annotation file", path=str(source), line=1)
    try:
        count = int(lines[0])
    except ValueError as exc:
        raise IngestionError("Expected a box count", path=str(source), line=1) from exc
    if count < 0 or count != len(lines) - 1:
        raise IngestionError(
            f"Header announces {count} boxes, found {len(lines) - 1}", path=str(source), line=1
        )

    boxes: List[Tuple[float, float, float, float]] = []
    for number, line in enumerate(lines[1:], start=2):
        parts = line.split()
        try:
            if len(parts) != 4:
                raise ValueError(f"expected 4 fields, got {len(parts)}")
            x1, y1, x2, y2 = (float(v) for v in parts)
        except ValueError as exc:
            raise IngestionError(f"Malformed box ({exc})", path=str(source), line=number) from exc
        if not all(math.isfinite(v) for v in (x1, y1, x2, y2)):
            raise IngestionError("Non-finite coordinate", path=str(source), line=number)
        boxes.append((x1, y1, x2, y2))
    return boxes


def write_annotation_file(path: Union[str, Path], boxes: Sequence[BBox]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    rows = [str(len(boxes))] + [f"{b.x1:.6f} {b.y1:.6f} {b.x2:.6f} {b.y2:.6f}" for b in boxes]
    target.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return target


def _image_size(path: Path) -> Tuple[int, int]:
    if not path.is_file():
        raise IngestionError("Image file not found", path=str(path))
    try:
        with PILImage.open(path) as pil:
            return pil.size
    except (UnidentifiedImageError, OSError) as exc:
        raise IngestionError(f"Unreadable image header ({exc})", path=str(path)) from exc


def _clamp_boxes(
    raw: Sequence[Tuple[float, float, float, float]], width: int, height: int
) -> Tuple[List[BBox], int]:
    boxes: List[BBox] = []
    dropped = 0
    for x1, y1, x2, y2 in raw:
        x1, x2 = min(max(x1, 0.0), width), min(max(x2, 0.0), width)
        y1, y2 = min(max(y1, 0.0), height), min(max(y2, 0.0), height)
        if x2 > x1 and y2 > y1:
            boxes.append(BBox(x1, y1, x2, y2))
        else:
            dropped += 1
    return boxes, dropped


def parse_annotations(root: Union[str, Path], manifest: Union[str, Path]) -> List[ImageAnnotations]:
    """Load every ``image_path<TAB>annotation_path`` pair listed in ``manifest``.

    Relative paths resolve against ``root``. Boxes are clamped to the image; boxes left without
    area are dropped and counted in ``ImageAnnotations.dropped``.
    """

    base = Path(root)
    manifest_path = Path(manifest)
    if not manifest_path.is_file():
        raise IngestionError("Manifest not found", path=str(manifest_path))

    records: List[ImageAnnotations] = []
    for number, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise IngestionError(
                "Expected image_path<TAB>annotation_path", path=str(manifest_path), line=number
            )
        image_path, annotation_path = (base / parts[0].strip(), base / parts[1].strip())
        width, height = _image_size(image_path)
        boxes, dropped = _clamp_boxes(read_annotation_file(annotation_path), width, height)
        if dropped:
            logger.warning("Dropped %d zero-area box(es) from %s", dropped, annotation_path)
        records.append(ImageAnnotations(str(parts[0].strip()), width, height, boxes, dropped))

    logger.info(
        "Loaded %d image(s) with %d box(es) from %s",
        len(records),
        sum(len(r.boxes) for r in records),
        manifest_path,
    )
    return records


def build_manifest(
    image_dir: Union[str, Path], label_dir: Union[str, Path], output: Union[str, Path]
) -> Path:
    """Pair ``<id>.png`` images with ``<id>.txt`` label files and write a manifest.

    Written paths are relative to the manifest's directory. Images without labels are skipped
    with a warning.
    """

    images = Path(image_dir)
    labels = Path(label_dir)
    target = Path(output)
    if not images.is_dir():
        raise IngestionError("Image directory not found", path=str(images))
    rows: List[str] = []
    for image_path in sorted(images.glob("*.png")):
        label_path = labels / f"{image_path.stem}.txt"
        if not label_path.is_file():
            logger.warning("No label file for %s", image_path.name)
            continue
        rows.append(
            f"{_relative_to(image_path, target.parent)}\t{_relative_to(label_path, target.parent)}"
        )
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text("".join(row + "\n" for row in rows), encoding="utf-8")
    return target


def _relative_to(path: Path, base: Path) -> str:
    try:
        return path.resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(path.resolve())


def face_count_bucket(count: int) -> str:
    for lo, hi in COUNT_BUCKETS:
        if lo <= count <= hi:
            return str(lo) if lo == hi else f"{lo}-{hi}"
    return f"{COUNT_BUCKETS[-1][1] + 1}+"


def _validation_size(size: int, fraction: float) -> int:
    n_val = int(math.floor(fraction * size + 0.5))
    if n_val == 0 and size >= 2:
        return 1
    return n_val


def stratified_split(anns: Sequence[ImageAnnotations], val_fraction: float = 0.1, seed: int = 0) -> SplitResult:
    """Split images so every face-count group contributes ``round(val_fraction * size)`` to val."""

    if not anns:
        raise UsageError("Cannot split an empty annotation list.")
    if not 0.0 < val_fraction < 1.0:
        raise ParameterError(f"val_fraction must lie in (0, 1), got {val_fraction}.")

    groups: Dict[str, List[str]] = {}
    for ann in anns:
        groups.setdefault(face_count_bucket(len(ann.boxes)), []).append(ann.image_path)

    bucket_order = [face_count_bucket(lo) for lo, _ in COUNT_BUCKETS] + [face_count_bucket(10**9)]
    reports: List[GroupSplit] = []
    val: List[str] = []
    for index, bucket in enumerate(bucket_order):
        members = sorted(groups.get(bucket, []))
        if not members:
            continue
        rng = np.random.default_rng([seed, index])
        order = rng.permutation(len(members))
        chosen = sorted(members[i] for i in order[: _validation_size(len(members), val_fraction)])
        reports.append(GroupSplit(bucket=bucket, size=len(members), val=chosen))
        val.extend(chosen)

    val_set = set(val)
    train = sorted(ann.image_path for ann in anns if ann.image_path not in val_set)
    logger.info("Split %d image(s) into %d train / %d val", len(anns), len(train), len(val))
    return SplitResult(train=train, val=sorted(val), groups=reports)


def _check_frame(ann: ImageAnnotations, img: Image) -> None:
    if img.size != (ann.width, ann.height):
        raise ShapeError(
            f"Image size {img.size} does not match annotation size {(ann.width, ann.height)}."
        )


def resize_with_boxes(
    ann: ImageAnnotations, img: Image, target: Tuple[int, int]
) -> Tuple[Image, ImageAnnotations]:
    _check_frame(ann, img)
    new_w, new_h = int(target[0]), int(target[1])
    resized = resize_bilinear(img, new_w, new_h)
    sx, sy = new_w / ann.width, new_h / ann.height
    boxes = [b.scaled(sx, sy) for b in ann.boxes]
    return resized, replace(ann, width=new_w, height=new_h, boxes=boxes)


def hflip_with_boxes(ann: ImageAnnotations, img: Image) -> Tuple[Image, ImageAnnotations]:
    _check_frame(ann, img)
    flipped = Image(img.data[:, :, ::-1], linear_range=img.linear_range)
    boxes = [BBox(ann.width - b.x2, b.y1, ann.width - b.x1, b.y2) for b in ann.boxes]
    return flipped, replace(ann, boxes=boxes)


def sample_multiscale_target(
    rng: np.random.Generator,
    low: Tuple[int, int] = (2160, 1440),
    high: Tuple[int, int] = (4320, 2880),
) -> Tuple[int, int]:
    """Draw a training size on the segment between ``low`` and ``high``, keeping their aspect."""

    if low[0] > high[0] or low[1] > high[1]:
        raise ParameterError(f"Multi-scale range is inverted: {low} > {high}.")
    t = float(rng.uniform(0.0, 1.0))
    return (
        int(round(low[0] + t * (high[0] - low[0]))),
        int(round(low[1] + t * (high[1] - low[1]))),
    )


def crop_with_boxes(
    ann: ImageAnnotations,
    img: Image,
    crop_w: int,
    crop_h: int,
    rng: np.random.Generator,
) -> Tuple[Image, ImageAnnotations]:
    """Random crop keeping boxes whose centre falls inside and that keep 30% of their area."""

    _check_frame(ann, img)
    if crop_w < 1 or crop_h < 1:
        raise ParameterError(f"Crop size must be positive, got {crop_w}x{crop_h}.")
    if crop_w > ann.width or crop_h > ann.height:
        logger.warning(
            "Crop %dx%d exceeds image %dx%d; clamping to the image",
            crop_w,
            crop_h,
            ann.width,
            ann.height,
        )
        crop_w, crop_h = min(crop_w, ann.width), min(crop_h, ann.height)

    x0 = int(rng.integers(0, ann.width - crop_w + 1))
    y0 = int(rng.integers(0, ann.height - crop_h + 1))
    cropped = Image(img.data[:, y0 : y0 + crop_h, x0 : x0 + crop_w], linear_range=img.linear_range)

    kept: List[BBox] = []
    for box in ann.boxes:
        cx, cy = box.center
        if not (x0 <= cx <= x0 + crop_w and y0 <= cy <= y0 + crop_h):
            continue
        x1, x2 = max(box.x1 - x0, 0.0), min(box.x2 - x0, float(crop_w))
        y1, y2 = max(box.y1 - y0, 0.0), min(box.y2 - y0, float(crop_h))
        if x2 <= x1 or y2 <= y1:
            continue
        clipped = BBox(x1, y1, x2, y2)
        if clipped.area < MIN_CROP_RETENTION * box.area:
            continue
        kept.append(clipped)

    return cropped, replace(ann, width=crop_w, height=crop_h, boxes=kept, dropped=0)


def _kmeans_pp(widths: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [float(rng.choice(widths))]
    for _ in range(1, k):
        d2 = np.min((widths[:, None] - np.asarray(centers)[None, :]) ** 2, axis=1)
        centers.append(float(rng.choice(widths, p=d2 / d2.sum())))
    return np.asarray(centers)


def anchor_stats(anns: Sequence[ImageAnnotations], k: int = 5, seed: int = 0) -> AnchorReport:
    """Width histogram in 4 px bins and seeded 1-D k-means centres of face widths."""

    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}.")
    widths = np.asarray([b.width for ann in anns for b in ann.boxes], dtype=np.float64)
    if np.unique(widths).size < k:
        raise ParameterError(
            f"Need at least {k} distinct face widths for k-means, got {np.unique(widths).size}."
        )

    histogram = np.bincount(np.floor(widths / HISTOGRAM_BIN).astype(np.int64)).tolist()

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(widths, k, rng)
    assignment: Optional[np.ndarray] = None
    for iteration in range(KMEANS_MAX_ITER):
        current = np.argmin(np.abs(widths[:, None] - centers[None, :]), axis=1)
        if assignment is not None and np.array_equal(current, assignment):
            logger.debug("k-means converged after %d iteration(s)", iteration)
            break
        assignment = current
        for cluster in range(k):
            members = widths[assignment == cluster]
            if members.size:
                centers[cluster] = members.mean()

    order = np.argsort(centers, kind="stable")
    centers = centers[order]
    final = np.argmin(np.abs(widths[:, None] - centers[None, :]), axis=1)
    populations = np.bincount(final, minlength=k).tolist()
    return AnchorReport(
        histogram=[int(c) for c in histogram],
        centers=[float(c) for c in centers],
        populations=[int(p) for p in populations],
    )


def evaluate_map(
    gts: Sequence[ImageAnnotations],
    dets: Mapping[str, Sequence[Detection]],
    iou_thr: float = 0.5,
) -> APReport:
    """Single-class average precision with the all-points precision envelope.

    ``dets`` is keyed by image id (the image file stem). Detections are ranked by score, then
    image id, then x1; each takes the highest-overlap unmatched ground truth box of its image
    when that overlap reaches ``iou_thr``.
    """

    if not 0.0 < iou_thr < 1.0:
        raise ParameterError(f"iou_thr must lie in (0, 1), got {iou_thr}.")
    by_id = {ann.image_id: ann for ann in gts}
    unknown = sorted(set(dets) - set(by_id))
    if unknown:
        raise UsageError(f"Detections reference unknown image(s): {', '.join(unknown)}")

    pooled = [(image_id, det) for image_id, image_dets in dets.items() for det in image_dets]
    pooled.sort(key=lambda item: (-item[1].score, item[0], item[1].box.x1))
    n_gt = sum(len(ann.boxes) for ann in gts)
    matched = {image_id: [False] * len(ann.boxes) for image_id, ann in by_id.items()}

    hits = np.zeros(len(pooled), dtype=bool)
    for rank, (image_id, det) in enumerate(pooled):
        best_index, best_iou = -1, -1.0
        for index, gt_box in enumerate(by_id[image_id].boxes):
            if matched[image_id][index]:
                continue
            overlap = iou(det.box, gt_box)
            if overlap > best_iou:
                best_index, best_iou = index, overlap
        if best_index >= 0 and best_iou >= iou_thr:
            matched[image_id][best_index] = True
            hits[rank] = True

    ap = 0.0
    curve: List[Tuple[float, float]] = []
    if pooled:
        tp = np.cumsum(hits)
        precision = tp / np.arange(1, len(pooled) + 1)
        recall = tp / n_gt if n_gt else np.zeros(len(pooled))
        curve = [(float(r), float(p)) for r, p in zip(recall, precision)]
        if n_gt:
            # Summing envelope precision at each true positive integrates over recall steps of 1/n_gt.
            envelope = np.maximum.accumulate(precision[::-1])[::-1]
            ap = float(envelope[hits].sum() / n_gt)

    return APReport(
        ap=ap,
        n_images=len(gts),
        n_gt=n_gt,
        n_det=len(pooled),
        iou_thr=iou_thr,
        pr_curve=curve,
    )


__all__ = [
    "APReport",
    "AnchorReport",
    "COUNT_BUCKETS",
    "DatasetConfig",
    "GroupSplit",
    "ImageAnnotations",
    "SplitResult",
    "anchor_stats",
    "build_manifest",
    "crop_with_boxes",
    "evaluate_map",
    "face_count_bucket",
    "hflip_with_boxes",
    "parse_annotations",
    "read_annotation_file",
    "resize_with_boxes",
    "sample_multiscale_target",
    "stratified_split",
    "write_annotation_file",
]
