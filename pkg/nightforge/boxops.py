"""Detection boxes, suppression, weighted box fusion and test-time augmentation merging."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import ConfigError, IngestionError, ParameterError, UsageError

logger = logging.getLogger(__name__)

FUSED_MODEL_ID = "wbf"
_SCALE_DIR = re.compile(r"^scale_(?P<factor>[0-9]*\.?[0-9]+)$")


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(value) for value in coords):
            raise ParameterError(f"Box coordinates must be finite, got {coords}.")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ParameterError(f"Box must have positive area, got {coords}.")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return self.x1, self.y1, self.x2, self.y2

    def scaled(self, sx: float, sy: float) -> "BBox":
        return BBox(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float
    model_id: str = "model"
    label: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ParameterError(f"Detection score must lie in [0, 1], got {self.score}.")

    def with_score(self, score: float) -> "Detection":
        return replace(self, score=score)


class FusionParams(BaseModel):
    """Thresholds for suppression and fusion. ``model_weights`` defaults every model to 1."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    iou_thr_nms: float = Field(default=0.5, ge=0.0, le=1.0)
    soft_nms_method: Literal["linear", "gaussian"] = "linear"
    soft_nms_sigma: float = Field(default=0.5, gt=0.0)
    soft_nms_iou: float = Field(default=0.3, ge=0.0, le=1.0)
    soft_nms_score_floor: float = Field(default=0.001, ge=0.0, le=1.0)
    wbf_iou: float = Field(default=0.55, ge=0.0, le=1.0)
    wbf_skip_score: float = Field(default=0.0, ge=0.0, le=1.0)
    model_weights: Dict[str, float] = Field(default_factory=dict)
    pre_suppression: Literal["soft", "hard", "none"] = "soft"

    @field_validator("model_weights")
    @classmethod
    def _positive_weights(cls, value: Dict[str, float]) -> Dict[str, float]:
        bad = sorted(name for name, weight in value.items() if not weight > 0)
        if bad:
            raise ValueError(f"model weights must be positive: {', '.join(bad)}")
        return value

    def weight_for(self, model_id: str) -> float:
        return float(self.model_weights.get(model_id, 1.0))


def iou(a: BBox, b: BBox) -> float:
    inter_w = min(a.x2, b.x2) - max(a.x1, b.x1)
    inter_h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def rank_key(score: float, box: BBox) -> Tuple[float, float, float, float, float]:
    """Ordering used everywhere: score descending, then x1, y1 (x2, y2 settle exact ties)."""

    return -score, box.x1, box.y1, box.x2, box.y2


def _sorted(dets: Iterable[Detection]) -> List[Detection]:
    return sorted(dets, key=lambda d: rank_key(d.score, d.box))


def _single_model(dets: Sequence[Detection], operation: str) -> None:
    model_ids = {d.model_id for d in dets}
    if len(model_ids) > 1:
        raise UsageError(f"{operation} expects detections from one model, got {sorted(model_ids)}.")


def nms(dets: Sequence[Detection], p: Optional[FusionParams] = None) -> List[Detection]:
    """Greedy hard suppression: drop any box overlapping a kept one above ``iou_thr_nms``."""

    p = p or FusionParams()
    _single_model(dets, "nms")
    kept: List[Detection] = []
    for det in _sorted(dets):
        if all(iou(det.box, other.box) <= p.iou_thr_nms for other in kept):
            kept.append(det)
    return kept


def soft_nms(dets: Sequence[Detection], p: Optional[FusionParams] = None) -> List[Detection]:
    """Score-decaying suppression, linear or gaussian, within one model's detections."""

    p = p or FusionParams()
    _single_model(dets, "soft_nms")
    pending = list(dets)
    scores = [d.score for d in pending]
    out: List[Detection] = []
    while pending:
        best = min(range(len(pending)), key=lambda i: rank_key(scores[i], pending[i].box))
        top = pending.pop(best)
        out.append(top.with_score(scores.pop(best)))

        survivors: List[Detection] = []
        survivor_scores: List[float] = []
        for det, score in zip(pending, scores):
            overlap = iou(top.box, det.box)
            if p.soft_nms_method == "linear":
                if overlap > p.soft_nms_iou:
                    score = score * (1.0 - overlap)
            else:
                score = score * math.exp(-(overlap * overlap) / p.soft_nms_sigma)
            if score >= p.soft_nms_score_floor:
                survivors.append(det)
                survivor_scores.append(score)
        pending, scores = survivors, survivor_scores
    return out


@dataclass
class _Cluster:
    members: List[Tuple[float, BBox]] = field(default_factory=list)
    box: Optional[BBox] = None
    score: float = 0.0

    def add(self, score: float, box: BBox) -> None:
        self.members.append((score, box))
        total = sum(s for s, _ in self.members)
        self.score = total / len(self.members)
        if len(self.members) == 1:
            self.box = box
            return
        weights = [s for s, _ in self.members]
        if total <= 0:
            weights, total = [1.0] * len(self.members), float(len(self.members))
        columns = zip(*(b.as_tuple() for _, b in self.members))
        self.box = BBox(*(sum(w * c for w, c in zip(weights, column)) / total for column in columns))


def wbf(dets_per_model: Sequence[Sequence[Detection]], p: Optional[FusionParams] = None) -> List[Detection]:
    """Weighted box fusion across ``len(dets_per_model)`` models.

    Each pooled box joins the fused box it overlaps most (earliest on equal overlap) when that
    overlap exceeds ``wbf_iou``. Fused scores are rescaled by ``min(cluster_size, T) / T`` and
    capped at 1.
    """

    p = p or FusionParams()
    n_models = len(dets_per_model)
    if n_models == 0:
        return []

    pooled: List[Tuple[float, BBox]] = []
    for dets in dets_per_model:
        for det in dets:
            weighted = det.score * p.weight_for(det.model_id)
            if weighted < p.wbf_skip_score:
                continue
            pooled.append((weighted, det.box))
    pooled.sort(key=lambda item: rank_key(item[0], item[1]))

    clusters: List[_Cluster] = []
    for score, box in pooled:
        best_index, best_iou = -1, p.wbf_iou
        for index, cluster in enumerate(clusters):
            overlap = iou(cluster.box, box)
            if overlap > best_iou:
                best_index, best_iou = index, overlap
        if best_index < 0:
            clusters.append(_Cluster())
            best_index = len(clusters) - 1
        clusters[best_index].add(score, box)

    fused = [
        Detection(
            box=cluster.box,
            score=min(1.0, cluster.score * min(len(cluster.members), n_models) / n_models),
            model_id=FUSED_MODEL_ID,
        )
        for cluster in clusters
    ]
    return _sorted(fused)


@dataclass(frozen=True)
class Transform:
    """Test-time transform applied to the detector input: ``identity``, ``hflip`` or ``scale``."""

    kind: Literal["identity", "hflip", "scale"] = "identity"
    factor: float = 1.0

    @property
    def name(self) -> str:
        if self.kind == "scale":
            return f"scale_{self.factor:g}"
        return self.kind

    @classmethod
    def parse(cls, name: str) -> "Transform":
        if name in ("identity", "hflip"):
            return cls(kind=name)  # type: ignore[arg-type]
        match = _SCALE_DIR.match(name)
        if match:
            factor = float(match.group("factor"))
            if factor > 0:
                return cls(kind="scale", factor=factor)
        raise ConfigError(f"Unknown transform '{name}'; expected identity, hflip or scale_<factor>.")


def tta_backmap(
    dets: Sequence[Detection], transform: Transform, width: Optional[float] = None
) -> List[Detection]:
    """Map detections made on a transformed input back into original image coordinates."""

    if transform.kind == "identity":
        return list(dets)
    if transform.kind == "hflip" and (width is None or not width > 0):
        raise ParameterError(f"hflip backmapping needs a positive image width, got {width}.")
    if transform.kind == "scale" and not transform.factor > 0:
        raise ParameterError(f"Scale factor must be positive, got {transform.factor}.")

    mapped: List[Detection] = []
    for index, det in enumerate(dets):
        b = det.box
        try:
            if transform.kind == "hflip":
                box = BBox(width - b.x2, b.y1, width - b.x1, b.y2)
            else:
                f = transform.factor
                box = BBox(b.x1 / f, b.y1 / f, b.x2 / f, b.y2 / f)
        except ParameterError as exc:
            raise ParameterError(
                f"Detection {index} {b.as_tuple()} is invalid after {transform.name}: {exc}"
            ) from exc
        mapped.append(replace(det, box=box))
    return mapped


@dataclass
class Leaf:
    """Detections of one model on one transformed view of an image."""

    model_id: str
    transform: Transform
    detections: List[Detection]


def _suppress(dets: List[Detection], p: FusionParams) -> List[Detection]:
    if p.pre_suppression == "soft":
        return soft_nms(dets, p)
    if p.pre_suppression == "hard":
        return nms(dets, p)
    return _sorted(dets)


def ensemble(
    leaves: Sequence[Leaf], p: Optional[FusionParams] = None, width: Optional[float] = None
) -> List[Detection]:
    """Backmap and suppress every leaf, then fuse all leaves as separate models."""

    p = p or FusionParams()
    prepared: List[List[Detection]] = []
    for leaf in leaves:
        dets = [replace(d, model_id=leaf.model_id) for d in leaf.detections]
        prepared.append(_suppress(tta_backmap(dets, leaf.transform, width), p))
    return wbf(prepared, p)


def read_detections(path: Union[str, Path], model_id: str = "model") -> List[Detection]:
    """Parse ``N`` followed by ``N`` lines of ``x1 y1 x2 y2 score``."""

    source = Path(path)
    if not source.is_file():
        raise IngestionError("Detection file not found", path=str(source))
    lines = [line.strip() for line in source.read_text(encoding="utf-8").splitlines()]
    lines = [line for line in lines if line]
    if not lines:
        raise IngestionError("Empty detection file", path=str(source), line=1)
    try:
        count = int(lines[0])
    except ValueError as exc:
        raise IngestionError("Expected a detection count", path=str(source), line=1) from exc
    if count != len(lines) - 1:
        raise IngestionError(
            f"Header announces {count} detections, found {len(lines) - 1}", path=str(source), line=1
        )

    dets: List[Detection] = []
    for number, line in enumerate(lines[1:], start=2):
        parts = line.split()
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 fields, got {len(parts)}")
            x1, y1, x2, y2, score = (float(v) for v in parts)
            dets.append(Detection(BBox(x1, y1, x2, y2), score, model_id=model_id))
        except (ValueError, ParameterError) as exc:
            raise IngestionError(f"Malformed detection ({exc})", path=str(source), line=number) from exc
    return dets


def write_detections(path: Union[str, Path], dets: Sequence[Detection]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    rows = [str(len(dets))]
    rows.extend(
        f"{d.box.x1:.6f} {d.box.y1:.6f} {d.box.x2:.6f} {d.box.y2:.6f} {d.score:.6f}" for d in dets
    )
    target.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return target


def collect_leaves(preds_root: Union[str, Path]) -> Dict[str, List[Leaf]]:
    """Group ``<model_id>/<transform>/<image>.txt`` files under ``preds_root`` by image stem."""

    root = Path(preds_root)
    if not root.is_dir():
        raise IngestionError("Prediction root not found", path=str(root))
    by_image: Dict[str, List[Leaf]] = {}
    for model_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for transform_dir in sorted(p for p in model_dir.iterdir() if p.is_dir()):
            transform = Transform.parse(transform_dir.name)
            for det_file in sorted(transform_dir.glob("*.txt")):
                leaf = Leaf(
                    model_id=model_dir.name,
                    transform=transform,
                    detections=read_detections(det_file, model_id=model_dir.name),
                )
                by_image.setdefault(det_file.stem, []).append(leaf)
    logger.debug("Collected predictions for %d image(s) under %s", len(by_image), root)
    return by_image


__all__ = [
    "BBox",
    "Detection",
    "FUSED_MODEL_ID",
    "FusionParams",
    "Leaf",
    "Transform",
    "collect_leaves",
    "ensemble",
    "iou",
    "nms",
    "rank_key",
    "read_detections",
    "soft_nms",
    "tta_backmap",
    "wbf",
    "write_detections",
]
