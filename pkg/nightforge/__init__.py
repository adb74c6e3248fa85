"""Nightforge package for low-light face detection preprocessing, fusion and evaluation."""
from .boxops import BBox, Detection, FusionParams, ensemble, iou, nms, soft_nms, tta_backmap, wbf
from .cli import main as cli_main
from .config import PipelineConfig, load_config
from .dataset import (
    ImageAnnotations,
    anchor_stats,
    crop_with_boxes,
    evaluate_map,
    parse_annotations,
    resize_with_boxes,
    stratified_split,
)
from .enhance import FusionConfig, MsrcrConfig, fuse_saliency, msrcr, spectral_saliency
from .errors import NightforgeError
from .imgcore import Image, decode_png, encode_png, gaussian_blur, resize_bilinear, to_grayscale
from .transfer import DarkenConfig, add_noise, darken, transfer_pipeline
from .zerodce import CurveMap, DceLossConfig, apply_curve, dce_loss, optimize_curve

__all__ = [
    "BBox",
    "CurveMap",
    "DarkenConfig",
    "DceLossConfig",
    "Detection",
    "FusionConfig",
    "FusionParams",
    "Image",
    "ImageAnnotations",
    "MsrcrConfig",
    "NightforgeError",
    "PipelineConfig",
    "add_noise",
    "anchor_stats",
    "apply_curve",
    "cli_main",
    "crop_with_boxes",
    "darken",
    "dce_loss",
    "decode_png",
    "encode_png",
    "ensemble",
    "evaluate_map",
    "fuse_saliency",
    "gaussian_blur",
    "iou",
    "load_config",
    "msrcr",
    "nms",
    "optimize_curve",
    "parse_annotations",
    "resize_bilinear",
    "resize_with_boxes",
    "soft_nms",
    "spectral_saliency",
    "stratified_split",
    "to_grayscale",
    "transfer_pipeline",
    "tta_backmap",
    "wbf",
]
