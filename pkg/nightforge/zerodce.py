"""Zero-reference quadratic curve enhancement fitted per image by projected gradient descent."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import DecodeError, NumericalError, ParameterError, ShapeError
from .imgcore import Image, bilinear_weights, resize_bilinear

logger = logging.getLogger(__name__)

CURVE_MAGIC = b"DCE1"
_HEADER = struct.Struct("<4sIII")
_SPATIAL_REGION = 4
_MIN_STEP = 1e-12


class DceLossConfig(BaseModel):
    """Weights and targets of the non-reference enhancement losses."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    exposure_target: float = Field(default=0.6, gt=0.0, lt=1.0)
    exposure_patch: int = Field(default=16, ge=1)
    w_exposure: float = Field(default=1.0, ge=0.0)
    w_color: float = Field(default=0.5, ge=0.0)
    w_spatial: float = Field(default=1.0, ge=0.0)
    w_smooth: float = Field(default=20.0, ge=0.0)


class ZeroDceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    loss: DceLossConfig = Field(default_factory=DceLossConfig)
    steps: int = Field(default=200, ge=1)
    step_size: float = Field(default=0.05, gt=0.0)
    grid_w: int = Field(default=32, ge=1)
    grid_h: int = Field(default=32, ge=1)
    iterations: int = Field(default=8, ge=1)
    fit_width: int = Field(default=256, ge=8)


@dataclass(frozen=True)
class CurveMap:
    """Per-iteration, per-channel grids of curve parameters, shaped (iterations, 3, grid_h, grid_w)."""

    params: np.ndarray

    def __post_init__(self) -> None:
        params = np.array(self.params, dtype=np.float64)
        if params.ndim != 4 or params.shape[1] != 3:
            raise ShapeError(f"Curve parameters must be (n, 3, h, w), got {params.shape}.")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @property
    def iterations(self) -> int:
        return int(self.params.shape[0])

    @property
    def grid_h(self) -> int:
        return int(self.params.shape[2])

    @property
    def grid_w(self) -> int:
        return int(self.params.shape[3])

    @classmethod
    def zeros(cls, grid_w: int = 32, grid_h: int = 32, iterations: int = 8) -> "CurveMap":
        return cls(np.zeros((iterations, 3, grid_h, grid_w)))

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(CURVE_MAGIC, self.grid_w, self.grid_h, self.iterations)
        return header + self.params.astype("<f4").tobytes(order="C")

    @classmethod
    def from_bytes(cls, payload: bytes) -> "CurveMap":
        if len(payload) < _HEADER.size:
            raise DecodeError("Truncated curve map header", offset=len(payload))
        magic, grid_w, grid_h, iterations = _HEADER.unpack_from(payload)
        if magic != CURVE_MAGIC:
            raise DecodeError(f"Bad curve map magic {magic!r}", offset=0)
        count = iterations * 3 * grid_w * grid_h
        expected = _HEADER.size + 4 * count
        if len(payload) != expected:
            raise DecodeError(
                f"Curve map payload should be {expected} bytes, got {len(payload)}",
                offset=min(len(payload), expected),
            )
        values = np.frombuffer(payload, dtype="<f4", count=count, offset=_HEADER.size)
        return cls(values.astype(np.float64).reshape(iterations, 3, grid_h, grid_w))


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    exposure: float
    color: float
    spatial: float
    smoothness: float

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "exposure": self.exposure,
            "color": self.color,
            "spatial": self.spatial,
            "smoothness": self.smoothness,
        }


@dataclass
class CurveFit:
    curve_map: CurveMap
    loss_trace: List[float]
    accepted_steps: int
    final_step_size: float
    seed: int = 0
    step_underflow: bool = False


@dataclass
class ZeroDceResult:
    image: Image
    fit: CurveFit
    breakdown: Optional[LossBreakdown] = None


def _upsample_operators(grid_h: int, grid_w: int, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    rows = bilinear_weights(grid_h, height).toarray()
    cols = bilinear_weights(grid_w, width).toarray()
    return rows, cols


def _upsample(params: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return rows @ params @ cols.T


def _curve_states(x0: np.ndarray, a_full: np.ndarray) -> List[np.ndarray]:
    states = [x0]
    x = x0
    for a in a_full:
        x = x + a * x * (1.0 - x)
        states.append(x)
    return states


def _check_curve_input(img: Image, cm: CurveMap) -> None:
    if img.channels != 3:
        raise ShapeError(f"Curve enhancement expects an RGB image, got {img.channels} channel(s).")
    if not img.linear_range:
        raise ParameterError("Curve enhancement expects a linear-range image in [0, 1].")
    if np.any(np.abs(cm.params) > 1.0):
        raise ParameterError("Curve parameters must lie in [-1, 1].")


def apply_curve(img: Image, cm: CurveMap) -> Image:
    """Apply ``x <- x + A x (1 - x)`` once per iteration with bilinearly upsampled A maps."""

    _check_curve_input(img, cm)
    rows, cols = _upsample_operators(cm.grid_h, cm.grid_w, img.height, img.width)
    states = _curve_states(img.data, _upsample(cm.params, rows, cols))
    return Image(np.clip(states[-1], 0.0, 1.0), linear_range=True)


def _region_means(gray: np.ndarray, size: int) -> Tuple[np.ndarray, int, int]:
    height, width = gray.shape
    ry, rx = min(size, height), min(size, width)
    ny, nx = height // ry, width // rx
    blocks = gray[: ny * ry, : nx * rx].reshape(ny, ry, nx, rx)
    return blocks.mean(axis=(1, 3)), ry, rx


def _spread_regions(grad: np.ndarray, ry: int, rx: int, shape: Tuple[int, int]) -> np.ndarray:
    ny, nx = grad.shape
    out = np.zeros(shape)
    block = np.broadcast_to(grad[:, None, :, None] / (ry * rx), (ny, ry, nx, rx))
    out[: ny * ry, : nx * rx] = block.reshape(ny * ry, nx * rx)
    return out


def _loss_terms(
    x_in: np.ndarray,
    y: np.ndarray,
    params: np.ndarray,
    cfg: DceLossConfig,
) -> Tuple[LossBreakdown, np.ndarray, np.ndarray]:
    shape = y.shape[1:]
    gray_y = y.mean(axis=0)
    gray_x = x_in.mean(axis=0)

    patches, py, px = _region_means(gray_y, cfg.exposure_patch)
    exposure_diff = patches - cfg.exposure_target
    l_exp = float(np.mean(exposure_diff**2))
    g_gray = cfg.w_exposure * _spread_regions(2.0 * exposure_diff / patches.size, py, px, shape)

    means = y.mean(axis=(1, 2))
    l_col = float(sum((means[a] - means[b]) ** 2 for a, b in ((0, 1), (0, 2), (1, 2))))
    g_means = 2.0 * (3.0 * means - means.sum())

    y_regions, ry, rx = _region_means(gray_y, _SPATIAL_REGION)
    x_regions, _, _ = _region_means(gray_x, _SPATIAL_REGION)
    count = y_regions.size
    g_regions = np.zeros_like(y_regions)
    l_spa = 0.0
    for axis in (0, 1):
        dy = np.diff(y_regions, axis=axis)
        dx = np.diff(x_regions, axis=axis)
        d = np.abs(dy) - np.abs(dx)
        l_spa += 2.0 * float(np.sum(d**2)) / count
        g_pair = 4.0 * d * np.sign(dy) / count
        if axis == 0:
            g_regions[1:, :] += g_pair
            g_regions[:-1, :] -= g_pair
        else:
            g_regions[:, 1:] += g_pair
            g_regions[:, :-1] -= g_pair
    g_gray = g_gray + cfg.w_spatial * _spread_regions(g_regions, ry, rx, shape)

    l_tv = 0.0
    g_params = np.zeros_like(params)
    for axis in (2, 3):
        diff = np.diff(params, axis=axis)
        if diff.size == 0:
            continue
        l_tv += float(np.mean(diff**2))
        g_diff = 2.0 * diff / diff.size
        if axis == 2:
            g_params[:, :, 1:, :] += g_diff
            g_params[:, :, :-1, :] -= g_diff
        else:
            g_params[:, :, :, 1:] += g_diff
            g_params[:, :, :, :-1] -= g_diff

    total = (
        cfg.w_exposure * l_exp
        + cfg.w_color * l_col
        + cfg.w_spatial * l_spa
        + cfg.w_smooth * l_tv
    )
    breakdown = LossBreakdown(
        total=float(total), exposure=l_exp, color=l_col, spatial=l_spa, smoothness=l_tv
    )
    for term, value in breakdown.as_dict().items():
        if not np.isfinite(value):
            raise NumericalError("Non-finite loss", term=term)

    g_y = np.broadcast_to(g_gray / 3.0, y.shape) + (
        cfg.w_color * g_means / (shape[0] * shape[1])
    )[:, None, None]
    return breakdown, g_y, cfg.w_smooth * g_params


def dce_loss(
    img_in: Image, img_out: Image, cm: CurveMap, cfg: Optional[DceLossConfig] = None
) -> LossBreakdown:
    """Weighted exposure, colour constancy, spatial consistency and smoothness losses."""

    cfg = cfg or DceLossConfig()
    if img_in.size != img_out.size or img_in.channels != img_out.channels:
        raise ShapeError("Loss inputs must share dimensions and channel count.")
    if img_in.channels != 3:
        raise ShapeError("Loss inputs must be RGB.")
    breakdown, _, _ = _loss_terms(img_in.data, img_out.data, cm.params, cfg)
    return breakdown


def _objective(
    x0: np.ndarray,
    params: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
    cfg: DceLossConfig,
) -> Tuple[LossBreakdown, np.ndarray]:
    a_full = _upsample(params, rows, cols)
    states = _curve_states(x0, a_full)
    breakdown, g, g_params = _loss_terms(x0, states[-1], params, cfg)

    g = np.array(g)
    g_full = np.empty_like(a_full)
    for k in range(len(a_full) - 1, -1, -1):
        x_k = states[k]
        g_full[k] = g * x_k * (1.0 - x_k)
        g = g * (1.0 + a_full[k] * (1.0 - 2.0 * x_k))
    gradient = rows.T @ g_full @ cols + g_params
    if not np.all(np.isfinite(gradient)):
        raise NumericalError("Non-finite gradient", term="gradient")
    return breakdown, gradient


def dce_gradient(
    img: Image, cm: CurveMap, cfg: Optional[DceLossConfig] = None
) -> Tuple[LossBreakdown, np.ndarray]:
    """Loss of ``apply_curve(img, cm)`` and its analytic gradient with respect to ``cm.params``."""

    cfg = cfg or DceLossConfig()
    _check_curve_input(img, cm)
    rows, cols = _upsample_operators(cm.grid_h, cm.grid_w, img.height, img.width)
    return _objective(img.data, np.array(cm.params), rows, cols, cfg)


def optimize_curve(
    img: Image,
    cfg: Optional[DceLossConfig] = None,
    steps: int = 200,
    step_size: float = 0.05,
    seed: int = 0,
    *,
    grid_w: int = 32,
    grid_h: int = 32,
    iterations: int = 8,
) -> CurveFit:
    """Fit a curve map to ``img`` from the identity curve.

    Each step moves the parameters against the gradient scaled to a max-norm of ``step_size``,
    then projects onto [-1, 1]. A trial that increases the loss is rejected and halves the step,
    so the recorded loss trace never increases. ``seed`` is kept with the fit for provenance;
    the fit itself is deterministic.
    """

    cfg = cfg or DceLossConfig()
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}.")
    if step_size <= 0:
        raise ParameterError(f"step_size must be positive, got {step_size}.")

    cm = CurveMap.zeros(grid_w, grid_h, iterations)
    _check_curve_input(img, cm)
    rows, cols = _upsample_operators(grid_h, grid_w, img.height, img.width)
    params = np.array(cm.params)
    loss, grad = _objective(img.data, params, rows, cols, cfg)
    trace = [loss.total]
    accepted = 0
    step = float(step_size)
    underflow = False

    for _ in range(steps):
        scale = float(np.max(np.abs(grad)))
        if scale == 0.0:
            logger.debug("Curve fit reached a stationary point after %d accepted steps", accepted)
            break
        trial = np.clip(params - step * grad / scale, -1.0, 1.0)
        trial_loss, trial_grad = _objective(img.data, trial, rows, cols, cfg)
        if trial_loss.total <= loss.total:
            params, loss, grad = trial, trial_loss, trial_grad
            accepted += 1
        else:
            step *= 0.5
        trace.append(loss.total)
        if step < _MIN_STEP:
            underflow = True
            logger.debug("Curve fit step size underflow after %d accepted steps", accepted)
            break

    return CurveFit(
        curve_map=CurveMap(params),
        loss_trace=trace,
        accepted_steps=accepted,
        final_step_size=step,
        seed=seed,
        step_underflow=underflow,
    )


def enhance_zerodce(img: Image, cfg: Optional[ZeroDceConfig] = None) -> ZeroDceResult:
    """Fit a curve map on a reduced copy of ``img`` and apply it at full resolution."""

    cfg = cfg or ZeroDceConfig()
    working = img
    if img.width > cfg.fit_width:
        fit_height = max(1, int(round(cfg.fit_width * img.height / img.width)))
        working = resize_bilinear(img, cfg.fit_width, fit_height)
    fit = optimize_curve(
        working,
        cfg.loss,
        steps=cfg.steps,
        step_size=cfg.step_size,
        grid_w=cfg.grid_w,
        grid_h=cfg.grid_h,
        iterations=cfg.iterations,
    )
    logger.info(
        "Curve fit: loss %.6f -> %.6f over %d accepted steps",
        fit.loss_trace[0],
        fit.loss_trace[-1],
        fit.accepted_steps,
    )
    breakdown, _ = dce_gradient(working, fit.curve_map, cfg.loss)
    return ZeroDceResult(image=apply_curve(img, fit.curve_map), fit=fit, breakdown=breakdown)


__all__ = [
    "CurveFit",
    "CurveMap",
    "DceLossConfig",
    "LossBreakdown",
    "ZeroDceConfig",
    "ZeroDceResult",
    "apply_curve",
    "dce_gradient",
    "dce_loss",
    "enhance_zerodce",
    "optimize_curve",
]
