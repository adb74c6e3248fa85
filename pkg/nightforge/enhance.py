"""Retinex enhancement, spectral residual saliency and saliency/retinex fusion."""
from __future__ import annotations

import logging
from typing import Any, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from .errors import ParameterError, ShapeError
from .imgcore import Image, gaussian_blur, resize_bilinear, to_grayscale

logger = logging.getLogger(__name__)

ENHANCE_METHODS = ("msrcr", "msrcr+saliency", "zerodce")

# Width of the working copy the saliency spectrum is computed on.
SALIENCY_WIDTH = 64
# Knee of the log-amplitude compression, relative to the largest spectral magnitude.
SPECTRUM_KNEE = 2.5e-3
_MIN_SALIENCY_SIDE = 8


class MsrcrConfig(BaseModel):
    """Multi-scale surround and colour restoration parameters."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    scales: List[float] = Field(default_factory=lambda: [15.0, 80.0, 250.0])
    weights: Optional[List[float]] = None
    alpha_c: float = 125.0
    beta: float = 46.0
    epsilon: float = Field(default=1e-6, gt=0)
    clip_fraction: float = Field(default=0.01, ge=0.0, lt=0.5)

    @model_validator(mode="before")
    @classmethod
    def _uniform_weights(cls, values: Any) -> Any:
        if isinstance(values, dict) and values.get("weights") is None:
            scales = values.get("scales") or [15.0, 80.0, 250.0]
            values = {**values, "weights": [1.0 / len(scales)] * len(scales)}
        return values

    @model_validator(mode="after")
    def _check_scales(self) -> "MsrcrConfig":
        if not self.scales:
            raise ValueError("at least one retinex scale is required")
        if any(sigma <= 0 for sigma in self.scales):
            raise ValueError("retinex scales must be strictly positive")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("retinex scales must be strictly increasing")
        if self.weights is None or len(self.weights) != len(self.scales):
            raise ValueError("one weight per retinex scale is required")
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("retinex scale weights must sum to 1")
        return self


class FusionConfig(BaseModel):
    """Blend weight of the saliency map over the retinex output."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(default=0.3, ge=0.0, le=1.0)


class SaliencyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    smooth_sigma: float = Field(default=2.5, gt=0)


def _require_rgb(img: Image, operation: str) -> None:
    if img.channels != 3:
        raise ShapeError(f"{operation} expects an RGB image, got {img.channels} channel(s).")


def multiscale_retinex(img: Image, cfg: MsrcrConfig) -> np.ndarray:
    """Weighted sum over scales of log(I) - log(surround), per channel, before colour restoration."""

    _require_rgb(img, "multiscale_retinex")
    eps = cfg.epsilon
    log_image = np.log(img.data + eps)
    msr = np.zeros_like(img.data)
    for sigma, weight in zip(cfg.scales, cfg.weights or []):
        surround = gaussian_blur(img, sigma).data
        msr += weight * (log_image - np.log(surround + eps))
    return msr


def color_restoration(img: Image, cfg: MsrcrConfig) -> np.ndarray:
    _require_rgb(img, "color_restoration")
    eps = cfg.epsilon
    total = img.data.sum(axis=0, keepdims=True)
    return cfg.beta * (np.log(cfg.alpha_c * img.data + eps) - np.log(total + eps))


def simplest_color_balance(channel: np.ndarray, clip_fraction: float) -> np.ndarray:
    """Clip both tails at ``clip_fraction`` and stretch linearly to [0, 1].

    A channel whose clip percentiles coincide maps uniformly to 0.5.
    """

    low, high = np.quantile(channel, [clip_fraction, 1.0 - clip_fraction])
    if high - low <= 1e-9 * max(1.0, abs(float(low)), abs(float(high))):
        return np.full_like(channel, 0.5)
    return np.clip((channel - low) / (high - low), 0.0, 1.0)


def msrcr(img: Image, cfg: Optional[MsrcrConfig] = None) -> Image:
    """Multi-scale retinex with colour restoration followed by simplest colour balance."""

    cfg = cfg or MsrcrConfig()
    _require_rgb(img, "msrcr")
    if not img.linear_range:
        raise ParameterError("msrcr expects a linear-range image.")

    product = multiscale_retinex(img, cfg) * color_restoration(img, cfg)
    balanced = np.empty_like(product)
    for index in range(product.shape[0]):
        balanced[index] = simplest_color_balance(product[index], cfg.clip_fraction)
    return Image(balanced, linear_range=True)


def spectral_saliency(img: Image, smooth_sigma: float = 2.5) -> Image:
    """Spectral residual saliency map, min-max normalised to [0, 1]."""

    if smooth_sigma <= 0:
        raise ParameterError(f"smooth_sigma must be positive, got {smooth_sigma}.")
    if img.width < _MIN_SALIENCY_SIDE or img.height < _MIN_SALIENCY_SIDE:
        raise ShapeError(
            f"Saliency needs at least {_MIN_SALIENCY_SIDE}x{_MIN_SALIENCY_SIDE} pixels, "
            f"got {img.width}x{img.height}."
        )

    gray = to_grayscale(img) if img.channels == 3 else img
    if np.ptp(gray.data) == 0:
        return Image(np.zeros((1, img.height, img.width)))

    small_h = max(1, int(round(SALIENCY_WIDTH * img.height / img.width)))
    small = resize_bilinear(gray, SALIENCY_WIDTH, small_h).data[0]

    spectrum = np.fft.fft2(small)
    amplitude = np.abs(spectrum)
    log_amplitude = np.log1p(amplitude / (SPECTRUM_KNEE * amplitude.max()))
    residual = log_amplitude - ndimage.uniform_filter(log_amplitude, size=3, mode="wrap")
    saliency = np.abs(np.fft.ifft2(np.exp(residual + 1j * np.angle(spectrum)))) ** 2

    smoothed = gaussian_blur(Image(saliency, linear_range=False), smooth_sigma)
    full = resize_bilinear(smoothed, img.width, img.height).data[0]

    low, high = float(full.min()), float(full.max())
    if high - low <= 1e-12 * max(abs(high), 1e-300):
        return Image(np.zeros((1, img.height, img.width)))
    return Image(np.clip((full - low) / (high - low), 0.0, 1.0))


def fuse_saliency(msrcr_img: Image, saliency: Image, cfg: Optional[FusionConfig] = None) -> Image:
    """Convex blend ``alpha * saliency + (1 - alpha) * msrcr`` broadcast over channels."""

    cfg = cfg or FusionConfig()
    if msrcr_img.size != saliency.size:
        raise ShapeError(
            f"Saliency size {saliency.size} does not match image size {msrcr_img.size}."
        )
    if saliency.channels != 1:
        raise ShapeError(f"Saliency map must be single channel, got {saliency.channels}.")
    fused = cfg.alpha * saliency.data + (1.0 - cfg.alpha) * msrcr_img.data
    return Image(fused, linear_range=msrcr_img.linear_range and saliency.linear_range)


def enhance_image(
    img: Image,
    method: str,
    *,
    msrcr_cfg: Optional[MsrcrConfig] = None,
    fusion_cfg: Optional[FusionConfig] = None,
    saliency_cfg: Optional[SaliencyConfig] = None,
    zerodce_cfg: Optional[Any] = None,
) -> Image:
    """Run one of the enhancement methods exposed on the command line."""

    logger.debug("Enhancing %dx%d image with %s", img.width, img.height, method)
    if method == "msrcr":
        return msrcr(img, msrcr_cfg)
    if method == "msrcr+saliency":
        retinex = msrcr(img, msrcr_cfg)
        saliency_cfg = saliency_cfg or SaliencyConfig()
        saliency = spectral_saliency(retinex, saliency_cfg.smooth_sigma)
        return fuse_saliency(retinex, saliency, fusion_cfg)
    if method == "zerodce":
        from .zerodce import ZeroDceConfig, enhance_zerodce

        return enhance_zerodce(img, zerodce_cfg or ZeroDceConfig()).image
    raise ParameterError(f"Unknown enhancement method '{method}'. Choose from {ENHANCE_METHODS}.")


__all__ = [
    "ENHANCE_METHODS",
    "FusionConfig",
    "MsrcrConfig",
    "SaliencyConfig",
    "color_restoration",
    "enhance_image",
    "fuse_saliency",
    "msrcr",
    "multiscale_retinex",
    "simplest_color_balance",
    "spectral_saliency",
]
