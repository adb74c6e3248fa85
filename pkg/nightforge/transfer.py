"""Normal-to-dark domain transfer: darkening, sensor-like noise and retinex re-enhancement."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .enhance import MsrcrConfig, msrcr
from .errors import ParameterError, ShapeError
from .imgcore import Image

logger = logging.getLogger(__name__)


class DarkenConfig(BaseModel):
    """Sampling ranges of the darkening curve and the noise coefficients.

    ``seed`` left as ``None`` defers to the pipeline-wide seed.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    gamma_range: Tuple[float, float] = (2.0, 3.5)
    scale_range: Tuple[float, float] = (0.1, 0.35)
    sigma_read: float = Field(default=0.02, ge=0.0)
    sigma_shot: float = Field(default=0.06, ge=0.0)
    seed: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "DarkenConfig":
        g_lo, g_hi = self.gamma_range
        if not 1.0 <= g_lo <= g_hi:
            raise ValueError("gamma_range must satisfy 1 <= lo <= hi")
        s_lo, s_hi = self.scale_range
        if not 0.0 < s_lo <= s_hi <= 1.0:
            raise ValueError("scale_range must satisfy 0 < lo <= hi <= 1")
        return self


@dataclass
class TransferResult:
    image: Image
    dark: Image
    gamma: float
    scale: float
    stream_seed: int


def derive_stream(seed: int, index: int) -> Tuple[np.random.Generator, int]:
    """Per-image generator keyed only on (seed, index), plus the derived integer seed."""

    if seed < 0 or index < 0:
        raise ParameterError(f"seed and index must be non-negative, got {seed}, {index}.")
    stream_seed = int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])
    return np.random.default_rng(stream_seed), stream_seed


def _require_linear(img: Image, operation: str) -> None:
    if not img.linear_range:
        raise ParameterError(f"{operation} expects a linear-range image in [0, 1].")


def darken(img: Image, gamma: float, scale: float) -> Image:
    """``scale * v ** gamma`` per channel."""

    if not gamma >= 1.0:
        raise ParameterError(f"gamma must be >= 1, got {gamma}.")
    if not 0.0 < scale <= 1.0:
        raise ParameterError(f"scale must lie in (0, 1], got {scale}.")
    _require_linear(img, "darken")
    return Image(scale * np.power(img.data, gamma), linear_range=True)


def sample_noise(img: Image, cfg: DarkenConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw the heteroscedastic noise field, planar-shaped like ``img.data``.

    Draws are taken row-major with the channel varying fastest.
    """

    hwc = img.to_hwc()
    std = np.sqrt(cfg.sigma_shot**2 * np.clip(hwc, 0.0, None) + cfg.sigma_read**2)
    noise = rng.normal(0.0, 1.0, size=hwc.shape) * std
    return np.transpose(noise, (2, 0, 1))


def add_noise(img: Image, cfg: DarkenConfig, rng: np.random.Generator) -> Image:
    _require_linear(img, "add_noise")
    return Image(np.clip(img.data + sample_noise(img, cfg, rng), 0.0, 1.0), linear_range=True)


def transfer_pipeline(
    img: Image,
    cfg: Optional[DarkenConfig] = None,
    msrcr_cfg: Optional[MsrcrConfig] = None,
    image_index: int = 0,
    *,
    seed: int = 0,
) -> TransferResult:
    """Darken, add noise and re-enhance one image with parameters drawn from its own stream."""

    cfg = cfg or DarkenConfig()
    if img.channels != 3:
        raise ShapeError(f"transfer_pipeline expects an RGB image, got {img.channels} channel(s).")
    _require_linear(img, "transfer_pipeline")

    rng, stream_seed = derive_stream(cfg.seed if cfg.seed is not None else seed, image_index)
    gamma = float(rng.uniform(*cfg.gamma_range))
    scale = float(rng.uniform(*cfg.scale_range))
    dark = add_noise(darken(img, gamma, scale), cfg, rng)
    logger.debug(
        "Image %d darkened with gamma %.4f scale %.4f (mean %.4f)", image_index, gamma, scale, dark.mean()
    )
    return TransferResult(
        image=msrcr(dark, msrcr_cfg),
        dark=dark,
        gamma=gamma,
        scale=scale,
        stream_seed=stream_seed,
    )


def format_manifest_line(image_path: str, result: TransferResult) -> str:
    return f"{image_path}\t{result.gamma:.6f}\t{result.scale:.6f}\t{result.stream_seed}"


def write_manifest(path: Union[str, Path], rows: Iterable[Tuple[str, TransferResult]]) -> Path:
    """Write ``image_path<TAB>gamma<TAB>scale<TAB>seed`` lines in the given order."""

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    lines = [format_manifest_line(image_path, result) for image_path, result in rows]
    target.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return target


__all__ = [
    "DarkenConfig",
    "TransferResult",
    "add_noise",
    "darken",
    "derive_stream",
    "format_manifest_line",
    "sample_noise",
    "transfer_pipeline",
    "write_manifest",
]
