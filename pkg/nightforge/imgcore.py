"""Image container, PNG codec, colour and resampling primitives, Gaussian filtering."""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from io import BytesIO
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage, signal, sparse

from .errors import DecodeError, ParameterError, RangeError, ShapeError, UnsupportedFormatError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

# ITU-R BT.601 luma weights.
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

# Radii above this use the FFT path in ``gaussian_blur(method="auto")``.
_DIRECT_RADIUS_LIMIT = 32


@dataclass(frozen=True)
class Image:
    """Planar floating point raster, ``data`` shaped (channels, height, width)."""

    data: np.ndarray
    linear_range: bool = True

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[np.newaxis]
        if data.ndim != 3 or data.shape[0] not in (1, 3):
            raise ShapeError(f"Image data must be (1|3, H, W), got shape {data.shape}.")
        if data.shape[1] < 1 or data.shape[2] < 1:
            raise ShapeError("Image dimensions must be at least 1x1.")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    def mean(self) -> float:
        return float(self.data.mean())

    def clamp(self) -> "Image":
        """Return a copy clipped to [0, 1] and flagged as linear range."""

        return Image(np.clip(self.data, 0.0, 1.0), linear_range=True)

    def to_hwc(self) -> np.ndarray:
        return np.transpose(self.data, (1, 2, 0))

    @classmethod
    def from_hwc(cls, array: np.ndarray, *, linear_range: bool = True) -> "Image":
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 2:
            return cls(array, linear_range=linear_range)
        return cls(np.transpose(array, (2, 0, 1)), linear_range=linear_range)

    @classmethod
    def full(cls, width: int, height: int, value: float, *, channels: int = 3) -> "Image":
        return cls(np.full((channels, height, width), float(value)))


@dataclass(frozen=True)
class KernelSpec:
    """Truncated, normalised 1-D Gaussian used by every blur in the package."""

    sigma: float

    def __post_init__(self) -> None:
        if not self.sigma > 0 or not math.isfinite(self.sigma):
            raise ParameterError(f"Gaussian sigma must be positive, got {self.sigma}.")

    @property
    def radius(self) -> int:
        return int(math.ceil(3.0 * self.sigma))

    def weights(self) -> np.ndarray:
        offsets = np.arange(-self.radius, self.radius + 1, dtype=np.float64)
        weights = np.exp(-(offsets**2) / (2.0 * self.sigma**2))
        return weights / weights.sum()


def _walk_png_chunks(payload: bytes) -> Tuple[int, int, int, int]:
    if len(payload) < len(PNG_SIGNATURE) or payload[: len(PNG_SIGNATURE)] != PNG_SIGNATURE:
        raise DecodeError("Missing PNG signature", offset=0)

    offset = len(PNG_SIGNATURE)
    header: Tuple[int, int, int, int] | None = None
    while True:
        if offset + 8 > len(payload):
            raise DecodeError("Truncated chunk header", offset=offset)
        length, chunk_type = struct.unpack(">I4s", payload[offset : offset + 8])
        end = offset + 8 + length + 4
        if end > len(payload):
            raise DecodeError(f"Truncated {chunk_type!r} chunk", offset=offset)
        body = payload[offset + 8 : offset + 8 + length]
        (crc,) = struct.unpack(">I", payload[end - 4 : end])
        if zlib.crc32(chunk_type + body) & 0xFFFFFFFF != crc:
            raise DecodeError(f"CRC mismatch in {chunk_type!r} chunk", offset=offset)

        if header is None:
            if chunk_type != b"IHDR" or length != 13:
                raise DecodeError("First chunk must be a 13-byte IHDR", offset=offset)
            width, height, bit_depth, color_type = struct.unpack(">IIBB", body[:10])
            if width == 0 or height == 0:
                raise DecodeError("Zero image dimension in IHDR", offset=offset)
            header = (width, height, bit_depth, color_type)
        elif chunk_type == b"IEND":
            return header
        offset = end


def decode_png(payload: bytes) -> Image:
    """Decode an 8-bit grayscale or RGB PNG into a linear-range ``Image``."""

    width, height, bit_depth, color_type = _walk_png_chunks(payload)
    if bit_depth != 8:
        raise UnsupportedFormatError(f"Only 8-bit PNG is supported, got bit depth {bit_depth}.")
    if color_type not in (0, 2):
        raise UnsupportedFormatError(
            f"Only grayscale (0) or RGB (2) PNG is supported, got color type {color_type}."
        )

    try:
        with PILImage.open(BytesIO(payload)) as pil:
            pil.load()
            codes = np.asarray(pil, dtype=np.uint8)
    except (OSError, SyntaxError, ValueError, zlib.error) as exc:
        first_idat = max(payload.find(b"IDAT") - 4, len(PNG_SIGNATURE))
        raise DecodeError(f"Corrupt image data: {exc}", offset=first_idat) from exc

    if codes.shape[:2] != (height, width):  # pragma: no cover - Pillow honours IHDR
        raise DecodeError("Decoded size disagrees with IHDR", offset=len(PNG_SIGNATURE))
    return Image.from_hwc(codes.astype(np.float64) / 255.0, linear_range=True)


def encode_png(img: Image) -> bytes:
    """Encode ``img`` as an 8-bit PNG using round-half-up quantisation."""

    if not img.linear_range:
        raise RangeError("Cannot encode an image outside the linear range; clamp it first.")
    codes = np.floor(np.clip(img.data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if img.channels == 1:
        pil = PILImage.fromarray(codes[0])
    else:
        pil = PILImage.fromarray(np.ascontiguousarray(np.transpose(codes, (1, 2, 0))))
    buffer = BytesIO()
    pil.save(buffer, format="PNG")
    return buffer.getvalue()


def read_png(path: Union[str, Path]) -> Image:
    return decode_png(Path(path).read_bytes())


def write_png(path: Union[str, Path], img: Image) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_png(img))


def to_grayscale(img: Image) -> Image:
    """Collapse an RGB image to BT.601 luma."""

    if img.channels != 3:
        raise ShapeError(f"to_grayscale expects 3 channels, got {img.channels}.")
    r, g, b = img.data
    gray = GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b
    if img.linear_range:
        gray = np.clip(gray, 0.0, 1.0)
    return Image(gray, linear_range=img.linear_range)


def _box_blur_widths(sigma: float, passes: int) -> Tuple[int, int, int]:
    # Kovesi, "Fast Almost-Gaussian Filtering": m passes of width w_l, the rest w_u.
    w_ideal = math.sqrt(12.0 * sigma**2 / passes + 1.0)
    w_l = int(math.floor(w_ideal))
    if w_l % 2 == 0:
        w_l -= 1
    w_u = w_l + 2
    m = (12.0 * sigma**2 - passes * w_l**2 - 4 * passes * w_l - 3 * passes) / (-4 * w_l - 4)
    return int(round(m)), w_l, w_u


def _blur_axis(data: np.ndarray, spec: KernelSpec, axis: int, method: str) -> np.ndarray:
    weights = spec.weights()
    if method == "direct":
        return ndimage.correlate1d(data, weights, axis=axis, mode="nearest")
    if method == "fft":
        radius = spec.radius
        pad = [(0, 0)] * data.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(data, pad, mode="edge")
        shape = [1] * data.ndim
        shape[axis] = weights.size
        return signal.fftconvolve(padded, weights.reshape(shape), mode="valid", axes=axis)
    if method == "box":
        m, w_l, w_u = _box_blur_widths(spec.sigma, 3)
        m = min(max(m, 0), 3)
        out = data
        for width in [w_l] * m + [w_u] * (3 - m):
            out = ndimage.uniform_filter1d(out, width, axis=axis, mode="nearest")
        return out
    raise ParameterError(f"Unknown blur method '{method}'.")


def gaussian_blur(img: Image, sigma: float, *, method: str = "auto") -> Image:
    """Separable Gaussian blur with edge replication.

    ``direct`` is the reference correlation, ``fft`` evaluates the same truncated kernel in the
    frequency domain (exact up to rounding, fast for large sigma) and ``box`` is the
    three-pass box approximation. ``auto`` picks ``direct`` or ``fft`` by kernel radius.
    """

    spec = KernelSpec(float(sigma))
    if method == "auto":
        method = "direct" if spec.radius <= _DIRECT_RADIUS_LIMIT else "fft"
    out = _blur_axis(img.data, spec, axis=2, method=method)
    out = _blur_axis(out, spec, axis=1, method=method)
    return Image(out, linear_range=img.linear_range)


def bilinear_weights(n_in: int, n_out: int) -> sparse.csr_matrix:
    """Return the ``n_out x n_in`` half-pixel-centre bilinear resampling operator."""

    if n_in < 1 or n_out < 1:
        raise ParameterError(f"Resampling sizes must be >= 1, got {n_in} -> {n_out}.")
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lower = np.floor(src).astype(np.int64)
    upper = np.minimum(lower + 1, n_in - 1)
    frac = src - lower
    rows = np.concatenate([np.arange(n_out), np.arange(n_out)])
    cols = np.concatenate([lower, upper])
    vals = np.concatenate([1.0 - frac, frac])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))


def resize_factors(img: Image, new_w: int, new_h: int) -> Tuple[float, float]:
    """Scale factors (x, y) that map box coordinates into the resized frame."""

    return new_w / img.width, new_h / img.height


def resize_bilinear(img: Image, new_w: int, new_h: int) -> Image:
    if new_w < 1 or new_h < 1:
        raise ParameterError(f"Target size must be at least 1x1, got {new_w}x{new_h}.")
    if (new_w, new_h) == img.size:
        return img
    rows = bilinear_weights(img.height, new_h)
    cols = bilinear_weights(img.width, new_w)
    out = np.empty((img.channels, new_h, new_w), dtype=np.float64)
    for channel in range(img.channels):
        vertical = rows @ img.data[channel]
        out[channel] = (cols @ vertical.T).T
    return Image(out, linear_range=img.linear_range)


__all__ = [
    "Image",
    "KernelSpec",
    "bilinear_weights",
    "decode_png",
    "encode_png",
    "gaussian_blur",
    "read_png",
    "resize_bilinear",
    "resize_factors",
    "to_grayscale",
    "write_png",
]
