"""Mask data model and the post-processing chain from raw annotation PNGs to
clean binary masks.

Masks are plain 2D boolean numpy arrays of shape ``(height, width)``. Raw
images keep their channel axis explicitly so that gray, RGB and RGBA inputs
can be told apart after decoding.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

CHANNEL_COUNTS = (1, 3, 4)


class ImageError(Exception):
    """Raised when an image file cannot be loaded as an 8-bit PNG."""

    def __init__(self, kind: str, path: str | os.PathLike, detail: str = ""):
        self.kind = kind
        self.path = str(path)
        self.detail = detail
        msg = f"{kind}: {self.path}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class AlphaPolicy(str, Enum):
    IGNORE = "ignore"
    INCLUDE = "include"


@dataclass(frozen=True)
class RawImage:
    """Decoded 8-bit image with an explicit channel axis, shape ``(H, W, C)``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in CHANNEL_COUNTS:
            raise ValueError(f"pixels must be (H, W, C) with C in {CHANNEL_COUNTS}, got {px.shape}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError("image must have positive width and height")
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise ValueError("samples must fit in 8 bits")
            px = px.astype(np.uint8)
        px = px.copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def samples(self) -> np.ndarray:
        """Flat row-major sample sequence (pixel by pixel, channel by channel)."""
        return self.pixels.reshape(-1)


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray
    component_sizes: dict[int, int] = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def max_label(self) -> int:
        return len(self.component_sizes)


def as_mask(mask) -> np.ndarray:
    """Coerce an array-like to a 2D boolean mask, rejecting non-binary values."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2D (H, W), got shape {arr.shape}")
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    return arr.astype(bool)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "masks") -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"dimension mismatch between {what}: {a.shape[:2]} vs {b.shape[:2]}")


# --------------------------------------------------------------------------
# PNG I/O


def load_raw(path: str | os.PathLike) -> RawImage:
    """Decode an 8-bit PNG without altering its samples.

    Palette images are expanded to RGB (or RGBA when they carry transparency)
    and gray+alpha to RGBA, since neither maps onto the 1/3/4-channel model
    directly. 1-bit and 16-bit images are rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageError("file-missing", path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.format != "PNG":
                raise ImageError("decode-failure", path, f"not a PNG (format {img.format})")
            mode = img.mode
            if mode in ("L", "RGB", "RGBA"):
                arr = np.array(img, dtype=np.uint8)
            elif mode == "P":
                target = "RGBA" if "transparency" in img.info else "RGB"
                arr = np.array(img.convert(target), dtype=np.uint8)
            elif mode == "LA":
                arr = np.array(img.convert("RGBA"), dtype=np.uint8)
            else:
                raise ImageError("unsupported-bit-depth", path, f"mode {mode}")
    except ImageError:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types
        raise ImageError("decode-failure", path, str(exc)) from exc
    return RawImage(arr)


def save_raw(image: RawImage, path: str | os.PathLike) -> None:
    px = image.pixels
    mode = {1: "L", 3: "RGB", 4: "RGBA"}[image.channels]
    data = px[:, :, 0] if image.channels == 1 else px
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(data), mode=mode).save(path, format="PNG")


def save_gray(values: np.ndarray, path: str | os.PathLike) -> None:
    """Write a 2D uint8 array as an 8-bit gray PNG."""
    arr = np.ascontiguousarray(values, dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def save_mask(mask: np.ndarray, path: str | os.PathLike) -> None:
    """Write a mask as gray PNG, foreground 255 and background 0."""
    save_gray(as_mask(mask).astype(np.uint8) * 255, path)


def load_mask(path: str | os.PathLike) -> np.ndarray:
    """Read a mask written by :func:`save_mask`.

    The file must be single-channel with only the values 0 and 255.
    """
    raw = load_raw(path)
    if raw.channels != 1:
        raise ImageError("decode-failure", path, f"expected a gray mask, got {raw.channels} channels")
    values = raw.pixels[:, :, 0]
    if not np.isin(values, (0, 255)).all():
        raise ImageError("decode-failure", path, "mask contains values other than 0 and 255")
    return values == 255


# --------------------------------------------------------------------------
# post-processing


def _color_planes(px: np.ndarray, keep_alpha: bool) -> np.ndarray:
    """Return int16 planes for comparison; gray is replicated to three channels."""
    c = px.shape[2]
    if c == 1:
        planes = np.repeat(px, 3, axis=2)
    elif c == 3 or keep_alpha:
        planes = px
    else:
        planes = px[:, :, :3]
    return planes.astype(np.int16)


def subtract_background(raw: RawImage, background: RawImage, tolerance: int = 0) -> RawImage:
    """Zero every pixel of ``raw`` that matches ``background`` within ``tolerance``.

    A pixel matches when the largest per-channel absolute difference is at most
    ``tolerance``. With equal channel counts all channels are compared. When the
    counts differ, gray is read as equal R=G=B and alpha is only compared if
    both images have it. Non-matching pixels keep their original samples.
    """
    check_same_shape(raw.pixels, background.pixels, "annotation and background")
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    if raw.channels == background.channels:
        a = raw.pixels.astype(np.int16)
        b = background.pixels.astype(np.int16)
    else:
        both_alpha = raw.channels == 4 and background.channels == 4
        a = _color_planes(raw.pixels, both_alpha)
        b = _color_planes(background.pixels, both_alpha)
    diff = np.abs(a - b).max(axis=2)
    keep = diff > tolerance
    out = np.where(keep[:, :, None], raw.pixels, 0).astype(np.uint8)
    return RawImage(out)


def binarize(raw: RawImage, alpha_policy: AlphaPolicy | str = AlphaPolicy.IGNORE) -> np.ndarray:
    """Foreground wherever the sum of counted channels is positive."""
    policy = AlphaPolicy(alpha_policy)
    px = raw.pixels
    if raw.channels == 4 and policy is AlphaPolicy.IGNORE:
        px = px[:, :, :3]
    # all samples are non-negative, so sum > 0 is equivalent to any(sample > 0)
    return px.astype(np.uint32).sum(axis=2) > 0


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def connected_components(mask, connectivity: int = 8) -> LabelMap:
    """Label foreground components in raster order, labels 1..n."""
    mask = as_mask(mask)
    labels, n = ndimage.label(mask, structure=_structure(connectivity))
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    sizes = {i: int(counts[i]) for i in range(1, n + 1)}
    labels.flags.writeable = False
    return LabelMap(labels=labels, component_sizes=sizes)


def remove_speckles(mask, min_size: int = 2, connectivity: int = 8) -> np.ndarray:
    """Drop foreground components smaller than ``min_size`` pixels."""
    if min_size < 1:
        raise ValueError("min_size must be >= 1")
    mask = as_mask(mask)
    if min_size == 1:
        return mask.copy()
    labels, n = ndimage.label(mask, structure=_structure(connectivity))
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    keep = counts >= min_size
    keep[0] = False
    return keep[labels]


def postprocess(
    raw: RawImage,
    background: RawImage | None = None,
    *,
    tolerance: int = 0,
    alpha_policy: AlphaPolicy | str = AlphaPolicy.IGNORE,
    min_size: int = 2,
    connectivity: int = 8,
) -> np.ndarray:
    """Background removal, binarization and speckle removal, in that order."""
    if background is not None:
        raw = subtract_background(raw, background, tolerance)
    return remove_speckles(binarize(raw, alpha_policy), min_size, connectivity)
