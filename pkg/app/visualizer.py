import io
import os
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import matplotlib

matplotlib.use("Agg")
import numpy as np
from matplotlib import pyplot as plt
from PIL import Image

from app.errors import ParameterError
from app.range_image import RangeImage
from app.utils import atomic_write_bytes

INVALID_GRAY = 128
NO_CLASS_WHITE = (255, 255, 255)

# background, car, pedestrian, cyclist, then extras
CLASS_PALETTE = np.array(
    [
        [51, 51, 51],
        [230, 25, 25],
        [25, 204, 25],
        [25, 76, 230],
        [230, 204, 25],
        [204, 25, 204],
        [25, 204, 204],
        [242, 140, 25],
    ],
    dtype=np.uint8,
)


class Channel(str, Enum):
    range = "range"
    intensity = "intensity"
    validity = "validity"
    class_overlay = "class-overlay"


def _encode_netpbm(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(buf, format="PPM")
    return buf.getvalue()


def encode_pgm(gray: np.ndarray) -> bytes:
    """Binary PGM (P5) with maxval 255."""
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ParameterError(f"expected an H x W grid, got shape {gray.shape}")
    return _encode_netpbm(gray)


def encode_ppm(rgb: np.ndarray) -> bytes:
    """Binary PPM (P6) with maxval 255."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ParameterError(f"expected an H x W x 3 image, got shape {rgb.shape}")
    return _encode_netpbm(rgb)


def normalize(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Min-max scale the valid values to 0..255; invalid pixels become INVALID_GRAY."""
    out = np.full(values.shape, INVALID_GRAY, dtype=np.uint8)
    if not valid.any():
        return out
    v = values[valid]
    lo, hi = v.min(), v.max()
    if hi > lo:
        out[valid] = np.rint(255.0 * (v - lo) / (hi - lo)).astype(np.uint8)
    else:
        out[valid] = 255
    return out


def palette_colors(labels: np.ndarray) -> np.ndarray:
    """H x W x 3 colors; negative labels (no class) are white."""
    labels = np.asarray(labels, dtype=np.int64)
    colors = CLASS_PALETTE[np.maximum(labels, 0) % len(CLASS_PALETTE)]
    colors[labels < 0] = NO_CLASS_WHITE
    return colors


def render_range_bytes(
    img: RangeImage, channel: Channel, labels: Optional[np.ndarray] = None
) -> bytes:
    """
    Encode one channel of a range image: PGM for range/intensity/validity, PPM for class-overlay.

    Args:
        img (RangeImage): Image to render
        channel (Channel): Which channel
        labels (Optional[np.ndarray], optional): H x W class grid, required for class-overlay. Defaults to None.

    Raises:
        ParameterError: class-overlay without labels

    Returns:
        bytes: The encoded image
    """
    channel = Channel(channel)
    if channel == Channel.range:
        return encode_pgm(normalize(img.range, img.valid))
    if channel == Channel.intensity:
        return encode_pgm(normalize(img.intensity, img.valid))
    if channel == Channel.validity:
        return encode_pgm(np.where(img.valid, 255, INVALID_GRAY))

    if labels is None:
        raise ParameterError("class-overlay needs a label grid")
    colors = palette_colors(labels)
    colors[~img.valid] = INVALID_GRAY
    return encode_ppm(colors)


def render_range_image(
    img: RangeImage,
    channel: Channel,
    path: Union[str, os.PathLike],
    labels: Optional[np.ndarray] = None,
) -> Path:
    """
    Write a channel of a range image as PGM/PPM, atomically.

    Raises:
        OSError: If the path is not writable
    """
    return atomic_write_bytes(path, render_range_bytes(img, channel, labels))


def to_rgb8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def mark_points(rgb8: np.ndarray, points: np.ndarray, color=(255, 0, 0)) -> np.ndarray:
    """Copy of an 8-bit image with the nearest pixel of each (x, y) point painted."""
    out = np.array(rgb8, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]
    xy = np.rint(np.asarray(points, dtype=np.float64)).astype(np.int64).reshape(-1, 2)
    keep = (xy[:, 0] >= 0) & (xy[:, 0] < w) & (xy[:, 1] >= 0) & (xy[:, 1] < h)
    out[xy[keep, 1], xy[keep, 0]] = color
    return out


def plot_benchmark(rows) -> io.BytesIO:
    """
    Plot median fit+warp time against the number of control points and return the PNG buffer.

    Args:
        rows: Benchmark entries with control_count and median_ms; skipped entries are left out

    Returns:
        io.BytesIO: The buffer for the image
    """
    measured = [r for r in rows if r.median_ms is not None]
    fig, ax = plt.subplots()
    ax.plot(
        [r.control_count for r in measured], [r.median_ms for r in measured], marker="o"
    )
    ax.set_xlabel("control points")
    ax.set_ylabel("median fit + warp [ms]")
    ax.set_ylim(bottom=0)

    img_buf = io.BytesIO()
    plt.savefig(img_buf, format="png", bbox_inches="tight")
    plt.close(fig)

    return img_buf
