"""Square crops around a box, resized to a fixed side, with the inverse coordinate map."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

MIN_SIDE_PX = 2.0


@dataclass(frozen=True)
class CropTransform:
    """Maps crop-normalized coordinates ([0, 1] over the output) to frame pixels."""

    x0: float
    y0: float
    side: float        # crop side in frame pixels

    def to_frame(self, box) -> np.ndarray:
        cx, cy, w, h = np.asarray(box, dtype=np.float64)
        return np.array([self.x0 + cx * self.side, self.y0 + cy * self.side,
                         w * self.side, h * self.side])

    def to_crop(self, box) -> np.ndarray:
        cx, cy, w, h = np.asarray(box, dtype=np.float64)
        return np.array([(cx - self.x0) / self.side, (cy - self.y0) / self.side,
                         w / self.side, h / self.side])


def clamp_box(box) -> np.ndarray:
    box = np.array(box, dtype=np.float64)
    if box[2] <= 1.0 or box[3] <= 1.0:
        log.warning("degenerate box %s clamped to %.0fpx", box, MIN_SIDE_PX)
        box[2] = max(box[2], MIN_SIDE_PX)
        box[3] = max(box[3], MIN_SIDE_PX)
    return box


def crop(image: np.ndarray, box, scale: float, out_size: int) -> tuple[np.ndarray, CropTransform]:
    """Crop a square of side ``scale * sqrt(w h)`` centered on ``box`` (cx, cy, w, h).

    Out-of-frame area is filled with the image's mean color; resampling is bilinear.
    """
    cx, cy, w, h = clamp_box(box)
    side = scale * np.sqrt(w * h)
    tf = CropTransform(cx - side / 2, cy - side / 2, side)
    return resample(image, tf, out_size), tf


def whole_frame(image: np.ndarray, out_size: int) -> tuple[np.ndarray, CropTransform]:
    """Whole frame as a search region (long edge resized to ``out_size``)."""
    H, W = image.shape[:2]
    side = float(max(H, W))
    tf = CropTransform(0.0, 0.0, side)
    if H == W == out_size:
        return image.astype(np.float32, copy=True), tf
    return resample(image, tf, out_size), tf


def resample(image: np.ndarray, tf: CropTransform, out_size: int) -> np.ndarray:
    step = tf.side / out_size
    centers = (np.arange(out_size) + 0.5) * step
    ys = tf.y0 + centers - 0.5
    xs = tf.x0 + centers - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    fill = image.reshape(-1, image.shape[-1]).mean(axis=0)
    out = np.empty((out_size, out_size, image.shape[-1]), dtype=np.float32)
    for c in range(image.shape[-1]):
        out[..., c] = ndimage.map_coordinates(image[..., c].astype(np.float64), [yy, xx], order=1,
                                              mode="constant", cval=float(fill[c]))
    return out
