"""Binary PPM (P6) frame dumps with boxes drawn in."""

from __future__ import annotations

from pathlib import Path

import numpy as np

GT_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 0)


def draw_box(img: np.ndarray, box, color) -> None:
    """Rasterize the outline of a (cx, cy, w, h) box in place on a uint8 (H, W, 3) image."""
    H, W = img.shape[:2]
    cx, cy, w, h = box
    x0, x1 = int(np.floor(cx - w / 2)), int(np.ceil(cx + w / 2)) - 1
    y0, y1 = int(np.floor(cy - h / 2)), int(np.ceil(cy + h / 2)) - 1
    xs = np.clip(np.arange(x0, x1 + 1), 0, W - 1)
    ys = np.clip(np.arange(y0, y1 + 1), 0, H - 1)
    for y in (y0, y1):
        if 0 <= y < H:
            img[y, xs] = color
    for x in (x0, x1):
        if 0 <= x < W:
            img[ys, x] = color


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    pos += 1   # single whitespace byte before the raster
    if fields[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    return np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)


def dump_frame(path: str | Path, image: np.ndarray, gt=None, pred=None) -> None:
    img = (np.clip(image, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    if gt is not None:
        draw_box(img, gt, GT_COLOR)
    if pred is not None:
        draw_box(img, pred, PRED_COLOR)
    Path(path).write_bytes(encode_ppm(img))
