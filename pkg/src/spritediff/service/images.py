"""PNG interchange: tensors in [-1, 1] map linearly to 8-bit, plus montage
tiling and base64 transport helpers."""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image


def to_uint8(img):
    """(C,H,W) or (H,W) in [-1,1] -> uint8."""
    arr = np.clip((np.asarray(img, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8)


def from_uint8(u8):
    return (np.asarray(u8, dtype=np.float32) / 255.0) * 2.0 - 1.0


def encode_png(img):
    """(C,H,W) in [-1,1] (or (H,W) for masks) -> PNG bytes."""
    u8 = to_uint8(img)
    if u8.ndim == 3:
        u8 = u8.transpose(1, 2, 0)
        mode = "RGB"
    else:
        mode = "L"
    buf = io.BytesIO()
    Image.fromarray(u8, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data):
    """PNG bytes -> (C,H,W) float32 in [-1,1] (RGB) or (H,W) for grayscale."""
    img = Image.open(io.BytesIO(data))
    arr = np.asarray(img)
    if arr.ndim == 3:
        return from_uint8(arr[..., :3].transpose(2, 0, 1))
    return from_uint8(arr)


def save_png(path, img):
    with open(path, "wb") as fh:
        fh.write(encode_png(img))


def load_png(path):
    with open(path, "rb") as fh:
        return decode_png(fh.read())


def png_b64(img):
    return base64.b64encode(encode_png(img)).decode("ascii")


def b64_png(data):
    return decode_png(base64.b64decode(data))


def mask_to_png_bytes(mask):
    """Binary (H,W) mask in {0,1} -> 8-bit grayscale PNG (0 or 255)."""
    u8 = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    buf = io.BytesIO()
    Image.fromarray(u8, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_mask(data):
    arr = np.asarray(Image.open(io.BytesIO(data)).convert("L"))
    return (arr > 127).astype(np.float32)


def montage(images, rows, cols, pad=1, fill=-1.0):
    """Tile (N,C,H,W) into one (C, rows*(H+pad)-pad, cols*(W+pad)-pad) image."""
    images = np.asarray(images)
    n, c, h, w = images.shape
    if rows * cols < n:
        raise ValueError(f"grid {rows}x{cols} too small for {n} images")
    out = np.full((c, rows * (h + pad) - pad, cols * (w + pad) - pad), fill,
                  dtype=images.dtype)
    for k in range(min(n, rows * cols)):
        r, cc = divmod(k, cols)
        out[:, r * (h + pad):r * (h + pad) + h, cc * (w + pad):cc * (w + pad) + w] = images[k]
    return out
