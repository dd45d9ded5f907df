"""Image file output: PNG (8-bit RGBA) with a PPM/PGM fallback.

Float-to-byte conversion uses round-half-to-even (np.rint) so repeated
runs produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, rgb: np.ndarray, alpha: np.ndarray | None = None):
    """Write rgb (H,W,3) [+ alpha (H,W)] floats in [0,1] to PNG or PPM."""
    path = Path(path)
    if alpha is None:
        alpha = np.ones(rgb.shape[:2])
    if path.suffix.lower() == ".ppm":
        _write_ppm(path, rgb)
        _write_pgm(path.with_suffix(".alpha.pgm"), alpha)
        return
    from PIL import Image

    rgba = np.dstack([to_uint8(rgb), to_uint8(alpha)])
    Image.fromarray(rgba, mode="RGBA").save(path)


def _write_ppm(path, rgb):
    data = to_uint8(rgb)
    with open(path, "wb") as f:
        f.write(f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def _write_pgm(path, gray):
    data = to_uint8(gray)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def read_image(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an image file to float rgb (H,W,3) and alpha (H,W) in [0,1]."""
    from PIL import Image

    img = np.asarray(Image.open(path).convert("RGBA"), dtype=np.float64) / 255.0
    return img[:, :, :3], img[:, :, 3]
