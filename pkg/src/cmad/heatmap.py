"""Heatmap PNG export for anomaly maps.

PNGs use palette mode: the stored pixel value is the 8-bit quantized score
index and the palette renders a fixed perceptually-uniform colormap, so maps
are invertible to within quantization given the raw min/max embedded in the
PNG text metadata.
"""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

COLORMAP = "magma"


@lru_cache(maxsize=1)
def _palette() -> bytes:
    import matplotlib

    cmap = matplotlib.colormaps[COLORMAP]
    lut = (np.asarray(cmap(np.linspace(0, 1, 256)))[:, :3] * 255).round().astype(np.uint8)
    return lut.tobytes()


def save_heatmap(path: str | Path, raw: np.ndarray) -> None:
    raw = np.asarray(raw, dtype=np.float32)
    lo = float(raw.min())
    hi = float(raw.max())
    span = hi - lo if hi > lo else 1.0
    idx = np.round((raw - lo) / span * 255.0).astype(np.uint8)
    img = Image.fromarray(idx, mode="P")
    img.putpalette(_palette())
    meta = PngInfo()
    meta.add_text("raw_min", repr(lo))
    meta.add_text("raw_max", repr(hi))
    img.save(path, pnginfo=meta)


def load_heatmap(path: str | Path) -> np.ndarray:
    """Invert a heatmap PNG back to raw scores (8-bit quantized)."""
    img = Image.open(path)
    lo = float(img.text["raw_min"])
    hi = float(img.text["raw_max"])
    idx = np.asarray(img, dtype=np.float32)
    span = hi - lo if hi > lo else 1.0
    return lo + idx / 255.0 * span
