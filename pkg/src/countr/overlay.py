"""Heat-map overlays of predicted density on the input image."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .data import DensityMap


def jet(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to RGB with the classic blue-cyan-yellow-red ramp."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    centres = np.array([3.0, 2.0, 1.0])  # r, g, b
    return np.clip(1.5 - np.abs(4.0 * v - centres), 0.0, 1.0)


def overlay_array(image: np.ndarray, density, alpha: float = 0.5) -> np.ndarray:
    grid = density.grid if isinstance(density, DensityMap) else np.asarray(density)
    if grid.shape != image.shape[:2]:
        raise ValueError(f"density {grid.shape} does not match image {image.shape[:2]}")
    lo, hi = float(grid.min()), float(grid.max())
    norm = (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid, dtype=np.float64)
    return (1.0 - alpha) * np.asarray(image, dtype=np.float64) + alpha * jet(norm)


def render_overlay(image: np.ndarray, density, out_path, alpha: float = 0.5) -> None:
    """Write the min-max normalised density, alpha-blended over ``image``, as a PNG."""
    blended = overlay_array(image, density, alpha)
    arr = np.clip(np.rint(blended * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(out_path, format="PNG", optimize=False, compress_level=6)
