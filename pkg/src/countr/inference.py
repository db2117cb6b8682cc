"""Sliding-window density prediction and exemplar-based count calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import DensityMap, ImageSample, as_box_array, resize_image, resize_to_height, to_tensor
from .model import crop_exemplars


@dataclass
class InferenceConfig:
    window: int = 384
    stride: int = 128
    ttnorm_threshold: float = 1.8
    ttcrop_min_side: float = 10.0
    resize_height: int = 384
    batch_size: int = 8

    def __post_init__(self):
        if not 0 < self.stride <= self.window:
            raise ValueError(f"stride must be in (0, window], got {self.stride}")
        if self.ttnorm_threshold <= 0 or self.ttcrop_min_side <= 0:
            raise ValueError("thresholds must be positive")
        if self.resize_height != self.window:
            raise ValueError("resize_height must equal the window size")

    @classmethod
    def toy(cls) -> "InferenceConfig":
        # same geometry as the defaults, scaled by 64/384
        return cls(window=64, stride=32, ttcrop_min_side=2.0, resize_height=64)


@dataclass
class Prediction:
    count: float
    density: DensityMap
    ttnorm_applied: bool = False
    ttcrop_applied: bool = False
    response: float | None = None

    def to_dict(self) -> dict:
        return {"count": self.count, "ttnorm_applied": self.ttnorm_applied,
                "ttcrop_applied": self.ttcrop_applied, "R": self.response}


def window_origins(width: int, window: int, stride: int) -> list[int]:
    """Left edges 0, stride, 2*stride, ... plus a right-aligned last window if needed."""
    if width <= window:
        return [0]
    origins = list(range(0, width - window + 1, stride))
    if origins[-1] + window < width:
        origins.append(width - window)
    return origins


def _grid(density) -> np.ndarray:
    return density.grid if isinstance(density, DensityMap) else np.asarray(density)


def _image_tensor(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image if image.shape[0] == 3 else image.permute(2, 0, 1)
    return to_tensor(image)


@torch.no_grad()
def sliding_window_predict(model, image, exemplars=None, cfg: InferenceConfig | None = None) -> DensityMap:
    """Predict a full-width density by averaging overlapping square windows.

    ``image`` is (H, W, 3) or (3, H, W) with H equal to the window size;
    ``exemplars`` are pre-cut crops (K, 3, r, r) or None. Images narrower than
    the window are zero-padded on the right and the padding is discarded.
    """
    cfg = cfg or InferenceConfig()
    img = _image_tensor(image).float()
    _, H, W = img.shape
    win = cfg.window
    if H != win:
        raise ValueError(f"image height {H} must equal the window size {win}")
    padded = W < win
    if padded:
        img = F.pad(img, (0, win - W))
    width = img.shape[-1]
    origins = window_origins(width, win, cfg.stride)

    total = np.zeros((H, width), dtype=np.float64)
    cover = np.zeros(width, dtype=np.float64)
    ex = None
    if exemplars is not None and len(exemplars):
        ex = exemplars.float()[None]
    for i in range(0, len(origins), cfg.batch_size):
        chunk = origins[i:i + cfg.batch_size]
        batch = torch.stack([img[:, :, x:x + win] for x in chunk])
        ex_b = ex.expand(len(chunk), *ex.shape[1:]) if ex is not None else None
        out = model(batch, ex_b).detach().double().cpu().numpy()
        for x, d in zip(chunk, out):
            total[:, x:x + win] += d
            cover[x:x + win] += 1
    grid = total / cover
    return DensityMap(grid[:, :W], "prediction")


def _box_slices(box, H: int, W: int):
    y1, x1, y2, x2 = (int(math.floor(v + 0.5)) for v in box)
    return slice(min(max(y1, 0), H), min(max(y2, 0), H)), slice(min(max(x1, 0), W), min(max(x2, 0), W))


def exemplar_response(density, boxes) -> float:
    """Mean density mass inside the exemplar boxes (edges rounded, half-open)."""
    grid = _grid(density)
    boxes = as_box_array(boxes)
    if len(boxes) == 0:
        raise ValueError("exemplar_response needs at least one box")
    H, W = grid.shape
    masses = [float(np.sum(grid[_box_slices(b, H, W)], dtype=np.float64)) for b in boxes]
    return float(np.mean(masses))


def tt_normalize(density, boxes, threshold: float = 1.8) -> float:
    """Count, divided by the exemplar response when that response exceeds ``threshold``."""
    total = float(np.sum(_grid(density), dtype=np.float64))
    r = exemplar_response(density, boxes)
    if r > threshold and r > 0:
        return total / r
    return total


def needs_tt_crop(boxes, min_side: float) -> bool:
    boxes = as_box_array(boxes)
    if len(boxes) == 0:
        return False
    sides = np.minimum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])
    return bool(sides.min() < min_side)


def _exemplar_crops(model, image, boxes) -> torch.Tensor | None:
    boxes = as_box_array(boxes)
    if len(boxes) == 0:
        return None
    res = getattr(getattr(model, "config", None), "exemplar_resolution", 64)
    return crop_exemplars(_image_tensor(image).float(), boxes, res)


def _predict_normalized(model, image, boxes, crops, cfg: InferenceConfig) -> Prediction:
    density = sliding_window_predict(model, image, crops, cfg)
    if len(boxes) == 0:
        return Prediction(density.count, density)
    r = exemplar_response(density, boxes)
    count = tt_normalize(density, boxes, cfg.ttnorm_threshold)
    applied = r > cfg.ttnorm_threshold and r > 0
    if applied:
        density = DensityMap(density.grid / r, "prediction")
    return Prediction(count, density, ttnorm_applied=applied, response=r)


def split_bounds(n: int, parts: int = 3) -> list[tuple[int, int]]:
    edges = [round(i * n / parts) for i in range(parts + 1)]
    return list(zip(edges[:-1], edges[1:]))


def _tt_crop(model, image: np.ndarray, boxes, cfg: InferenceConfig, count_fn=None) -> Prediction:
    H, W = image.shape[:2]
    boxes = as_box_array(boxes)
    crops = _exemplar_crops(model, image, boxes)
    stitched = np.zeros((H, W))
    total = 0.0
    any_norm = False
    for r0, r1 in split_bounds(H):
        for c0, c1 in split_bounds(W):
            piece = resize_image(image[r0:r1, c0:c1], H, W)
            sy, sx = H / (r1 - r0), W / (c1 - c0)
            pboxes = (boxes - np.array([r0, c0, r0, c0])) * np.array([sy, sx, sy, sx])
            pboxes = pboxes[(pboxes[:, 2] > 0) & (pboxes[:, 0] < H)
                            & (pboxes[:, 3] > 0) & (pboxes[:, 1] < W)]
            if count_fn is not None:
                count = float(count_fn(piece, pboxes))
                total += count
                continue
            pred = _predict_normalized(model, piece, pboxes, crops, cfg)
            any_norm |= pred.ttnorm_applied
            total += pred.count
            small = F.interpolate(torch.from_numpy(pred.density.grid)[None, None],
                                  size=(r1 - r0, c1 - c0), mode="area")[0, 0].numpy()
            mass = small.sum()
            stitched[r0:r1, c0:c1] = small * (pred.count / mass) if mass != 0 else small
    return Prediction(total, DensityMap(stitched, "prediction"), ttnorm_applied=any_norm,
                      ttcrop_applied=True)


def tt_crop_predict(model, image, boxes, cfg: InferenceConfig | None = None, count_fn=None) -> float:
    """Sum of counts over a 3x3 split, each piece upscaled to the full size.

    Exemplar crops come from the unsplit image; the boxes, mapped into each
    piece, are only used for per-piece normalisation. ``count_fn(piece,
    piece_boxes)`` replaces the per-piece pipeline when given.
    """
    cfg = cfg or InferenceConfig()
    img = image if isinstance(image, np.ndarray) else _image_tensor(image).permute(1, 2, 0).numpy()
    return _tt_crop(model, img, boxes, cfg, count_fn).count


def predict_count(model, sample: ImageSample, shots: int, cfg: InferenceConfig | None = None) -> Prediction:
    """Count objects in ``sample`` using its first ``shots`` exemplar boxes."""
    cfg = cfg or InferenceConfig()
    if not 0 <= shots <= 3:
        raise ValueError(f"shots must be in 0..3, got {shots}")
    if shots > sample.num_exemplars:
        raise ValueError(f"{sample.image_id}: {shots} shots requested, {sample.num_exemplars} available")
    resized = resize_to_height(sample, cfg.resize_height)
    image = resized.pixels
    boxes = resized.boxes[:shots]
    if shots >= 1 and needs_tt_crop(boxes, cfg.ttcrop_min_side):
        return _tt_crop(model, image, boxes, cfg)
    crops = _exemplar_crops(model, image, boxes)
    return _predict_normalized(model, image, boxes, crops, cfg)
