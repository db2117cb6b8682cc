"""Sample-level augmentations.

Geometric transforms move dots and boxes with exactly the map applied to the
pixels, so density targets are regenerated afterwards rather than warped.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageSample, clamp_boxes, clamp_dots


def gaussian_noise(image: np.ndarray, rng: np.random.Generator, std: float = 0.03) -> np.ndarray:
    return np.clip(image + rng.normal(0.0, std, image.shape), 0.0, 1.0).astype(np.float32)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=torch.float32)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    k = k / k.sum()
    t = torch.from_numpy(np.array(image, dtype=np.float32)).permute(2, 0, 1)[:, None]
    t = F.pad(t, (radius, radius, radius, radius), mode="replicate")
    t = F.conv2d(t, k.view(1, 1, 1, -1))
    t = F.conv2d(t, k.view(1, 1, -1, 1))
    return t[:, 0].permute(1, 2, 0).numpy()


def color_jitter(image: np.ndarray, rng: np.random.Generator, strength: float = 0.2) -> np.ndarray:
    b, c, s = 1.0 + rng.uniform(-strength, strength, 3)
    out = image * b
    mean = out.mean()
    out = (out - mean) * c + mean
    gray = out.mean(axis=2, keepdims=True)
    out = (out - gray) * s + gray
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def hflip(sample: ImageSample) -> ImageSample:
    """Mirror left-right; pixel column j goes to W - 1 - j and x goes to W - x."""
    W = sample.width
    dots = sample.dots.copy()
    dots[:, 0] = W - dots[:, 0]
    boxes = sample.boxes.copy()
    boxes[:, [1, 3]] = W - sample.boxes[:, [3, 1]]
    return sample.replace(image=sample.pixels[:, ::-1].copy(),
                          dots=clamp_dots(dots, sample.height, W), boxes=boxes)


def _normalizer(H: int, W: int) -> np.ndarray:
    """Pixel (x, y) -> grid_sample coordinates with align_corners=False."""
    return np.array([[2.0 / W, 0, -1], [0, 2.0 / H, -1], [0, 0, 1]])


def random_affine_matrix(rng: np.random.Generator, H: int, W: int, max_rotation: float = 10.0,
                         scale_range=(0.9, 1.1), max_shift: float = 0.05) -> np.ndarray:
    """3x3 forward map on (x, y, 1) pixel coordinates, rotating/scaling about the centre."""
    angle = math.radians(rng.uniform(-max_rotation, max_rotation))
    s = rng.uniform(*scale_range)
    tx, ty = rng.uniform(-max_shift, max_shift, 2) * (W, H)
    cx, cy = W / 2, H / 2
    c, si = math.cos(angle) * s, math.sin(angle) * s
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]])
    rot = np.array([[c, -si, 0], [si, c, 0], [0, 0, 1]])
    back = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1]])
    return back @ rot @ to_origin


def warp_image(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply a forward pixel-space affine map to an (H, W, 3) image (bilinear, zero fill)."""
    H, W = image.shape[:2]
    n = _normalizer(H, W)
    theta = n @ np.linalg.inv(matrix) @ np.linalg.inv(n)
    t = torch.from_numpy(np.array(image, dtype=np.float32)).permute(2, 0, 1)[None]
    grid = F.affine_grid(torch.from_numpy(theta[:2]).float()[None], list(t.shape),
                         align_corners=False)
    out = F.grid_sample(t, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def transform_points(points: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    if len(points) == 0:
        return points.copy()
    homo = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    return (homo @ matrix.T)[:, :2]


def transform_boxes(boxes: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Axis-aligned hull of each transformed box."""
    if len(boxes) == 0:
        return boxes.copy()
    y1, x1, y2, x2 = boxes.T
    corners = np.stack([np.stack([x1, y1], 1), np.stack([x2, y1], 1),
                        np.stack([x1, y2], 1), np.stack([x2, y2], 1)], axis=1)
    moved = transform_points(corners.reshape(-1, 2), matrix).reshape(-1, 4, 2)
    return np.stack([moved[..., 1].min(1), moved[..., 0].min(1),
                     moved[..., 1].max(1), moved[..., 0].max(1)], axis=1)


def random_affine(sample: ImageSample, rng: np.random.Generator, tries: int = 5) -> ImageSample:
    """Small rotation/scale/shift that keeps every dot inside the image, else identity."""
    H, W = sample.height, sample.width
    for _ in range(tries):
        m = random_affine_matrix(rng, H, W)
        dots = transform_points(sample.dots, m)
        if len(dots) == 0 or ((dots >= 0).all() and (dots[:, 0] < W).all() and (dots[:, 1] < H).all()):
            return sample.replace(image=warp_image(sample.pixels, m), dots=dots,
                                  boxes=clamp_boxes(transform_boxes(sample.boxes, m), H, W))
    return sample


def augment_sample(sample: ImageSample, rng: np.random.Generator, noise=True, blur=True,
                   flip=True, color=True, geometric=True) -> ImageSample:
    """Apply each enabled augmentation with probability 1/2."""
    if geometric and rng.random() < 0.5:
        sample = random_affine(sample, rng)
    if flip and rng.random() < 0.5:
        sample = hflip(sample)
    image = sample.pixels
    changed = False
    if color and rng.random() < 0.5:
        image, changed = color_jitter(image, rng), True
    if blur and rng.random() < 0.5:
        image, changed = gaussian_blur(image, rng.uniform(0.1, 1.0)), True
    if noise and rng.random() < 0.5:
        image, changed = gaussian_noise(image, rng), True
    return sample.replace(image=image) if changed else sample
