"""Synthetic counting datasets: coloured disks and squares on noise."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import ImageSample, read_image, save_image, write_annotations

COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "magenta": (0.9, 0.1, 0.85),
    "cyan": (0.1, 0.85, 0.9),
}
SHAPES = ("disk", "square")
CLASSES = tuple(f"{c}_{s}" for s in SHAPES for c in COLORS)
# disjoint class sets per split
SPLIT_CLASSES = {"train": CLASSES[:8], "val": CLASSES[8:10], "test": CLASSES[10:]}


def _place(rng, n, radius, H, W, taken, tries=200):
    """Rejection-sample n non-overlapping centres at least 2 * radius + 1 from all taken ones."""
    out = []
    for _ in range(n):
        for _ in range(tries):
            c = rng.uniform([radius, radius], [W - radius, H - radius])
            if all(np.hypot(*(c - t[:2])) >= radius + t[2] + 1 for t in taken):
                out.append(c)
                taken.append((c[0], c[1], radius))
                break
        else:
            return None
    return np.array(out).reshape(-1, 2)


def _stamp(image, centres, radius, shape, color):
    H, W = image.shape[:2]
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    for cx, cy in centres:
        if shape == "disk":
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
        else:
            mask = (np.abs(xx - cx) <= radius) & (np.abs(yy - cy) <= radius)
        image[mask] = color


def render_toy_image(rng: np.random.Generator, class_label: str, count: int, H: int, W: int,
                     distractors: int = 0, radius_range=(2.5, 5.0)):
    """Returns (image, dots, boxes) with exactly ``count`` target objects and 3 exemplar boxes."""
    color_name, shape = class_label.split("_")
    image = np.clip(0.45 + 0.12 * rng.standard_normal((H, W, 3)), 0, 1)
    radius = float(rng.uniform(*radius_range))
    while True:
        taken: list = []
        dots = _place(rng, count, radius, H, W, taken)
        if dots is not None:
            break
        radius *= 0.85
    _stamp(image, dots, radius, shape, COLORS[color_name])
    if distractors:
        other = CLASSES[(CLASSES.index(class_label) + 1 + int(rng.integers(len(CLASSES) - 1)))
                        % len(CLASSES)]
        oc, os_ = other.split("_")
        extra = _place(rng, distractors, radius, H, W, taken)
        if extra is not None:
            _stamp(image, extra, radius, os_, COLORS[oc])
    pick = rng.choice(count, size=min(3, count), replace=False)
    r = np.ceil(radius) + 0.5
    boxes = np.array([[dots[i, 1] - r, dots[i, 0] - r, dots[i, 1] + r, dots[i, 0] + r] for i in pick])
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, H)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, W)
    return image.astype(np.float32), dots, boxes


def toy_samples(n: int, objects_range=(7, 60), seed: int = 0, size=(128, 160),
                distractors: int = 0, split: str | None = None) -> list[ImageSample]:
    """In-memory toy samples (pixels quantised to 8 bits like the on-disk version)."""
    rng = np.random.default_rng(seed)
    lo, hi = objects_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad objects_range {objects_range}")
    H, W = size
    split_names = list(SPLIT_CLASSES)
    out = []
    for i in range(n):
        s = split or split_names[int(rng.choice(3, p=[0.7, 0.15, 0.15]))]
        label = str(rng.choice(SPLIT_CLASSES[s]))
        count = int(rng.integers(lo, hi + 1))
        image, dots, boxes = render_toy_image(rng, label, count, H, W, distractors)
        image = np.round(image * 255.0) / 255.0
        out.append(ImageSample(image=image, dots=dots, boxes=boxes, class_label=label,
                               split=s, image_id=f"toy_{i:05d}.png"))
    return out


def make_toy_data(n: int, objects_range=(7, 60), seed: int = 0, out_dir=".", size=(128, 160),
                  distractors: int = 2) -> list[ImageSample]:
    """Write a toy dataset: ``images/``, ``annotations.json`` and ``splits.json``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    samples = toy_samples(n, objects_range, seed, size, distractors)
    written = []
    for s in samples:
        path = out / "images" / s.image_id
        save_image(s.image, path)
        written.append(s.replace(image=read_image(path)))
    write_annotations(written, out / "annotations.json", out / "splits.json")
    (out / "toy_meta.json").write_text(json.dumps(
        {"n": n, "objects_range": list(objects_range), "seed": seed, "size": list(size),
         "distractors": distractors}, indent=1))
    return written
