"""Mosaic synthesis of dense / distractor-rich training images.

A mosaic is a 2x2 collage of square crops. Neighbouring quadrants overlap by a
fixed margin and are cross-faded along each internal seam with a linear alpha
ramp. Only pixels are blended; dot annotations are remapped exactly and a dot
is kept whenever its quadrant still contributes (alpha > 0) at its position.

Quadrant order throughout is top-left, top-right, bottom-left, bottom-right.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .data import ImageSample, resize_image

logger = logging.getLogger(__name__)

TYPE_A = "A"
TYPE_B = "B"
FEW_SHOT = frozenset({1, 2, 3})
ANY_SHOT = frozenset({0, 1, 2, 3})


class MosaicError(ValueError):
    pass


class CropBox(NamedTuple):
    """Square region ``[y0, y0 + side) x [x0, x0 + side)``."""
    y0: int
    x0: int
    side: int


@dataclass
class MosaicConfig:
    output_size: int = 384
    crop_fraction_range: tuple[float, float] = (0.25, 0.5)
    blend_border_range: tuple[int, int] = (4, 20)
    type_threshold: int = 70
    rng_seed: int = 0
    max_retries: int = 10

    def __post_init__(self):
        self.crop_fraction_range = tuple(self.crop_fraction_range)
        self.blend_border_range = tuple(self.blend_border_range)
        lo, hi = self.crop_fraction_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_fraction_range must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        blo, bhi = self.blend_border_range
        if not 0 <= blo <= bhi or bhi >= self.output_size / 8:
            raise ValueError(
                f"blend_border_range must satisfy 0 <= lo <= hi < output_size/8, got {(blo, bhi)}")
        if self.output_size % 2:
            raise ValueError("output_size must be even")

    @property
    def margin(self) -> int:
        """Overlap each quadrant extends past the canvas centre lines."""
        return math.ceil(self.blend_border_range[1] / 2)

    @property
    def quadrant_size(self) -> int:
        return self.output_size // 2 + self.margin


@dataclass
class MosaicResult:
    sample: ImageSample
    source_ids: list[str]
    mosaic_type: str
    usable_shots: frozenset
    crops: list[CropBox] = field(default_factory=list)
    borders: tuple[int, int] = (0, 0)


def select_mosaic_type(object_count: int, threshold: int) -> str:
    """One-image collage (B) for dense images, four-image collage (A) otherwise."""
    if object_count < 0:
        raise ValueError("object_count must be non-negative")
    return TYPE_B if object_count > threshold else TYPE_A


def crop_and_scale(sample: ImageSample, crop_box, target: int):
    """Crop a square region and resize it to ``target`` x ``target``.

    Dots are kept on the half-open region and mapped by the crop-then-scale
    affine map; exemplar boxes are kept only if fully inside the crop.
    """
    y0, x0, side = crop_box
    if side <= 0 or y0 < 0 or x0 < 0 or y0 + side > sample.height or x0 + side > sample.width:
        raise ValueError(f"crop {tuple(crop_box)} outside {sample.height}x{sample.width} image")
    scale = target / side
    patch = resize_image(sample.pixels[y0:y0 + side, x0:x0 + side], target, target)

    d = sample.dots
    inside = (d[:, 0] >= x0) & (d[:, 0] < x0 + side) & (d[:, 1] >= y0) & (d[:, 1] < y0 + side)
    dots = np.minimum((d[inside] - np.array([x0, y0])) * scale, np.nextafter(target, 0))

    b = sample.boxes
    keep = (b[:, 0] >= y0) & (b[:, 1] >= x0) & (b[:, 2] <= y0 + side) & (b[:, 3] <= x0 + side)
    boxes = (b[keep] - np.array([y0, x0, y0, x0])) * scale
    return patch, dots, boxes


def seam_alpha(n: int, center: int, width: int) -> np.ndarray:
    """Weight of the far-side (right/bottom) quadrant at each of ``n`` pixels.

    The ramp goes linearly from 0 to 1 over ``width`` pixel steps starting at
    ``center - width // 2``; for even widths the pixel at ``center`` gets 0.5.
    """
    pos = np.arange(n, dtype=np.float64)
    if width == 0:
        return (pos >= center).astype(np.float64)
    start = center - width // 2
    return np.clip((pos - start) / width, 0.0, 1.0)


def _visible_limits(center: int, width: int) -> tuple[int, int]:
    """(near_end, far_start): near side visible below near_end, far side from far_start."""
    if width == 0:
        return center, center
    start = center - width // 2
    return start + width, start + 1


def quadrant_offsets(output_size: int, quadrant_size: int) -> list[tuple[int, int]]:
    far = output_size - quadrant_size
    return [(0, 0), (0, far), (far, 0), (far, far)]


def blend_borders(quadrants: Sequence[np.ndarray], border_widths, output_size: int) -> np.ndarray:
    """Collage four equal square patches with linear alpha seams.

    ``border_widths`` is (vertical seam, horizontal seam) in pixels, or one int
    for both. Each patch side must be ``output_size // 2 + margin`` with the
    margin at least half of each seam width.
    """
    if len(quadrants) != 4:
        raise ValueError("need exactly four quadrants")
    bv, bh = (border_widths, border_widths) if np.isscalar(border_widths) else border_widths
    P = quadrants[0].shape[0]
    half = output_size // 2
    margin = P - half
    if margin < 0 or any(q.shape[:2] != (P, P) for q in quadrants):
        raise ValueError("quadrants must be equal squares of at least output_size/2")
    if max(math.ceil(bv / 2), math.ceil(bh / 2)) > margin:
        raise ValueError(f"border widths {(bv, bh)} exceed the {margin}px overlap margin")

    ax = seam_alpha(output_size, half, bv)
    ay = seam_alpha(output_size, half, bh)
    wx = (1.0 - ax, ax)
    wy = (1.0 - ay, ay)
    out = np.zeros((output_size, output_size, quadrants[0].shape[2]), dtype=np.float64)
    for q, (oy, ox) in enumerate(quadrant_offsets(output_size, P)):
        r, c = divmod(q, 2)
        w = np.outer(wy[r][oy:oy + P], wx[c][ox:ox + P])
        out[oy:oy + P, ox:ox + P] += w[..., None] * quadrants[q]
    return out.astype(np.float32)


def _visible_mask(points: np.ndarray, quadrant: int, half: int, borders) -> np.ndarray:
    """Which canvas points (x, y) fall where ``quadrant`` has non-zero weight."""
    bv, bh = borders
    r, c = divmod(quadrant, 2)
    near_x, far_x = _visible_limits(half, bv)
    near_y, far_y = _visible_limits(half, bh)
    x, y = points[:, 0], points[:, 1]
    okx = x < near_x if c == 0 else x >= far_x
    oky = y < near_y if r == 0 else y >= far_y
    return okx & oky


def _random_crop(rng: np.random.Generator, sample: ImageSample, cfg: MosaicConfig,
                 must_contain=None) -> CropBox:
    short = min(sample.height, sample.width)
    lo, hi = cfg.crop_fraction_range
    side = int(np.clip(round(rng.uniform(lo, hi) * short), 1, short))
    if must_contain is not None:
        y1, x1, y2, x2 = must_contain
        side = max(side, min(short, math.ceil(max(y2 - y1, x2 - x1))))
        ylo, yhi = max(0, math.ceil(y2) - side), min(int(math.floor(y1)), sample.height - side)
        xlo, xhi = max(0, math.ceil(x2) - side), min(int(math.floor(x1)), sample.width - side)
        if ylo <= yhi and xlo <= xhi:
            return CropBox(int(rng.integers(ylo, yhi + 1)), int(rng.integers(xlo, xhi + 1)), side)
    y0 = int(rng.integers(0, sample.height - side + 1))
    x0 = int(rng.integers(0, sample.width - side + 1))
    return CropBox(y0, x0, side)


def _sample_borders(rng: np.random.Generator, cfg: MosaicConfig) -> tuple[int, int]:
    lo, hi = cfg.blend_border_range
    return int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))


def _collage(sources: Sequence[ImageSample], crops: Sequence[CropBox], borders, cfg: MosaicConfig):
    """Build the blended canvas and per-quadrant visible dots / boxes in canvas coordinates."""
    P = cfg.quadrant_size
    half = cfg.output_size // 2
    patches, dots, boxes = [], [], []
    for q, ((oy, ox), src, crop) in enumerate(zip(quadrant_offsets(cfg.output_size, P), sources, crops)):
        patch, d, b = crop_and_scale(src, crop, P)
        d = d + np.array([ox, oy])
        d = d[_visible_mask(d, q, half, borders)]
        b = b + np.array([oy, ox, oy, ox])
        patches.append(patch)
        dots.append(d)
        boxes.append(b)
    image = blend_borders(patches, borders, cfg.output_size)
    return image, dots, boxes


def _rng(cfg: MosaicConfig, rng) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(cfg.rng_seed)


def mosaic_type_b(sample: ImageSample, cfg: MosaicConfig, rng=None, crops=None,
                  borders=None) -> MosaicResult:
    """Collage four random crops of the same image."""
    if sample.count < 1:
        raise MosaicError(f"{sample.image_id}: type-B mosaic needs at least one dot")
    rng = _rng(cfg, rng)
    for attempt in range(cfg.max_retries):
        crops_q = list(crops) if crops is not None else [_random_crop(rng, sample, cfg) for _ in range(4)]
        borders_q = tuple(borders) if borders is not None else _sample_borders(rng, cfg)
        image, dots, boxes = _collage([sample] * 4, crops_q, borders_q, cfg)
        exemplars = np.concatenate(boxes)[:3]
        if len(exemplars) or crops is not None:
            break
    all_dots = np.concatenate(dots)
    out = sample.replace(
        image=image, dots=all_dots, boxes=exemplars,
        image_id=f"mosaicB_{sample.image_id}", split="train",
    )
    return MosaicResult(out, [sample.image_id] * 4, TYPE_B, ANY_SHOT, crops_q, borders_q)


def mosaic_type_a(samples: Sequence[ImageSample], target_index: int, cfg: MosaicConfig,
                  rng=None, crops=None, borders=None) -> MosaicResult:
    """Collage crops of four images of distinct classes; only the target quadrant is labelled."""
    if len(samples) != 4:
        raise MosaicError("type-A mosaic needs exactly four samples")
    labels = [s.class_label for s in samples]
    if len(set(labels)) != 4:
        raise MosaicError(f"type-A mosaic needs four distinct classes, got {labels}")
    if not 0 <= target_index < 4:
        raise MosaicError(f"target_index must be in 0..3, got {target_index}")
    rng = _rng(cfg, rng)
    target = samples[target_index]
    for attempt in range(cfg.max_retries):
        if crops is not None:
            crops_q = list(crops)
        else:
            crops_q = []
            for q, s in enumerate(samples):
                anchor = None
                if q == target_index and s.num_exemplars:
                    anchor = s.boxes[rng.integers(s.num_exemplars)]
                crops_q.append(_random_crop(rng, s, cfg, must_contain=anchor))
        borders_q = tuple(borders) if borders is not None else _sample_borders(rng, cfg)
        image, dots, boxes = _collage(samples, crops_q, borders_q, cfg)
        if len(boxes[target_index]):
            break
        if crops is not None:
            raise MosaicError("fixed target crop contains no exemplar box")
    else:
        raise MosaicError(
            f"{target.image_id}: no exemplar box inside the target crop after {cfg.max_retries} tries")
    out = target.replace(
        image=image, dots=dots[target_index], boxes=boxes[target_index][:3],
        image_id="mosaicA_" + "+".join(s.image_id for s in samples), split="train",
    )
    return MosaicResult(out, [s.image_id for s in samples], TYPE_A, FEW_SHOT, crops_q, borders_q)


def _pick_distractors(rng, samples, target_idx, k=3):
    """Indices of k samples whose classes differ from the target and from each other."""
    used = {samples[target_idx].class_label}
    picked = []
    for i in rng.permutation(len(samples)):
        if samples[i].class_label not in used:
            used.add(samples[i].class_label)
            picked.append(int(i))
            if len(picked) == k:
                return picked
    return None


def synthesize(samples: Sequence[ImageSample], n: int, cfg: MosaicConfig, kind: str = "auto"):
    """Generate ``n`` mosaics. Returns (results, errors); each task has its own seed stream."""
    kind = kind.upper()
    if kind not in ("A", "B", "AUTO"):
        raise ValueError(f"unknown mosaic type {kind!r}")
    if not samples:
        raise ValueError("no source samples")
    results, errors = [], []
    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(n)
    for i, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        t = int(rng.integers(len(samples)))
        target = samples[t]
        mtype = select_mosaic_type(target.count, cfg.type_threshold) if kind == "AUTO" else kind
        try:
            if mtype == TYPE_A:
                others = _pick_distractors(rng, samples, t)
                if others is None:
                    if kind == "A":
                        raise MosaicError("fewer than four distinct classes available")
                    logger.info("task %d: not enough classes for type A, using type B", i)
                    mtype = TYPE_B
                else:
                    pos = int(rng.integers(4))
                    group = others[:pos] + [t] + others[pos:]
                    results.append(mosaic_type_a([samples[j] for j in group], pos, cfg, rng))
                    continue
            results.append(mosaic_type_b(target, cfg, rng))
        except MosaicError as exc:
            errors.append((i, str(exc)))
            logger.warning("mosaic task %d failed: %s", i, exc)
    return results, errors
