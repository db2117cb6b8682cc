"""Annotated samples, annotation ingestion and ground-truth density maps."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MAX_EXEMPLARS = 3
DEFAULT_SIGMA = 4.0
KERNEL_RADIUS = 4.0  # in units of sigma

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DMAP_MAGIC = b"DMAP"
_DMAP_HEADER = struct.Struct("<4sIII")


class AnnotationError(ValueError):
    """Raised for malformed annotation documents."""


class DotAnnotation(NamedTuple):
    x: float
    y: float


class ExemplarBox(NamedTuple):
    y1: float
    x1: float
    y2: float
    x2: float

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def width(self) -> float:
        return self.x2 - self.x1


def as_dot_array(dots) -> np.ndarray:
    """Coerce dots (array, list of pairs, list of DotAnnotation) to an (N, 2) xy array."""
    arr = np.asarray(dots, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 2))
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"dots must have shape (N, 2), got {arr.shape}")
    return arr


def as_box_array(boxes) -> np.ndarray:
    """Coerce boxes to a (K, 4) array in (y1, x1, y2, x2) order."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4))
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"boxes must have shape (K, 4), got {arr.shape}")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def read_image(path) -> np.ndarray:
    """Load an RGB image as float32 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


@dataclass(frozen=True, eq=False)
class ImageSample:
    """One image with its dot annotations and exemplar boxes.

    ``dots`` is an (N, 2) array of (x, y) pixel coordinates and ``boxes`` a
    (K, 4) array of (y1, x1, y2, x2). When ``image`` is None the pixels are
    read from ``image_path`` on first access.
    """

    image: np.ndarray | None
    dots: np.ndarray
    boxes: np.ndarray
    class_label: str = ""
    split: str = "train"
    image_id: str = ""
    image_path: str | None = None
    size: tuple[int, int] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.image is None:
            if self.image_path is None:
                raise ValueError("either image or image_path is required")
            if self.size is None:
                with Image.open(self.image_path) as im:
                    object.__setattr__(self, "size", (im.height, im.width))
        else:
            img = np.asarray(self.image, dtype=np.float32)
            if img.ndim != 3 or img.shape[2] != 3:
                raise ValueError(f"image must be (H, W, 3), got {img.shape}")
            object.__setattr__(self, "image", _frozen(img))
            object.__setattr__(self, "size", img.shape[:2])
        object.__setattr__(self, "dots", _frozen(as_dot_array(self.dots)))
        object.__setattr__(self, "boxes", _frozen(as_box_array(self.boxes)))

    @property
    def pixels(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        return read_image(self.image_path)

    @property
    def height(self) -> int:
        return self.size[0]

    @property
    def width(self) -> int:
        return self.size[1]

    @property
    def count(self) -> int:
        return len(self.dots)

    @property
    def num_exemplars(self) -> int:
        return len(self.boxes)

    @property
    def dot_annotations(self) -> list[DotAnnotation]:
        return [DotAnnotation(float(x), float(y)) for x, y in self.dots]

    @property
    def exemplars(self) -> list[ExemplarBox]:
        return [ExemplarBox(*map(float, b)) for b in self.boxes]

    def replace(self, **changes) -> "ImageSample":
        fields = dict(
            image=self.image, dots=self.dots, boxes=self.boxes,
            class_label=self.class_label, split=self.split,
            image_id=self.image_id, image_path=self.image_path, size=self.size,
        )
        fields.update(changes)
        if "image" in changes and changes["image"] is not None:
            fields["size"] = None
            fields["image_path"] = None
        return ImageSample(**fields)


@dataclass(frozen=True, eq=False)
class DensityMap:
    grid: np.ndarray
    provenance: str = "ground_truth"

    def __post_init__(self):
        if self.provenance not in ("ground_truth", "prediction"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        grid = np.asarray(self.grid)
        if grid.ndim != 2:
            raise ValueError(f"density grid must be 2-D, got {grid.shape}")
        object.__setattr__(self, "grid", grid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def count(self) -> float:
        return float(np.sum(self.grid, dtype=np.float64))

    def save(self, path) -> None:
        save_density_map(self, path)


def _kernel_1d(centers: np.ndarray, n: int, sigma: float) -> np.ndarray:
    """Row-normalised truncated Gaussian weights, one row per center, over n pixels."""
    pix = np.arange(n, dtype=np.float64) + 0.5
    d = pix[None, :] - centers[:, None]
    w = np.exp(-0.5 * (d / sigma) ** 2)
    w[np.abs(d) > KERNEL_RADIUS * sigma] = 0.0
    # the pixel containing the dot is always within the radius, so rows never sum to 0
    return w / w.sum(axis=1, keepdims=True)


def generate_density_map(dots, H: int, W: int, sigma: float = DEFAULT_SIGMA) -> DensityMap:
    """Sum of one unit-mass Gaussian per dot, evaluated at pixel centres.

    Each kernel is truncated to a square window of half-width ``4 * sigma``
    and renormalised inside the image, so the grid sums to the dot count even
    for dots on the border. The kernel is separable, which turns the whole map
    into one (H, N) @ (N, W) product.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    pts = as_dot_array(dots)
    if len(pts) == 0:
        return DensityMap(np.zeros((H, W)))
    bad = (pts[:, 0] < 0) | (pts[:, 0] >= W) | (pts[:, 1] < 0) | (pts[:, 1] >= H)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"{int(bad.sum())} dot(s) outside the {H}x{W} image, first is #{i} at "
            f"(x={pts[i, 0]}, y={pts[i, 1]})"
        )
    gy = _kernel_1d(pts[:, 1], H, sigma)
    gx = _kernel_1d(pts[:, 0], W, sigma)
    return DensityMap(gy.T @ gx)


def save_density_map(density: DensityMap | np.ndarray, path) -> None:
    grid = density.grid if isinstance(density, DensityMap) else np.asarray(density)
    H, W = grid.shape
    with open(path, "wb") as fh:
        fh.write(_DMAP_HEADER.pack(DMAP_MAGIC, H, W, 0))
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def load_density_map(path, provenance: str = "ground_truth") -> DensityMap:
    raw = Path(path).read_bytes()
    if len(raw) < _DMAP_HEADER.size:
        raise ValueError(f"{path}: truncated density map header")
    magic, H, W, _ = _DMAP_HEADER.unpack_from(raw)
    if magic != DMAP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = raw[_DMAP_HEADER.size:]
    if len(body) != 4 * H * W:
        raise ValueError(f"{path}: expected {4 * H * W} payload bytes, got {len(body)}")
    grid = np.frombuffer(body, dtype="<f4").reshape(H, W).astype(np.float32)
    return DensityMap(grid, provenance)


def resize_image(image: np.ndarray, new_H: int, new_W: int) -> np.ndarray:
    """Bilinear resize of an (H, W, 3) float image."""
    if image.shape[:2] == (new_H, new_W):
        return np.array(image, dtype=np.float32)
    t = torch.from_numpy(np.array(image, dtype=np.float32)).permute(2, 0, 1)[None]
    shrink = new_H < image.shape[0] or new_W < image.shape[1]
    out = F.interpolate(t, size=(new_H, new_W), mode="bilinear", align_corners=False,
                        antialias=shrink)
    return out[0].permute(1, 2, 0).clamp_(0, 1).numpy()


def clamp_dots(dots: np.ndarray, H: int, W: int) -> np.ndarray:
    out = np.array(dots, dtype=np.float64)
    if len(out):
        out[:, 0] = np.clip(out[:, 0], 0.0, np.nextafter(W, 0))
        out[:, 1] = np.clip(out[:, 1], 0.0, np.nextafter(H, 0))
    return out


def clamp_boxes(boxes: np.ndarray, H: int, W: int) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64)
    if len(out):
        out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0.0, H)
        out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0.0, W)
    return out


def rescale_sample(sample: ImageSample, new_H: int, new_W: int) -> ImageSample:
    """Resize the image bilinearly and scale dots and boxes to match."""
    if new_H < 16 or new_W < 16:
        raise ValueError(f"target size must be at least 16x16, got {new_H}x{new_W}")
    H, W = sample.height, sample.width
    if (H, W) == (new_H, new_W):
        return sample.replace(image=sample.pixels)
    sy, sx = new_H / H, new_W / W
    dots = sample.dots * np.array([sx, sy])
    boxes = sample.boxes * np.array([sy, sx, sy, sx])
    return sample.replace(
        image=resize_image(sample.pixels, new_H, new_W),
        dots=clamp_dots(dots, new_H, new_W),
        boxes=clamp_boxes(boxes, new_H, new_W),
    )


def resize_to_height(sample: ImageSample, height: int) -> ImageSample:
    """Rescale so the image is ``height`` rows tall, keeping the aspect ratio."""
    new_W = max(16, int(round(sample.width * height / sample.height)))
    return rescale_sample(sample, height, new_W)


class LoadError(NamedTuple):
    image_id: str
    message: str


class SampleList(list):
    """A list of samples that also carries per-sample load failures."""

    def __init__(self, samples: Iterable[ImageSample] = (), errors=None):
        super().__init__(samples)
        self.errors: list[LoadError] = list(errors or [])


def _read_json(path, what: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: malformed {what} JSON: {exc}") from exc


def _parse_boxes(key: str, entry: dict) -> np.ndarray:
    if "boxes" in entry:
        raw = entry["boxes"]
        try:
            return as_box_array(raw)
        except ValueError as exc:
            raise AnnotationError(f"{key}: bad 'boxes': {exc}") from exc
    if "box_examples_coordinates" in entry:
        # native FSC-147 layout: four (x, y) corners per box
        out = []
        for corners in entry["box_examples_coordinates"]:
            c = np.asarray(corners, dtype=np.float64)
            if c.ndim != 2 or c.shape[1] != 2:
                raise AnnotationError(f"{key}: bad 'box_examples_coordinates' entry {corners!r}")
            out.append([c[:, 1].min(), c[:, 0].min(), c[:, 1].max(), c[:, 0].max()])
        return as_box_array(out)
    return np.zeros((0, 4))


def parse_entry(key: str, entry) -> tuple[np.ndarray, np.ndarray, str | None]:
    if not isinstance(entry, dict):
        raise AnnotationError(f"{key}: entry must be an object, got {type(entry).__name__}")
    if "points" not in entry:
        raise AnnotationError(f"{key}: missing 'points'")
    try:
        dots = as_dot_array(entry["points"])
    except (ValueError, TypeError) as exc:
        raise AnnotationError(f"{key}: bad 'points': {exc}") from exc
    boxes = _parse_boxes(key, entry)
    label = entry.get("class")
    if label is not None and not isinstance(label, str):
        raise AnnotationError(f"{key}: 'class' must be a string")
    return dots, boxes, label


def read_classes_file(path) -> dict[str, str]:
    """Parse FSC-147's ``ImageClasses`` text file (``filename<TAB>class`` lines)."""
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            name, _, label = line.partition("\t")
            out[name.strip()] = label.strip()
    return out


def load_annotations(path, images_dir, split_file=None, split: str | None = None,
                     classes_file=None, lazy: bool = False) -> SampleList:
    """Read an annotation document into samples.

    ``path`` maps image filename to ``{points, boxes, class}``; FSC-147's
    corner-point ``box_examples_coordinates`` are accepted as well. With a
    ``split_file`` only the listed files are loaded (optionally one split);
    without one every entry is loaded and tagged by its ``split`` key, default
    ``train``. Missing images become entries of ``result.errors``.
    """
    annotations = _read_json(path, "annotation")
    if not isinstance(annotations, dict):
        raise AnnotationError(f"{path}: top level must be an object")
    classes = read_classes_file(classes_file) if classes_file else {}

    if split_file is not None:
        splits = _read_json(split_file, "split")
        if not isinstance(splits, dict):
            raise AnnotationError(f"{split_file}: top level must be an object")
        wanted = [split] if split else [s for s in SPLITS if s in splits]
        listing = []
        for s in wanted:
            if s not in SPLITS:
                raise AnnotationError(f"{split_file}: unknown split {s!r}")
            names = splits.get(s, [])
            if not isinstance(names, list):
                raise AnnotationError(f"{split_file}: split {s!r} must be a list")
            listing += [(name, s) for name in names]
    else:
        listing = []
        for name, entry in annotations.items():
            tag = entry.get("split", "train") if isinstance(entry, dict) else "train"
            if split is None or tag == split:
                listing.append((name, tag))

    images_dir = Path(images_dir)
    result = SampleList()
    for name, tag in listing:
        if name not in annotations:
            result.errors.append(LoadError(name, "listed in split file but not annotated"))
            continue
        dots, boxes, label = parse_entry(name, annotations[name])
        img_path = images_dir / name
        if not img_path.is_file():
            result.errors.append(LoadError(name, f"image file not found: {img_path}"))
            logger.warning("skipping %s: image file not found", name)
            continue
        try:
            if lazy:
                with Image.open(img_path) as im:
                    H, W = im.height, im.width
                image = None
            else:
                image = read_image(img_path)
                H, W = image.shape[:2]
        except OSError as exc:
            result.errors.append(LoadError(name, f"unreadable image: {exc}"))
            continue
        result.append(ImageSample(
            image=image,
            dots=clamp_dots(dots, H, W),
            boxes=clamp_boxes(boxes[:MAX_EXEMPLARS], H, W),
            class_label=label if label is not None else classes.get(name, ""),
            split=tag,
            image_id=name,
            image_path=str(img_path),
            size=(H, W),
        ))
    return result


def write_annotations(samples: Sequence[ImageSample], path, split_path=None) -> None:
    """Write samples in the annotation schema (and optionally a split file)."""
    doc = {
        s.image_id: {
            "points": s.dots.tolist(),
            "boxes": s.boxes.tolist(),
            "class": s.class_label,
        }
        for s in samples
    }
    Path(path).write_text(json.dumps(doc))
    if split_path is not None:
        splits = {k: [] for k in SPLITS}
        for s in samples:
            splits[s.split].append(s.image_id)
        Path(split_path).write_text(json.dumps(splits, indent=1))


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def normalize_image(image: torch.Tensor, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> torch.Tensor:
    """Per-channel standardisation of a (..., 3, H, W) tensor."""
    m = torch.tensor(mean, dtype=image.dtype, device=image.device).view(3, 1, 1)
    s = torch.tensor(std, dtype=image.dtype, device=image.device).view(3, 1, 1)
    return (image - m) / s


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) array -> (3, H, W) float tensor."""
    return torch.from_numpy(np.array(image, dtype=np.float32)).permute(2, 0, 1)
