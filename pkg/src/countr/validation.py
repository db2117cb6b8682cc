"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

from collections.abc import Iterable

from .data import ImageSample


def check_samples(X, min_samples: int = 1) -> list[ImageSample]:
    """Return ``X`` as a list of ImageSample, raising on anything else."""
    if isinstance(X, ImageSample):
        X = [X]
    if not isinstance(X, Iterable) or isinstance(X, (str, bytes)):
        raise TypeError(f"expected a sequence of ImageSample, got {type(X).__name__}")
    samples = list(X)
    bad = [type(s).__name__ for s in samples if not isinstance(s, ImageSample)]
    if bad:
        raise TypeError(f"expected ImageSample items, got {sorted(set(bad))}")
    if len(samples) < min_samples:
        raise ValueError(f"need at least {min_samples} sample(s), got {len(samples)}")
    return samples


def check_shots(shots: int, samples=()) -> int:
    if not isinstance(shots, int) or not 0 <= shots <= 3:
        raise ValueError(f"shots must be an integer in 0..3, got {shots!r}")
    short = [s.image_id for s in samples if s.num_exemplars < shots]
    if short:
        raise ValueError(f"{len(short)} sample(s) have fewer than {shots} exemplars, "
                         f"e.g. {short[0]!r}")
    return shots


def parse_boxes(text: str) -> list[list[float]]:
    """Parse ``"y1,x1,y2,x2;y1,x1,y2,x2"`` into at most three boxes."""
    text = (text or "").strip()
    if not text:
        return []
    boxes = []
    for part in text.split(";"):
        vals = [float(v) for v in part.split(",")]
        if len(vals) != 4:
            raise ValueError(f"box {part!r} needs four comma-separated numbers")
        y1, x1, y2, x2 = vals
        if not (y1 < y2 and x1 < x2):
            raise ValueError(f"box {part!r} must satisfy y1 < y2 and x1 < x2")
        boxes.append(vals)
    if len(boxes) > 3:
        raise ValueError(f"at most 3 boxes allowed, got {len(boxes)}")
    return boxes
