"""Counting error metrics and split-level evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .data import ImageSample
from .inference import InferenceConfig, predict_count

logger = logging.getLogger(__name__)


def _pairs(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    g = np.asarray(gts, dtype=np.float64).reshape(-1)
    if len(p) != len(g):
        raise ValueError(f"{len(p)} predictions but {len(g)} ground-truth counts")
    if len(p) == 0:
        raise ValueError("metrics need at least one image")
    return p, g


def mae(preds, gts) -> float:
    """Mean absolute counting error."""
    p, g = _pairs(preds, gts)
    return float(np.mean(np.abs(p - g)))


def rmse(preds, gts) -> float:
    """Root mean squared counting error."""
    p, g = _pairs(preds, gts)
    return float(np.sqrt(np.mean((p - g) ** 2)))


class ImageResult(NamedTuple):
    image_id: str
    predicted: float
    ground_truth: float
    error: float


@dataclass
class EvalResult:
    n_images: int
    per_image: list[ImageResult]
    mae: float
    rmse: float
    shots: int
    excluded_ids: list[str] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_image"] = [r._asdict() for r in self.per_image]
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ImageResult._fields)
            w.writerows(self.per_image)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        d = dict(d)
        d["per_image"] = [ImageResult(**r) for r in d["per_image"]]
        return cls(**d)


def read_exclude_list(path) -> list[str]:
    """One image id per line; blank lines and ``#`` comments are ignored."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line)
    return out


def evaluate_split(model, samples: Sequence[ImageSample], shots: int,
                   cfg: InferenceConfig | None = None, exclude_ids: Iterable[str] = (),
                   predict_fn: Callable | None = None) -> EvalResult:
    """Count every sample and aggregate MAE / RMSE.

    Excluded ids are dropped and listed; samples with fewer than ``shots``
    exemplars are skipped with a record. ``predict_fn(model, sample, shots,
    cfg) -> float`` overrides the standard prediction path.
    """
    cfg = cfg or InferenceConfig()
    exclude = set(exclude_ids)
    splits = {s.split for s in samples}
    if len(splits) > 1:
        raise ValueError(f"samples come from several splits: {sorted(splits)}")
    rows, skipped, excluded = [], [], []
    for s in samples:
        if s.image_id in exclude:
            excluded.append(s.image_id)
            continue
        if s.num_exemplars < shots:
            skipped.append({"image_id": s.image_id,
                            "reason": f"{s.num_exemplars} exemplars < {shots} shots"})
            logger.warning("skipping %s: only %d exemplars", s.image_id, s.num_exemplars)
            continue
        if predict_fn is not None:
            count = float(predict_fn(model, s, shots, cfg))
        else:
            count = predict_count(model, s, shots, cfg).count
        gt = float(s.count)
        rows.append(ImageResult(s.image_id, count, gt, count - gt))
    rows.sort(key=lambda r: r.image_id)
    if rows:
        m = mae([r.predicted for r in rows], [r.ground_truth for r in rows])
        r = rmse([r.predicted for r in rows], [r.ground_truth for r in rows])
    else:
        m = r = math.nan
    return EvalResult(len(rows), rows, m, r, shots, sorted(excluded), skipped)
