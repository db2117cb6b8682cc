import numpy as np
import pytest
import torch

from countr.data import ImageSample
from countr.model import CounTR, ModelConfig


def make_sample(n_dots=10, H=64, W=80, seed=0, k=3, label="thing", split="train", image_id="s.png"):
    rng = np.random.default_rng(seed)
    dots = rng.uniform([0, 0], [W, H], size=(n_dots, 2))
    y1 = rng.uniform(0, H - 12, k)
    x1 = rng.uniform(0, W - 12, k)
    boxes = np.stack([y1, x1, y1 + 10, x1 + 10], 1) if k else np.zeros((0, 4))
    image = rng.random((H, W, 3)).astype(np.float32)
    return ImageSample(image=image, dots=dots, boxes=boxes, class_label=label, split=split,
                       image_id=image_id)


@pytest.fixture
def sample():
    return make_sample()


@pytest.fixture(scope="session")
def toy_model():
    torch.manual_seed(0)
    return CounTR(ModelConfig.toy()).eval()
