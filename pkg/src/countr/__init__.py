"""Class-agnostic object counting with a transformer density regressor."""

from .data import DensityMap, ImageSample, generate_density_map, load_annotations
from .estimator import CountingRegressor
from .evaluation import EvalResult, evaluate_split, mae, rmse
from .inference import InferenceConfig, Prediction, predict_count
from .model import CounTR, ModelConfig, load_model, save_checkpoint
from .mosaic import MosaicConfig, synthesize
from .training import PretrainConfig, TrainConfig, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "CounTR", "CountingRegressor", "DensityMap", "EvalResult", "ImageSample", "InferenceConfig",
    "ModelConfig", "MosaicConfig", "Prediction", "PretrainConfig", "TrainConfig",
    "evaluate_split", "finetune", "generate_density_map", "load_annotations", "load_model",
    "mae", "predict_count", "pretrain", "rmse", "save_checkpoint", "synthesize",
]
