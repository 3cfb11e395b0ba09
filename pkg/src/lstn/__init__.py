"""Video crowd counting: density maps, a small conv regressor and block-wise spatial transformers."""
from .density import DensityMap, HeadAnnotation, count, rasterize_density
from .errors import LSTNError
from .evaluation import EvalReport, evaluate, mae_mse
from .lst import BlockGrid, affine_grid, bilinear_sample, block_similarity, lst_loss, warp
from .regressor import ModelParams, RegressorConfig, forward, init_model
from .tensor import Tensor, no_grad, precision
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BlockGrid", "DensityMap", "EvalReport", "HeadAnnotation", "LSTNError", "ModelParams",
    "RegressorConfig", "Tensor", "TrainConfig", "affine_grid", "bilinear_sample",
    "block_similarity", "count", "evaluate", "forward", "init_model", "load_checkpoint",
    "lst_loss", "mae_mse", "no_grad", "precision", "rasterize_density", "save_checkpoint",
    "train", "warp",
]
