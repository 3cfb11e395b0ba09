"""Count metrics, evaluation reports and density-map visualization."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataio import VideoSequence, encode_pgm
from .density import DensityMap, count, density_for_frame
from .errors import ConfigError, UsageError
from .regressor import ModelParams, forward_batch
from .tensor import Tensor, no_grad

VIZ_COMMENT = "density visualization: pixel = round(255 * value / max(value)), all-zero map -> 0"


def mae_mse(gt_counts: Sequence[float], pred_counts: Sequence[float]) -> tuple[float, float]:
    """Mean absolute error and root mean squared error of per-frame counts.

    The second value is named ``mse`` in reports but is the square root of
    the mean squared error, as is customary in crowd counting.
    """
    if len(gt_counts) == 0 or len(gt_counts) != len(pred_counts):
        raise UsageError(f"mae_mse needs equal non-empty inputs, got {len(gt_counts)} and {len(pred_counts)}")
    z = np.asarray(gt_counts, dtype=np.float64)
    zh = np.asarray(pred_counts, dtype=np.float64)
    d = z - zh
    return float(np.mean(np.abs(d))), float(math.sqrt(np.mean(d * d)))


@dataclass
class FrameResult:
    video_id: str
    frame: int
    gt: float
    pred: float


@dataclass
class EvalReport:
    frames: list[FrameResult] = field(default_factory=list)
    config: dict[str, str] = field(default_factory=dict)

    @property
    def mae(self) -> float:
        return mae_mse([f.gt for f in self.frames], [f.pred for f in self.frames])[0]

    @property
    def mse(self) -> float:
        return mae_mse([f.gt for f in self.frames], [f.pred for f in self.frames])[1]

    def per_video(self) -> dict[str, tuple[float, float]]:
        out = {}
        for vid in dict.fromkeys(f.video_id for f in self.frames):
            rows = [f for f in self.frames if f.video_id == vid]
            out[vid] = mae_mse([r.gt for r in rows], [r.pred for r in rows])
        return out

    def to_text(self) -> str:
        lines = [f"video {f.video_id} frame {f.frame} gt {f.gt!r} pred {f.pred!r}" for f in self.frames]
        lines.append(f"aggregate mae {self.mae!r} mse {self.mse!r}")
        return "\n".join(lines) + "\n"


def evaluate(model: ModelParams | None, dataset: Sequence[VideoSequence], sigma: float = 3.0,
             oracle: bool = False, batch: int = 16, config_echo: dict | None = None) -> EvalReport:
    """Count every frame of every video and compare with the annotated head count.

    With ``oracle`` the ground-truth density maps stand in for predictions
    (``model`` may then be ``None``); the downsample factor is taken from
    the model when present, else 1.
    """
    if not oracle and model is None:
        raise UsageError("evaluate needs a model unless oracle=True")
    D = model.config.downsample if model is not None else 1
    report = EvalReport(config=dict(config_echo or {}))
    for video in dataset:
        ann = video.annotation
        if ann.height % D or ann.width % D:
            raise ConfigError(f"video {video.video_id}: {ann.width}x{ann.height} frames not divisible "
                              f"by model downsample {D}")
        if oracle:
            preds = [count(density_for_frame(h, ann.height, ann.width, D, sigma, frame=t))
                     for t, h in enumerate(ann.frames)]
        else:
            frames = np.stack([np.asarray(f, dtype=np.float32).reshape(1, ann.height, ann.width)
                               for f in video.frames])
            preds = []
            with no_grad():
                for s in range(0, len(frames), batch):
                    out = forward_batch(model, frames[s:s + batch], training=False)
                    preds.extend(count(out.data[i]) for i in range(len(out)))
        for t, heads in enumerate(ann.frames):
            report.frames.append(FrameResult(video.video_id, t, float(len(heads)), preds[t]))
    return report


def viz_pixels(density) -> np.ndarray:
    """Map a density grid to uint8 with its maximum at 255."""
    grid = density.grid if isinstance(density, DensityMap) else density
    data = np.asarray(grid.data if isinstance(grid, Tensor) else grid, dtype=np.float64)
    data = data.reshape(data.shape[-2:])
    peak = data.max()
    if peak <= 0:
        return np.zeros(data.shape, dtype=np.uint8)
    return np.clip(np.round(255 * np.clip(data, 0, None) / peak), 0, 255).astype(np.uint8)


def export_density_viz(density, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(viz_pixels(density), VIZ_COMMENT))
