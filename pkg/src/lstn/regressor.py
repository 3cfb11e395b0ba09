"""Convolutional density regressor and the shared trainable parameter set."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .density import DensityMap
from .errors import ConfigError, DimensionError
from .optim import AdamState
from .tensor import Tensor, default_dtype, reshape, stack, tsum

IDENTITY_THETA = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass
class RegressorConfig:
    channels: tuple[int, ...] = (16, 16, 32, 1)
    downsample: int = 2
    kernel_size: int = 3
    use_batch_norm: bool = False
    # frames arrive as 8-bit intensities
    input_scale: float = 1.0 / 255.0
    loc_channels: int = 8
    # density cells are O(1e-2); the localization net sees them rescaled
    loc_input_scale: float = 100.0
    # the last conv regresses 1/output_scale times the density; keeps its
    # pre-activations O(1) so early Adam steps cannot push the final relu dead
    output_scale: float = 0.01

    def validate(self) -> None:
        ch = tuple(self.channels)
        if not ch or any(int(c) != c or c < 1 for c in ch):
            raise ConfigError(f"channels must be positive integers, got {self.channels}")
        if ch[-1] != 1:
            raise ConfigError(f"final layer must have 1 channel, got {ch[-1]}")
        if self.downsample not in (1, 2, 4):
            raise ConfigError(f"downsample must be 1, 2 or 4, got {self.downsample}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if len(ch) < 1 + self.strided_layers():
            raise ConfigError(f"{len(ch)} layers cannot realise downsample {self.downsample}")
        if self.loc_channels < 1:
            raise ConfigError("loc_channels must be positive")
        if not self.output_scale > 0:
            raise ConfigError(f"output_scale must be positive, got {self.output_scale}")

    def strided_layers(self) -> int:
        return int(math.log2(self.downsample))

    def stride(self, layer: int) -> int:
        # stride 2 in layers 2..(1+log2 D), counting from 1
        return 2 if 1 <= layer <= self.strided_layers() else 1


@dataclass
class ModelParams:
    """All trainable tensors, batch-norm buffers and optimizer states.

    ``params`` is insertion-ordered; its keys are the stable identifiers
    used in checkpoints.
    """

    config: RegressorConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    optim: dict[str, AdamState] = field(default_factory=dict)

    @property
    def num_reg_layers(self) -> int:
        return len(self.config.channels)

    def layer_keys(self, layer: int) -> list[str]:
        prefix = f"reg.{layer}."
        return [k for k in self.params if k.startswith(prefix)]

    def loc_keys(self) -> list[str]:
        return [k for k in self.params if k.startswith("loc.")]

    def reg_keys(self) -> list[str]:
        return [k for k in self.params if k.startswith("reg.")]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "ModelParams":
        """Deep copy with parameters and buffers cast to ``dtype``."""
        out = copy.deepcopy(self)
        for k, p in out.params.items():
            out.params[k] = Tensor(p.data.astype(dtype), requires_grad=True, name=k)
        for k, b in out.buffers.items():
            out.buffers[k] = b.astype(dtype)
        return out

    def clone(self) -> "ModelParams":
        return copy.deepcopy(self)


def init_model(config: RegressorConfig | None = None, seed: int = 0) -> ModelParams:
    """Deterministically initialise regressor and localization weights.

    Hidden layers use He-normal kernels; the final regressor layer gets
    weights 100x smaller so the initial density is near zero.  The
    localization head starts at zero weights and identity bias, so the
    predicted transform is exactly the identity.
    """
    config = config or RegressorConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = default_dtype()
    model = ModelParams(config=config)
    k = config.kernel_size

    def add(name, array):
        model.params[name] = Tensor(np.asarray(array, dtype=dtype), requires_grad=True, name=name)

    c_in = 1
    n_layers = len(config.channels)
    for i, c_out in enumerate(config.channels):
        fan_in = c_in * k * k
        last = i == n_layers - 1
        std = 0.01 * math.sqrt(1.0 / fan_in) if last else math.sqrt(2.0 / fan_in)
        add(f"reg.{i}.weight", rng.normal(0.0, std, (c_out, c_in, k, k)))
        add(f"reg.{i}.bias", np.zeros(c_out))
        if config.use_batch_norm and not last:
            add(f"reg.{i}.gamma", np.ones(c_out))
            add(f"reg.{i}.beta", np.zeros(c_out))
            model.buffers[f"reg.{i}.running_mean"] = np.zeros(c_out, dtype=dtype)
            model.buffers[f"reg.{i}.running_var"] = np.ones(c_out, dtype=dtype)
        c_in = c_out

    lc = config.loc_channels
    add("loc.0.weight", rng.normal(0.0, math.sqrt(2.0 / 9), (lc, 1, 3, 3)))
    add("loc.0.bias", np.zeros(lc))
    add("loc.1.weight", rng.normal(0.0, math.sqrt(2.0 / (lc * 9)), (lc, lc, 3, 3)))
    add("loc.1.bias", np.zeros(lc))
    add("loc.head.weight", np.zeros((6, lc)))
    add("loc.head.bias", np.array(IDENTITY_THETA))
    return model


def _as_batch(frames) -> Tensor:
    if isinstance(frames, Tensor):
        t = frames
    else:
        t = Tensor(np.asarray(frames), dtype=default_dtype())
    if t.ndim == 3:
        t = reshape(t, (1,) + t.shape)
    if t.ndim != 4 or t.shape[1] != 1:
        raise DimensionError(f"frames must be [N,1,H,W] or [1,H,W], got {t.shape}")
    return t


def check_frame_dims(config: RegressorConfig, h: int, w: int) -> None:
    d = config.downsample
    if h % d or w % d:
        raise DimensionError(f"frame {h}x{w} not divisible by downsample factor {d}")


def forward_batch(model: ModelParams, frames, training: bool = False, frozen_layers: int = 0) -> Tensor:
    """Run the regressor on ``[N, 1, H, W]`` frames, returning ``[N, H/D, W/D]``.

    Batch-norm uses batch statistics only when ``training`` is set and the
    layer index is at least ``frozen_layers``.
    """
    cfg = model.config
    x = _as_batch(frames)
    n, _, h, w = x.shape
    check_frame_dims(cfg, h, w)
    x = x * cfg.input_scale
    p = model.params
    pad = cfg.kernel_size // 2
    n_layers = len(cfg.channels)
    for i in range(n_layers):
        x = nn.conv2d(x, p[f"reg.{i}.weight"], p[f"reg.{i}.bias"], padding=pad, stride=cfg.stride(i))
        if f"reg.{i}.gamma" in p:
            x = nn.batch_norm(x, p[f"reg.{i}.gamma"], p[f"reg.{i}.beta"],
                              model.buffers[f"reg.{i}.running_mean"],
                              model.buffers[f"reg.{i}.running_var"],
                              training=training and i >= frozen_layers)
        x = nn.relu(x)
    return reshape(x * cfg.output_scale, (n, h // cfg.downsample, w // cfg.downsample))


def forward(model: ModelParams, frame) -> DensityMap:
    """Estimate the density map of one ``[1, H, W]`` frame (eval mode)."""
    out = forward_batch(model, frame, training=False)
    return DensityMap(out[0], model.config.downsample)


def _grid(m) -> Tensor:
    if isinstance(m, DensityMap):
        return m.grid
    return m if isinstance(m, Tensor) else Tensor(np.asarray(m))


def reg_loss(estimates: Sequence, ground_truths: Sequence) -> Tensor:
    """Mean-over-frames halved squared error between density maps.

    ``(1 / (2T)) * sum_t ||est_t - gt_t||^2`` with the squared norm summed
    over cells.  Either argument may be a list of maps or a stacked
    ``[T, h, w]`` tensor.
    """
    est_list = list(estimates) if not isinstance(estimates, Tensor) else None
    gt_list = list(ground_truths) if not isinstance(ground_truths, Tensor) else None
    n_est = len(estimates)
    n_gt = len(ground_truths)
    if n_est == 0 or n_gt == 0:
        raise DimensionError("reg_loss needs at least one frame")
    if n_est != n_gt:
        raise DimensionError(f"reg_loss: {n_est} estimates vs {n_gt} ground truths")
    for t in range(n_gt):
        es = _grid(est_list[t]).shape if est_list is not None else estimates.shape[1:]
        gs = _grid(gt_list[t]).shape if gt_list is not None else ground_truths.shape[1:]
        if es != gs:
            raise DimensionError(f"reg_loss: frame {t} estimate {es} vs ground truth {gs}")
    est = estimates if est_list is None else stack([_grid(e) for e in est_list])
    gt = ground_truths.data if gt_list is None else np.stack([_grid(g).data for g in gt_list])
    diff = est - Tensor(gt, dtype=est.dtype)
    return tsum(diff * diff) * (1.0 / (2 * n_gt))
