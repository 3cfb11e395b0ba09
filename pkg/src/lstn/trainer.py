"""Combined objective, pretrain/finetune schedule and checkpoints."""
from __future__ import annotations

import contextlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import config as cfgio
from . import tnsr
from .dataio import VideoSequence
from .density import density_for_frame
from .errors import CheckpointError, ConfigError, FormatError, UsageError
from .lst import BlockGrid, lst_loss
from .optim import AdamState, adam_step
from .regressor import ModelParams, RegressorConfig, forward_batch, init_model, reg_loss
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lam: float = 0.001
    beta: float = 30.0
    block_rows: int = 1
    block_cols: int = 2
    batch_size: int = 5
    pretrain_epochs: int = 10
    finetune_epochs: int = 10
    pretrain_lr: float = 1e-3
    finetune_lr: float = 1e-4
    seed: int = 0
    freeze_layers: int = 0
    sigma: float = 3.0
    downsample: int = 2
    # "intensity" weights blocks by frame similarity; "ones" uses weight 1 everywhere
    similarity: str = "intensity"
    global_theta: bool = False
    detach_reg_in_lst: bool = False
    channels: tuple[int, ...] = (16, 16, 32, 1)
    use_batch_norm: bool = False

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.block_rows < 1 or self.block_cols < 1:
            raise ConfigError("block_rows and block_cols must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not (self.pretrain_lr > 0 and self.finetune_lr > 0):
            raise ConfigError("learning rates must be > 0")
        if not 0 <= self.freeze_layers <= len(self.channels):
            raise ConfigError(f"freeze_layers must be in [0, {len(self.channels)}]")
        if not self.sigma > 0:
            raise ConfigError("sigma must be > 0")
        if self.similarity not in ("intensity", "ones"):
            raise ConfigError(f"similarity must be 'intensity' or 'ones', got {self.similarity!r}")
        self.regressor_config().validate()

    def regressor_config(self) -> RegressorConfig:
        return RegressorConfig(channels=tuple(self.channels), downsample=self.downsample,
                               use_batch_norm=self.use_batch_norm)

    @property
    def blocks(self) -> BlockGrid:
        return BlockGrid(self.block_rows, self.block_cols)


def total_loss(l_reg: Tensor, l_lst: Tensor, lam: float) -> Tensor:
    """``l_reg + lam * l_lst``."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return l_reg + l_lst * float(lam)


@dataclass
class BatchRecord:
    reg: float
    lst: float
    lam: float
    total: float


@dataclass
class EpochStats:
    phase: str
    epoch: int
    reg: float
    lst: float
    total: float
    batches: list[BatchRecord] = field(default_factory=list)

    def line(self) -> str:
        return f"epoch {self.epoch} reg {self.reg!r} lst {self.lst!r} total {self.total!r}"


@dataclass
class Clip:
    """A video prepared for training: stacked frames and ground-truth maps."""

    video_id: str
    frames: np.ndarray  # [T, 1, H, W]
    gts: np.ndarray  # [T, H/D, W/D]


def prepare(videos: Sequence[VideoSequence], config: TrainConfig) -> list[Clip]:
    out = []
    for v in videos:
        ann = v.annotation
        gts = [density_for_frame(heads, ann.height, ann.width, config.downsample, config.sigma, frame=t).grid.data
               for t, heads in enumerate(ann.frames)]
        frames = np.stack([np.asarray(f, dtype=np.float32).reshape(1, ann.height, ann.width) for f in v.frames])
        out.append(Clip(v.video_id, frames, np.stack(gts)))
    return out


def _epoch_rng(config: TrainConfig, phase: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, epoch, 0 if phase == "pretrain" else 1])


def _frozen_keys(model: ModelParams, n: int) -> set[str]:
    return {k for layer in range(n) for k in model.layer_keys(layer)}


def _apply_updates(model: ModelParams, lr: float, skip: set[str]) -> None:
    for key, p in model.params.items():
        if key in skip or p.grad is None:
            continue
        state = model.optim.get(key)
        if state is None:
            state = model.optim[key] = AdamState.for_param(p)
        state.lr = lr
        adam_step(p, state)


def train_epoch(model: ModelParams, dataset, config: TrainConfig, phase: str, epoch: int = 1) -> EpochStats:
    """One pass over ``dataset`` in the given phase.

    ``pretrain`` minimizes the regression loss over shuffled single frames.
    ``finetune`` minimizes the combined loss over consecutive-frame pairs
    taken from sliding windows inside each video, leaving the first
    ``freeze_layers`` regressor layers untouched.  Shuffling is seeded by
    ``(seed, epoch, phase)``.
    """
    if phase not in ("pretrain", "finetune"):
        raise UsageError(f"unknown phase {phase!r}")
    clips = dataset if dataset and isinstance(dataset[0], Clip) else prepare(dataset, config)
    if not clips:
        raise UsageError("empty dataset")
    rng = _epoch_rng(config, phase, epoch)
    B = config.batch_size
    records: list[BatchRecord] = []

    if phase == "pretrain":
        items = [(c, t) for c in range(len(clips)) for t in range(len(clips[c].frames))]
        order = rng.permutation(len(items))
        for s in range(0, len(order), B):
            batch = [items[i] for i in order[s:s + B]]
            frames = np.stack([clips[c].frames[t] for c, t in batch])
            gts = np.stack([clips[c].gts[t] for c, t in batch])
            model.zero_grad()
            est = forward_batch(model, frames, training=True)
            loss = reg_loss(est, Tensor(gts))
            loss.backward()
            _apply_updates(model, config.pretrain_lr, skip=set(model.loc_keys()))
            v = loss.item()
            records.append(BatchRecord(v, 0.0, 0.0, v))
    else:
        items = [(c, t) for c in range(len(clips)) for t in range(len(clips[c].frames) - 1)]
        if not items:
            raise UsageError("finetune needs videos with at least 2 frames")
        order = rng.permutation(len(items))
        frozen = _frozen_keys(model, config.freeze_layers)
        blocks = config.blocks
        for s in range(0, len(order), B):
            batch = [items[i] for i in order[s:s + B]]
            n = len(batch)
            frames = np.stack([clips[c].frames[t] for c, t in batch] + [clips[c].frames[t + 1] for c, t in batch])
            gts = np.stack([clips[c].gts[t] for c, t in batch] + [clips[c].gts[t + 1] for c, t in batch])
            model.zero_grad()
            est = forward_batch(model, frames, training=True, frozen_layers=config.freeze_layers)
            l_reg = reg_loss(est, Tensor(gts))
            # with lambda == 0 the LST term is only logged, so skip its graph
            with no_grad() if config.lam == 0 else contextlib.nullcontext():
                l_lst = None
                for k in range(n):
                    term = lst_loss(model, [frames[k], frames[n + k]], [est[k], est[n + k]],
                                    [gts[k], gts[n + k]], blocks, config.beta,
                                    similarity=config.similarity, global_theta=config.global_theta,
                                    detach_estimates=config.detach_reg_in_lst)
                    l_lst = term if l_lst is None else l_lst + term
                l_lst = l_lst * (1.0 / n)
            loss = total_loss(l_reg, l_lst, config.lam)
            loss.backward()
            _apply_updates(model, config.finetune_lr, skip=frozen)
            records.append(BatchRecord(l_reg.item(), l_lst.item(), config.lam, loss.item()))

    def avg(attr):
        return float(np.mean([getattr(r, attr) for r in records]))

    return EpochStats(phase, epoch, avg("reg"), avg("lst"), avg("total"), records)


def train(model: ModelParams, videos, config: TrainConfig,
          on_epoch: Callable[[EpochStats], None] | None = None) -> list[EpochStats]:
    """Pretrain for ``pretrain_epochs`` then finetune for ``finetune_epochs``."""
    config.validate()
    clips = videos if videos and isinstance(videos[0], Clip) else prepare(videos, config)
    history = []
    schedule = ["pretrain"] * config.pretrain_epochs + ["finetune"] * config.finetune_epochs
    for epoch, phase in enumerate(schedule, 1):
        stats = train_epoch(model, clips, config, phase, epoch)
        log.info(stats.line())
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return history


def new_model(config: TrainConfig, seed: int | None = None) -> ModelParams:
    return init_model(config.regressor_config(), config.seed if seed is None else seed)


# -- checkpoints --------------------------------------------------------------

MANIFEST = "manifest.txt"
CONFIG_FILE = "config.txt"
MODEL_FILE = "model.txt"
OPTIM_FILE = "optimizer.txt"


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(s) for s in text.split("x"))


def _entries(model: ModelParams):
    for key, p in model.params.items():
        yield key, p.data
    for key, b in model.buffers.items():
        yield key, b
    for key, st in model.optim.items():
        yield f"adam.m:{key}", st.m
        yield f"adam.v:{key}", st.v


def save_checkpoint(model: ModelParams, config: TrainConfig, path: str | os.PathLike) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for ident, arr in _entries(model):
        fname = ident.replace(":", ".") + ".tnsr"
        tnsr.save(arr, d / fname)
        lines.append(f"{ident} {_shape_str(arr.shape)} {fname}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    (d / CONFIG_FILE).write_text(cfgio.to_text(config))
    (d / MODEL_FILE).write_text(cfgio.to_text(model.config))
    opt_lines = [f"{key} step={st.step} lr={st.lr!r} beta1={st.beta1!r} beta2={st.beta2!r} epsilon={st.epsilon!r}"
                 for key, st in model.optim.items()]
    (d / OPTIM_FILE).write_text("".join(line + "\n" for line in opt_lines))


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelParams, TrainConfig]:
    d = Path(path)
    try:
        config = cfgio.from_text(TrainConfig, (d / CONFIG_FILE).read_text())
        mconf = cfgio.from_text(RegressorConfig, (d / MODEL_FILE).read_text())
        manifest = (d / MANIFEST).read_text().splitlines()
        opt_lines = (d / OPTIM_FILE).read_text().splitlines()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {d}: {exc}") from exc
    except ConfigError as exc:
        raise CheckpointError(f"corrupt checkpoint config in {d}: {exc}") from exc

    reference = init_model(mconf, 0)
    model = ModelParams(config=mconf)
    moments: dict[str, dict[str, np.ndarray]] = {}
    for n, line in enumerate(manifest, 1):
        parts = line.split()
        if len(parts) != 3:
            raise CheckpointError(f"corrupt manifest line {n}: {line!r}")
        ident, shape_txt, fname = parts
        try:
            shape = _parse_shape(shape_txt)
        except ValueError:
            raise CheckpointError(f"{ident}: bad shape {shape_txt!r}") from None
        try:
            arr = tnsr.load(d / fname)
        except OSError:
            raise CheckpointError(f"{ident}: missing tensor file {fname}") from None
        except FormatError as exc:
            raise CheckpointError(f"{ident}: {exc}") from None
        if arr.shape != shape:
            raise CheckpointError(f"{ident}: file shape {arr.shape} != manifest shape {shape}")
        if ident.startswith(("adam.m:", "adam.v:")):
            kind, key = ident.split(":", 1)
            moments.setdefault(key, {})[kind[-1]] = arr
        elif ident in reference.params:
            if arr.shape != reference.params[ident].shape:
                raise CheckpointError(f"{ident}: shape {arr.shape} does not match model config")
            model.params[ident] = Tensor(arr, requires_grad=True, name=ident)
        elif ident in reference.buffers:
            model.buffers[ident] = arr
        else:
            raise CheckpointError(f"{ident}: unknown parameter identifier")
    missing = [k for k in list(reference.params) + list(reference.buffers)
               if k not in model.params and k not in model.buffers]
    if missing:
        raise CheckpointError(f"{missing[0]}: missing from checkpoint manifest")
    # keep the architecture's canonical order
    model.params = {k: model.params[k] for k in reference.params}
    model.buffers = {k: model.buffers[k] for k in reference.buffers}

    for n, line in enumerate(opt_lines, 1):
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        try:
            kv = dict(p.split("=", 1) for p in parts[1:])
            mv = moments[key]
            state = AdamState(mv["m"], mv["v"], int(kv["step"]), float(kv["lr"]), float(kv["beta1"]),
                              float(kv["beta2"]), float(kv["epsilon"]))
        except (KeyError, ValueError):
            raise CheckpointError(f"{key}: corrupt optimizer state (line {n})") from None
        if key not in model.params or state.m.shape != model.params[key].shape:
            raise CheckpointError(f"{key}: optimizer state does not match a parameter")
        model.optim[key] = state
    return model, config
