"""Locality-constrained spatial transformer.

Density maps are split into a grid of blocks; each block of frame ``t`` is
warped by an affine transform predicted from the block itself and compared
against the ground truth of frame ``t+1``, weighted by how similar the raw
frame blocks are.

Coordinates follow the usual spatial-transformer convention: normalized
``[-1, 1]`` spans the outer edges of a block, cell centers sit at
``(2j + 1) / W - 1``, and samples falling between real cells and the
outside interpolate towards zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .density import DensityMap
from .errors import DimensionError, ParameterError, UsageError
from .regressor import ModelParams
from .tensor import Tensor, _op, default_dtype, reshape, stack, tsum

# sampling positions this close to a cell center (in cells) are snapped onto it
SNAP_TOL = 1e-5


@dataclass(frozen=True)
class BlockGrid:
    rows: int = 1
    cols: int = 2

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ParameterError(f"block grid must be at least 1x1, got {self.rows}x{self.cols}")

    def row_spans(self, height: int) -> list[tuple[int, int]]:
        return split_extent(height, self.rows)

    def col_spans(self, width: int) -> list[tuple[int, int]]:
        return split_extent(width, self.cols)


def split_extent(n: int, parts: int) -> list[tuple[int, int]]:
    """Split ``n`` cells into ``parts`` (start, size) spans.

    Every span gets ``n // parts`` cells and the trailing ``n % parts``
    spans take one extra each.
    """
    if parts > n:
        raise DimensionError(f"cannot split {n} cells into {parts} blocks")
    base, rem = divmod(n, parts)
    spans, start = [], 0
    for i in range(parts):
        size = base + (1 if i >= parts - rem else 0)
        spans.append((start, size))
        start += size
    return spans


@dataclass
class Block:
    row: int
    col: int
    y0: int
    x0: int
    data: object  # Tensor or ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.data.shape)


def partition(grid, blocks: BlockGrid) -> list[Block]:
    """Cut a 2-D grid into ``rows x cols`` blocks in row-major order."""
    if isinstance(grid, DensityMap):
        grid = grid.grid
    h, w = grid.shape[-2:]
    if blocks.rows > h or blocks.cols > w:
        raise DimensionError(f"{blocks.rows}x{blocks.cols} blocks exceed {h}x{w} grid")
    out = []
    for i, (y0, bh) in enumerate(blocks.row_spans(h)):
        for j, (x0, bw) in enumerate(blocks.col_spans(w)):
            out.append(Block(i, j, y0, x0, grid[..., y0:y0 + bh, x0:x0 + bw]))
    return out


def assemble(parts: Sequence[Block]) -> np.ndarray:
    """Inverse of :func:`partition` for plain arrays."""
    h = max(b.y0 + b.shape[-2] for b in parts)
    w = max(b.x0 + b.shape[-1] for b in parts)
    first = np.asarray(parts[0].data.data if isinstance(parts[0].data, Tensor) else parts[0].data)
    out = np.zeros(first.shape[:-2] + (h, w), dtype=first.dtype)
    for b in parts:
        d = b.data.data if isinstance(b.data, Tensor) else b.data
        out[..., b.y0:b.y0 + b.shape[-2], b.x0:b.x0 + b.shape[-1]] = d
    return out


# -- sampling ---------------------------------------------------------------

def target_coords(out_h: int, out_w: int) -> np.ndarray:
    """Normalized cell-center coordinates as ``[h*w, 3]`` rows ``(x, y, 1)``."""
    xs = (2 * np.arange(out_w, dtype=np.float64) + 1) / out_w - 1
    ys = (2 * np.arange(out_h, dtype=np.float64) + 1) / out_h - 1
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel(), np.ones(out_h * out_w)], axis=1)


def affine_grid(theta, out_h: int, out_w: int) -> Tensor:
    """Source coordinates ``theta @ (x_t, y_t, 1)`` for each output cell.

    ``theta`` is ``[2, 3]`` or ``[N, 2, 3]``; the result is ``[h, w, 2]`` or
    ``[N, h, w, 2]`` with the last axis holding ``(x_s, y_s)``.
    """
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"grid dims must be positive, got {out_h}x{out_w}")
    if not isinstance(theta, Tensor):
        arr = np.asarray(theta, dtype=default_dtype())
        theta = Tensor(arr.reshape(2, 3) if arr.size == 6 and arr.ndim < 3 else arr)
    batched = theta.ndim == 3
    th = theta.data if batched else theta.data[None]
    if th.shape[1:] != (2, 3):
        raise DimensionError(f"theta must be [2,3] or [N,2,3], got {theta.shape}")
    base = target_coords(out_h, out_w).astype(th.dtype)  # [P, 3]
    out = np.einsum("pk,nck->npc", base, th).reshape(len(th), out_h, out_w, 2)
    if not batched:
        out = out[0]

    def back(g):
        gb = (g if batched else g[None]).reshape(len(th), -1, 2)
        gt = np.einsum("npc,pk->nck", gb, base)
        return (gt if batched else gt[0],)

    return _op(out, (theta,), back)


def bilinear_sample(source, grid) -> Tensor:
    """Bilinearly sample ``source`` at normalized ``grid`` coordinates.

    ``source`` is ``[H, W]`` or ``[N, H, W]``; ``grid`` is ``[h, w, 2]`` or
    ``[N, h, w, 2]``.  Neighbours outside the source count as zero.
    Differentiable with respect to both the source values and the grid.
    """
    if not isinstance(source, Tensor):
        source = Tensor(np.asarray(source))
    if not isinstance(grid, Tensor):
        grid = Tensor(np.asarray(grid))
    batched = source.ndim == 3
    src = source.data if batched else source.data[None]
    gd = grid.data if grid.ndim == 4 else grid.data[None]
    if gd.shape[0] != src.shape[0] or gd.shape[-1] != 2:
        raise DimensionError(f"grid {grid.shape} incompatible with source {source.shape}")
    n, hs, ws = src.shape
    dtype = src.dtype

    gx = gd[..., 0].astype(np.float64)
    gy = gd[..., 1].astype(np.float64)
    u = ((gx + 1) * ws - 1) / 2
    v = ((gy + 1) * hs - 1) / 2
    for c in (u, v):
        r = np.rint(c)
        snap = np.abs(c - r) < SNAP_TOL
        c[snap] = r[snap]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0
    x1, y1 = x0 + 1, y0 + 1
    nidx = np.arange(n).reshape(-1, 1, 1)
    src64 = src.astype(np.float64)

    def gather(yy, xx):
        ok = (xx >= 0) & (xx < ws) & (yy >= 0) & (yy < hs)
        vals = src64[nidx, np.clip(yy, 0, hs - 1), np.clip(xx, 0, ws - 1)]
        return np.where(ok, vals, 0.0), ok

    v00, m00 = gather(y0, x0)
    v01, m01 = gather(y0, x1)
    v10, m10 = gather(y1, x0)
    v11, m11 = gather(y1, x1)
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    out_t = out.astype(dtype) if batched else out[0].astype(dtype)

    def back(g):
        gb = (g if batched else g[None]).astype(np.float64)
        gsrc = None
        if source.requires_grad:
            acc = np.zeros(n * hs * ws)
            for yy, xx, ww, mm in ((y0, x0, w00, m00), (y0, x1, w01, m01),
                                   (y1, x0, w10, m10), (y1, x1, w11, m11)):
                flat = (nidx * hs + np.clip(yy, 0, hs - 1)) * ws + np.clip(xx, 0, ws - 1)
                acc += np.bincount(flat[mm], weights=(gb * ww)[mm], minlength=n * hs * ws)
            gsrc = acc.reshape(n, hs, ws).astype(dtype)
            if not batched:
                gsrc = gsrc[0]
        ggrid = None
        if grid.requires_grad:
            du = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
            dv = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
            ggrid = np.stack([gb * du * (ws / 2), gb * dv * (hs / 2)], axis=-1).astype(grid.dtype)
            if grid.ndim == 3:
                ggrid = ggrid[0]
        return gsrc, ggrid

    return _op(out_t, (source, grid), back)


# -- localization and warping -----------------------------------------------

def localize(model: ModelParams, density_block) -> Tensor:
    """Predict affine parameters for one ``[h, w]`` block or a ``[N, h, w]`` stack.

    Returns ``[2, 3]`` (or ``[N, 2, 3]``).
    """
    x = density_block.grid if isinstance(density_block, DensityMap) else density_block
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    batched = x.ndim == 3
    n = x.shape[0] if batched else 1
    p = model.params
    h = reshape(x, (n, 1) + x.shape[-2:]) * model.config.loc_input_scale
    h = nn.relu(nn.conv2d(h, p["loc.0.weight"], p["loc.0.bias"], padding=1))
    h = nn.relu(nn.conv2d(h, p["loc.1.weight"], p["loc.1.bias"], padding=1, stride=2))
    h = h.mean(axis=(2, 3))
    theta = nn.linear(h, p["loc.head.weight"], p["loc.head.bias"])
    return reshape(theta, (n, 2, 3) if batched else (2, 3))


def warp(source, theta) -> Tensor:
    """Warp ``source`` (``[h, w]`` or ``[N, h, w]``) through ``theta``."""
    h, w = source.shape[-2:]
    return bilinear_sample(source, affine_grid(theta, h, w))


def warp_block(model: ModelParams, density_block) -> Tensor:
    x = density_block.grid if isinstance(density_block, DensityMap) else density_block
    return warp(x, localize(model, x))


def block_similarity(block_t, block_t1, beta: float) -> float:
    """``exp(-msd / (2 beta^2))`` with ``msd`` the mean squared pixel difference."""
    a = np.asarray(block_t.data if isinstance(block_t, Tensor) else block_t, dtype=np.float64)
    b = np.asarray(block_t1.data if isinstance(block_t1, Tensor) else block_t1, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"similarity blocks differ in shape: {a.shape} vs {b.shape}")
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    msd = float(np.mean((a - b) ** 2))
    return math.exp(-msd / (2 * beta**2))


def _plane(x):
    """Reduce a frame/density to a 2-D grid (drops a leading channel axis)."""
    if isinstance(x, DensityMap):
        x = x.grid
    if isinstance(x, Tensor):
        return x if x.ndim == 2 else reshape(x, x.shape[-2:])
    a = np.asarray(x)
    return a.reshape(a.shape[-2:])


def similarity_weights(frame_t, frame_t1, blocks: BlockGrid, beta: float, mode: str = "intensity") -> list[float]:
    """Per-block weights in row-major order; ``mode='ones'`` gives all 1."""
    ft = _plane(frame_t)
    ft1 = _plane(frame_t1)
    ft = ft.data if isinstance(ft, Tensor) else ft
    ft1 = ft1.data if isinstance(ft1, Tensor) else ft1
    pa, pb = partition(ft, blocks), partition(ft1, blocks)
    if mode == "ones":
        return [1.0] * len(pa)
    if mode != "intensity":
        raise ParameterError(f"unknown similarity mode {mode!r}")
    return [block_similarity(a.data, b.data, beta) for a, b in zip(pa, pb)]


def lst_loss(model: ModelParams, frames: Sequence, density_estimates: Sequence,
             ground_truths: Sequence, blocks: BlockGrid, beta: float, *,
             similarity: str = "intensity", global_theta: bool = False,
             detach_estimates: bool = False, weights: Sequence[Sequence[float]] | None = None) -> Tensor:
    """Similarity-weighted block warp loss over a clip of ``T >= 2`` frames.

    For each ``t < T`` and block ``(i, j)``, the block of the estimated
    density at ``t`` is warped and compared with the ground-truth block at
    ``t + 1``; squared errors are weighted by :func:`block_similarity` of the
    co-located raw frame blocks and the total is divided by ``2T``.
    Similarity weights are constants.  ``weights`` (one list per ``t``)
    overrides the computed weights.
    """
    T = len(frames)
    if T < 2:
        raise UsageError(f"lst_loss needs at least 2 frames, got {T}")
    if len(density_estimates) != T or len(ground_truths) != T:
        raise DimensionError(f"lst_loss: {T} frames, {len(density_estimates)} estimates, "
                             f"{len(ground_truths)} ground truths")
    terms = []
    for t in range(T - 1):
        est = _plane(density_estimates[t])
        if not isinstance(est, Tensor):
            est = Tensor(est)
        if detach_estimates:
            est = est.detach()
        gt = _plane(ground_truths[t + 1])
        gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
        if est.shape != gt.shape:
            raise DimensionError(f"lst_loss: frame {t} estimate {est.shape} vs ground truth {gt.shape}")
        if weights is not None:
            w = list(weights[t])
        else:
            w = similarity_weights(frames[t], frames[t + 1], blocks, beta, similarity)
        gt_blocks = partition(gt, blocks)
        if global_theta:
            warped_blocks = [b.data for b in partition(warp_block(model, est), blocks)]
        else:
            est_blocks = partition(est, blocks)
            warped_blocks = _warp_grouped(model, [b.data for b in est_blocks])
        for k, (wb, gb) in enumerate(zip(warped_blocks, gt_blocks)):
            d = wb - Tensor(gb.data, dtype=wb.dtype)
            terms.append(tsum(d * d) * float(w[k]))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / (2 * T))


def _warp_grouped(model: ModelParams, parts: list[Tensor]) -> list[Tensor]:
    """Warp blocks, batching those of equal shape; returns results in input order."""
    groups: dict[tuple[int, ...], list[int]] = {}
    for idx, part in enumerate(parts):
        groups.setdefault(part.shape, []).append(idx)
    out: list[Tensor | None] = [None] * len(parts)
    for idxs in groups.values():
        if len(idxs) == 1:
            out[idxs[0]] = warp_block(model, parts[idxs[0]])
            continue
        batch = warp_block(model, stack([parts[i] for i in idxs]))
        for pos, i in enumerate(idxs):
            out[i] = batch[pos]
    return out
