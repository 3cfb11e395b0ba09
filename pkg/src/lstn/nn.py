"""Layer primitives: convolution, batch normalization, dense."""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor, _op, relu  # noqa: F401  (relu re-exported)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def conv_output_size(n: int, k: int, padding: int, stride: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlation of ``x`` with ``kernels`` plus a per-channel bias.

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``; kernels are
    ``[C_out, C_in, k, k]`` with odd ``k``.  Output extents follow the usual
    floor rule ``(H + 2*padding - k) // stride + 1``.
    """
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"kernels must be [C_out, C_in, k, k], got {kernels.shape}")
    c_out, c_in, k, _ = kernels.shape
    if k % 2 == 0:
        raise ParameterError(f"kernel size must be odd, got {k}")
    if padding < 0 or stride < 1:
        raise ParameterError(f"invalid padding={padding} / stride={stride}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias axis 0 has {bias.shape} but kernels axis 0 (C_out) is {c_out}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise DimensionError(f"input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    if c != c_in:
        raise DimensionError(f"input channel axis has {c} but kernels axis 1 (C_in) is {c_in}")
    ho = conv_output_size(h, k, padding, stride)
    wo = conv_output_size(w, k, padding, stride)
    if ho < 1 or wo < 1:
        raise DimensionError(f"spatial axes (H={h}, W={w}) too small for k={k}, padding={padding}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    kd = kernels.data
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    offsets = [(di, dj) for di in range(k) for dj in range(k)]
    # im2col laid out [k*k, C, N*Ho*Wo] so a single GEMM does the whole layer
    xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    cols = np.empty((k * k, c, n, ho, wo), dtype=xp.dtype)
    for t, (di, dj) in enumerate(offsets):
        cols[t] = xt[:, :, di:di + span_h:stride, dj:dj + span_w:stride]
    cols = cols.reshape(k * k * c, -1)
    k2 = kd.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = (k2 @ cols + bias.data[:, None]).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    if not batched:
        out = out[0]

    def back(g):
        g2 = (g if batched else g[None]).transpose(1, 0, 2, 3).reshape(c_out, -1)
        gk = (g2 @ cols.T).reshape(c_out, k, k, c).transpose(0, 3, 1, 2)
        gbias = g2.sum(axis=1)
        gx = None
        if x.requires_grad:
            # a single output channel makes this an outer product; broadcasting beats GEMM there
            gcols = (k2.T @ g2 if c_out > 1 else k2.T * g2).reshape(k * k, c, n, ho, wo)
            gxt = np.zeros_like(xt)
            for t, (di, dj) in enumerate(offsets):
                gxt[:, :, di:di + span_h:stride, dj:dj + span_w:stride] += gcols[t]
            gx = gxt[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
            if not batched:
                gx = gx[0]
        return gx, np.ascontiguousarray(gk), gbias

    return _op(np.ascontiguousarray(out), (x, kernels, bias), back)


def batch_norm(x: Tensor, gamma: Tensor, beta_shift: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, eps: float = BN_EPS,
               momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel batch normalization over ``[N, C, H, W]``.

    In training mode the batch statistics are used and the running buffers
    are updated in place (``running = (1 - momentum) * running + momentum *
    batch``; the variance buffer receives the unbiased estimate).  In eval
    mode the running buffers are used and left untouched.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if n == 0 or h * w == 0:
        raise DimensionError("batch_norm on a zero-size batch")
    if gamma.shape != (c,) or beta_shift.shape != (c,):
        raise DimensionError(f"gamma/beta_shift must be [{c}], got {gamma.shape}/{beta_shift.shape}")
    if eps <= 0:
        raise ParameterError("eps must be positive")
    xd = x.data
    bshape = (1, c, 1, 1)
    if training:
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3))
        var = ((xd - mu.reshape(bshape)) ** 2).mean(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta_shift.data.reshape(bshape)

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            m = n * h * w
            gx = (inv.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3)).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(bshape)
            )
        else:
            gx = dxhat * inv.reshape(bshape)
        return gx, gg, gbeta

    return _op(out.astype(xd.dtype), (x, gamma, beta_shift), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``[N, in]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def back(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _op(out, (x, weight, bias), back)
