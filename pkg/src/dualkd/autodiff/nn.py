"""Fused layer operations with hand-written backward rules.

Convolution, batch normalisation, pooling and the GRU recurrence are each a
single graph node: the forward pass runs in numpy and the backward closure
returns gradients for every input at once.  This keeps the Python overhead of
a training step independent of kernel size and sequence length.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, DimensionError
from .tensor import Tensor, make_result, mul

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair_arg(v):
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding=0, stride=1) -> Tensor:
    """2-D cross-correlation of ``x[B, C_in, T, F]`` with ``weight[C_out, C_in, kT, kF]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, T, F = x.shape
    O, Cw, kT, kF = weight.shape
    if C != Cw:
        raise DimensionError(f"conv2d: input channels {C} do not match weight {weight.shape}")
    pT, pF = _pair_arg(padding)
    sT, sF = _pair_arg(stride)
    if sT < 1 or sF < 1:
        raise ConfigurationError(f"conv2d stride must be >= 1, got {(sT, sF)}")
    T_out = (T + 2 * pT - kT) // sT + 1
    F_out = (F + 2 * pF - kF) // sF + 1
    if T_out < 1 or F_out < 1:
        raise ConfigurationError(
            f"conv2d: kernel {(kT, kF)} does not fit input {(T, F)} with padding {(pT, pF)}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pT, pT), (pF, pF))) if (pT or pF) else x.data
    w = weight.data

    def window(i, j):
        return xp[:, :, i : i + sT * (T_out - 1) + 1 : sT, j : j + sF * (F_out - 1) + 1 : sF]

    out = np.zeros((B, O, T_out, F_out), dtype=x.dtype)
    for i in range(kT):
        for j in range(kF):
            # [B, C, T', F'] x [O, C] -> [B, T', F', O]
            out += np.moveaxis(np.tensordot(window(i, j), w[:, :, i, j], axes=([1], [1])), 3, 1)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = gw = gb = None
        gT = np.moveaxis(g, 1, 3)  # [B, T', F', O]
        if weight.requires_grad:
            gw = np.empty_like(w)
            for i in range(kT):
                for j in range(kF):
                    gw[:, :, i, j] = np.tensordot(gT, window(i, j), axes=([0, 1, 2], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kT):
                for j in range(kF):
                    contrib = np.moveaxis(np.tensordot(gT, w[:, :, i, j], axes=([3], [0])), 3, 1)
                    gxp[:, :, i : i + sT * (T_out - 1) + 1 : sT, j : j + sF * (F_out - 1) + 1 : sF] += contrib
            gx = gxp[:, :, pT : pT + T, pF : pF + F]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, backward, "conv2d")


class RunningStats:
    """Per-channel running mean/variance owned by a batch-norm layer."""

    def __init__(self, channels, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats | None = None,
    mode: str = "train",
    update_running: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Normalise ``x[B, C, ...]`` per channel.

    In ``train`` mode batch statistics are used and, when ``update_running``,
    the running statistics move toward them by ``momentum`` (unbiased variance).
    ``eval`` mode uses the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    C = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    count = x.size // C
    xd = x.data

    if mode == "train":
        if count < 2:
            raise ConfigurationError("batch_norm in train mode needs at least two values per channel")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running is not None and update_running:
            running.mean *= 1 - momentum
            running.mean += momentum * mu
            running.var *= 1 - momentum
            running.var += momentum * var * count / (count - 1)
    else:
        if running is None:
            raise ConfigurationError("batch_norm eval mode needs running statistics")
        mu, var = running.mean, running.var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if mode == "train":
                m1 = gxhat.mean(axis=axes, keepdims=True)
                m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (gxhat - m1 - xhat * m2) * inv_std.reshape(bshape)
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, gg, gbeta

    return make_result(out.astype(xd.dtype), (x, gamma, beta), backward, "batch_norm")


def avg_pool2d(x: Tensor, kernel) -> Tensor:
    """Non-overlapping average pooling over the last two axes; ragged edges are dropped."""
    kT, kF = _pair_arg(kernel)
    B, C, T, F = x.shape
    T_out, F_out = T // kT, F // kF
    if T_out < 1 or F_out < 1:
        raise ConfigurationError(f"avg_pool2d kernel {(kT, kF)} larger than input {(T, F)}")
    crop = x.data[:, :, : T_out * kT, : F_out * kF]
    out = crop.reshape(B, C, T_out, kT, F_out, kF).mean(axis=(3, 5))
    scale = 1.0 / (kT * kF)

    def backward(g):
        gx = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g * scale, kT, axis=2), kF, axis=3)
        gx[:, :, : T_out * kT, : F_out * kF] = up
        return (gx,)

    return make_result(out, (x,), backward, "avg_pool2d")


def adaptive_bins(length: int, target: int) -> np.ndarray:
    """Bin boundaries splitting ``length`` steps into ``target`` contiguous near-equal bins."""
    return (np.arange(target + 1) * length) // target


def adaptive_avg_time(x: Tensor, target: int, axis: int = 1) -> Tensor:
    """Average ``x`` along ``axis`` down to ``target`` contiguous bins."""
    axis = axis % x.ndim
    length = x.shape[axis]
    if target < 1 or target > length:
        raise ConfigurationError(
            f"adaptive_avg_time: target {target} must lie in [1, {length}] (no upsampling)"
        )
    if target == length:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "adaptive_avg_time")
    edges = adaptive_bins(length, target)
    P = np.zeros((target, length), dtype=x.dtype)
    for i in range(target):
        P[i, edges[i] : edges[i + 1]] = 1.0 / (edges[i + 1] - edges[i])
    xm = np.moveaxis(x.data, axis, -1)
    out = np.moveaxis(xm @ P.T, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1) @ P
        return (np.moveaxis(gm, -1, axis),)

    return make_result(out, (x,), backward, "adaptive_avg_time")


def pool(x: Tensor, kind: str = "avg", kernel=None, target=None, axis: int = 1) -> Tensor:
    """Dispatch to :func:`avg_pool2d` or :func:`adaptive_avg_time`."""
    if kind == "avg":
        return avg_pool2d(x, kernel)
    if kind == "adaptive_avg_time":
        return adaptive_avg_time(x, target, axis=axis)
    raise ValueError(f"unknown pool kind {kind!r}")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


def _sig(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def gru(
    x: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    reverse: bool = False,
) -> Tensor:
    """Unidirectional GRU over ``x[B, T, D]`` with zero initial state.

    Gate blocks in ``w_ih[D, 3H]``, ``w_hh[H, 3H]`` and both biases are ordered
    (update, reset, candidate)::

        z = sig(x Wz + bz_i + h Uz + bz_h)
        r = sig(x Wr + br_i + h Ur + br_h)
        n = tanh(x Wn + bn_i + r * (h Un + bn_h))
        h' = (1 - z) * n + z * h

    ``reverse`` runs the recurrence from the last frame to the first; outputs
    stay aligned with input frames.
    """
    if x.ndim != 3:
        raise DimensionError(f"gru expects [B, T, D] input, got {x.shape}")
    B, T, D = x.shape
    H = w_hh.shape[0]
    if w_ih.shape != (D, 3 * H) or w_hh.shape != (H, 3 * H):
        raise DimensionError(f"gru: weights {w_ih.shape}, {w_hh.shape} do not fit input width {D}")
    if T < 1:
        raise DimensionError("gru needs at least one frame")

    xs = x.data[:, ::-1] if reverse else x.data
    Wih, Whh = w_ih.data, w_hh.data
    gi = xs @ Wih + b_ih.data  # [B, T, 3H]
    dtype = x.dtype
    hs = np.zeros((T + 1, B, H), dtype=dtype)
    zs = np.empty((T, B, H), dtype=dtype)
    rs = np.empty_like(zs)
    ns = np.empty_like(zs)
    hn = np.empty_like(zs)  # h Un + bn_h, needed for the reset-gate gradient
    for t in range(T):
        h = hs[t]
        gh = h @ Whh + b_hh.data
        z = _sig(gi[:, t, :H] + gh[:, :H])
        r = _sig(gi[:, t, H : 2 * H] + gh[:, H : 2 * H])
        n = np.tanh(gi[:, t, 2 * H :] + r * gh[:, 2 * H :])
        hs[t + 1] = (1.0 - z) * n + z * h
        zs[t], rs[t], ns[t], hn[t] = z, r, n, gh[:, 2 * H :]
    out = np.ascontiguousarray(hs[1:].transpose(1, 0, 2))
    if reverse:
        out = np.ascontiguousarray(out[:, ::-1])

    def backward(g):
        g = g[:, ::-1] if reverse else g
        dgi = np.empty((B, T, 3 * H), dtype=dtype)
        dgh = np.empty((T, B, 3 * H), dtype=dtype)
        dh = np.zeros((B, H), dtype=dtype)
        for t in range(T - 1, -1, -1):
            dh = dh + g[:, t]
            z, r, n, h = zs[t], rs[t], ns[t], hs[t]
            dn = dh * (1.0 - z) * (1.0 - n * n)
            dz = dh * (h - n) * z * (1.0 - z)
            dr = dn * hn[t] * r * (1.0 - r)
            dgi[:, t, :H] = dz
            dgi[:, t, H : 2 * H] = dr
            dgi[:, t, 2 * H :] = dn
            dgh_t = dgh[t]
            dgh_t[:, :H] = dz
            dgh_t[:, H : 2 * H] = dr
            dgh_t[:, 2 * H :] = dn * r
            dh = dh * z + dgh_t @ Whh.T
        gx = dgi @ Wih.T
        if reverse:
            gx = gx[:, ::-1]
        gw_ih = xs.reshape(-1, D).T @ dgi.reshape(-1, 3 * H)
        gb_ih = dgi.sum(axis=(0, 1))
        gw_hh = np.einsum("tbh,tbk->hk", hs[:-1], dgh)
        gb_hh = dgh.sum(axis=(0, 1))
        return np.ascontiguousarray(gx), gw_ih, gw_hh, gb_ih, gb_hh

    return make_result(out, (x, w_ih, w_hh, b_ih, b_hh), backward, "gru")
