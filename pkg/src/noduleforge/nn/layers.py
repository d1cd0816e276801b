"""Volumetric network layers with analytic forward and backward passes.

Everything runs in float64 on (N, C, D, H, W) arrays. Convolution is
im2col + GEMM, chunked through a reusable per-thread scratch buffer so
repeated calls at training shapes do not thrash the allocator.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from ..exceptions import ShapeError
from ..validation import as_tensor5, check_triple

SPATIAL_AXES = ("depth", "height", "width")

_SCRATCH_CHUNK_BYTES = 48 << 20

_tls = threading.local()


def _scratch(n: int) -> np.ndarray:
    """A float64 work buffer of at least n elements, reused per thread."""
    buf = getattr(_tls, "buf", None)
    if buf is None or buf.size < n:
        buf = np.empty(n + (n >> 3), dtype=np.float64)
        _tls.buf = buf
    return buf[:n]


@dataclass
class LayerParams:
    """Parameters and hyperparameters of a single layer.

    kind is one of 'conv3d', 'batchnorm3d', 'relu', 'maxpool3d'. Conv
    weights are (outC, inC, kD, kH, kW); bias is (outC,). BatchNorm
    vectors are per channel. `block` is a structural tag used by the
    model executors to group layers into stems, residual units and heads.
    """

    kind: str
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_running_mean: np.ndarray | None = None
    bn_running_var: np.ndarray | None = None
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    window: tuple[int, int, int] | None = None
    block: str = ""

    @property
    def out_channels(self) -> int:
        return int(self.weights.shape[0])

    @property
    def in_channels(self) -> int:
        return int(self.weights.shape[1])

    def copy(self) -> "LayerParams":
        dup = lambda a: None if a is None else a.copy()
        return LayerParams(
            kind=self.kind,
            weights=dup(self.weights),
            bias=dup(self.bias),
            bn_gamma=dup(self.bn_gamma),
            bn_beta=dup(self.bn_beta),
            bn_running_mean=dup(self.bn_running_mean),
            bn_running_var=dup(self.bn_running_var),
            stride=tuple(self.stride),
            padding=tuple(self.padding),
            window=None if self.window is None else tuple(self.window),
            block=self.block,
        )


def conv_output_shape(in_spatial, kernel, stride, padding) -> tuple[int, int, int]:
    """floor((in + 2*pad - kernel) / stride) + 1 per axis, validated."""
    out = []
    for axis, name in enumerate(SPATIAL_AXES):
        n = in_spatial[axis] + 2 * padding[axis] - kernel[axis]
        if n < 0:
            raise ShapeError(
                f"kernel {kernel[axis]} does not fit padded input "
                f"{in_spatial[axis] + 2 * padding[axis]} along {name}"
            )
        out.append(n // stride[axis] + 1)
    return tuple(out)


def _pad_spatial(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    pD, pH, pW = padding
    return np.pad(x, ((0, 0), (0, 0), (pD, pD), (pH, pH), (pW, pW)))


def _conv_raw(x: np.ndarray, w: np.ndarray, stride, padding) -> np.ndarray:
    """Cross-correlate x (N,C,D,H,W) with w (O,C,kD,kH,kW), no bias."""
    N, C = x.shape[:2]
    O = w.shape[0]
    kD, kH, kW = w.shape[2:]
    sD, sH, sW = stride
    Do, Ho, Wo = conv_output_shape(x.shape[2:], w.shape[2:], stride, padding)
    xp = _pad_spatial(x, padding)
    K = kD * kH * kW
    # rows of the column matrix are (kernel offset, channel)
    w2 = np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1).reshape(O, K * C))
    out = np.empty((N, O, Do, Ho, Wo))
    plane = Ho * Wo
    rows_per = max(1, _SCRATCH_CHUNK_BYTES // max(1, K * C * plane * 8))
    for n in range(N):
        for d0 in range(0, Do, rows_per):
            d1 = min(Do, d0 + rows_per)
            m = (d1 - d0) * plane
            cols = _scratch(K * C * m).reshape(K * C, m)
            cols4 = cols.reshape(K, C, d1 - d0, Ho, Wo)
            off = 0
            for i in range(kD):
                dlo = (d0 + 0) * sD + i
                dhi = (d1 - 1) * sD + i + 1
                for j in range(kH):
                    for k in range(kW):
                        cols4[off] = xp[
                            n, :, dlo:dhi:sD, j:j + sH * Ho:sH, k:k + sW * Wo:sW
                        ]
                        off += 1
            out[n, :, d0:d1] = (w2 @ cols).reshape(O, d1 - d0, Ho, Wo)
    return out


def _check_conv_args(x: np.ndarray, params: LayerParams, stride, padding):
    if params.kind != "conv3d":
        raise ValueError(f"expected conv3d params, got kind {params.kind!r}")
    stride = check_triple(stride if stride is not None else params.stride, "stride", positive=True)
    padding = check_triple(padding if padding is not None else params.padding, "padding")
    w = params.weights
    if w is None or w.ndim != 5:
        raise ShapeError("conv3d weights must be (outC, inC, kD, kH, kW)")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels along channel axis, "
            f"kernel expects {w.shape[1]}"
        )
    return w, stride, padding


def conv3d_forward(x, params: LayerParams, stride=None, padding=None) -> np.ndarray:
    """Valid/padded strided 3D cross-correlation plus per-channel bias."""
    x = as_tensor5(x)
    w, stride, padding = _check_conv_args(x, params, stride, padding)
    out = _conv_raw(x, w, stride, padding)
    if params.bias is not None:
        out += np.asarray(params.bias, dtype=np.float64).reshape(1, -1, 1, 1, 1)
    return out


def conv3d_backward(x, params: LayerParams, grad_out, stride=None, padding=None):
    """Gradients of conv3d_forward w.r.t. input, weights, and bias.

    Returns (grad_input, grad_weights, grad_bias). grad_input is computed
    as a full correlation of the stride-dilated output gradient with the
    spatially flipped, channel-swapped kernel, reusing the forward path.
    """
    x = as_tensor5(x)
    w, stride, padding = _check_conv_args(x, params, stride, padding)
    grad_out = as_tensor5(grad_out, "grad_out")
    O, C = w.shape[:2]
    kD, kH, kW = w.shape[2:]
    sD, sH, sW = stride
    Do, Ho, Wo = conv_output_shape(x.shape[2:], w.shape[2:], stride, padding)
    expect = (x.shape[0], O, Do, Ho, Wo)
    if grad_out.shape != expect:
        for axis, (got, want) in enumerate(zip(grad_out.shape, expect)):
            if got != want:
                name = ("batch", "channel", *SPATIAL_AXES)[axis]
                raise ShapeError(f"grad_out {name} is {got}, expected {want}")

    grad_bias = grad_out.sum(axis=(0, 2, 3, 4))

    # weight gradient: accumulate GEMMs against the same column matrix
    N = x.shape[0]
    K = kD * kH * kW
    xp = _pad_spatial(x, padding)
    gw2 = np.zeros((O, K * C))
    plane = Ho * Wo
    rows_per = max(1, _SCRATCH_CHUNK_BYTES // max(1, K * C * plane * 8))
    for n in range(N):
        for d0 in range(0, Do, rows_per):
            d1 = min(Do, d0 + rows_per)
            m = (d1 - d0) * plane
            cols = _scratch(K * C * m).reshape(K * C, m)
            cols4 = cols.reshape(K, C, d1 - d0, Ho, Wo)
            off = 0
            for i in range(kD):
                dlo = d0 * sD + i
                dhi = (d1 - 1) * sD + i + 1
                for j in range(kH):
                    for k in range(kW):
                        cols4[off] = xp[
                            n, :, dlo:dhi:sD, j:j + sH * Ho:sH, k:k + sW * Wo:sW
                        ]
                        off += 1
            gw2 += grad_out[n, :, d0:d1].reshape(O, m) @ cols.T
    grad_weights = np.ascontiguousarray(
        gw2.reshape(O, kD, kH, kW, C).transpose(0, 4, 1, 2, 3)
    )

    # input gradient: full correlation with the flipped kernel
    if stride == (1, 1, 1):
        dil = grad_out
    else:
        dil = np.zeros((N, O, (Do - 1) * sD + 1, (Ho - 1) * sH + 1, (Wo - 1) * sW + 1))
        dil[:, :, ::sD, ::sH, ::sW] = grad_out
    w_flip = np.ascontiguousarray(
        w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    )
    full = _conv_raw(dil, w_flip, (1, 1, 1), (kD - 1, kH - 1, kW - 1))
    D, H, W = x.shape[2:]
    pD, pH, pW = padding
    padded = (D + 2 * pD, H + 2 * pH, W + 2 * pW)
    if full.shape[2:] == padded and padding == (0, 0, 0):
        grad_input = full
    else:
        gxp = np.zeros((N, C) + padded)
        gxp[:, :, : full.shape[2], : full.shape[3], : full.shape[4]] = full
        grad_input = np.ascontiguousarray(
            gxp[:, :, pD:pD + D, pH:pH + H, pW:pW + W]
        )
    return grad_input, grad_weights, grad_bias


def maxpool3d(x, window, stride) -> tuple[np.ndarray, np.ndarray]:
    """Windowed max with argmax recorded as flat (D,H,W) source indices.

    Ties resolve to the lowest flat index, so backward routing is
    deterministic.
    """
    x = as_tensor5(x)
    window = check_triple(window, "window", positive=True)
    stride = check_triple(stride, "stride", positive=True)
    for axis, name in enumerate(SPATIAL_AXES):
        if window[axis] > x.shape[2 + axis]:
            raise ShapeError(
                f"pool window {window[axis]} exceeds input {x.shape[2 + axis]} along {name}"
            )
    Do, Ho, Wo = conv_output_shape(x.shape[2:], window, stride, (0, 0, 0))
    N, C, D, H, W = x.shape
    sD, sH, sW = stride
    v = np.lib.stride_tricks.sliding_window_view(x, window, axis=(2, 3, 4))
    v = v[:, :, ::sD, ::sH, ::sW]
    flat = v.reshape(N, C, Do, Ho, Wo, -1)
    am = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]
    # window-local (i, j, k) back to source flat index
    kH, kW = window[1], window[2]
    i = am // (kH * kW)
    j = (am // kW) % kH
    k = am % kW
    d0 = np.arange(Do).reshape(1, 1, Do, 1, 1) * sD
    h0 = np.arange(Ho).reshape(1, 1, 1, Ho, 1) * sH
    w0 = np.arange(Wo).reshape(1, 1, 1, 1, Wo) * sW
    argmax = ((d0 + i) * H + (h0 + j)) * W + (w0 + k)
    return np.ascontiguousarray(out), argmax


def maxpool3d_backward(x_shape, argmax: np.ndarray, grad_out) -> np.ndarray:
    """Scatter grad_out back to the argmax source positions."""
    grad_out = as_tensor5(grad_out, "grad_out")
    N, C, D, H, W = x_shape
    if argmax.shape != grad_out.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match pool output {argmax.shape}"
        )
    gx = np.zeros(N * C * D * H * W)
    base = (np.arange(N * C) * (D * H * W)).reshape(N, C, 1, 1, 1)
    np.add.at(gx, (base + argmax).ravel(), grad_out.ravel())
    return gx.reshape(N, C, D, H, W)


@dataclass
class BatchNormCache:
    """Saved intermediates from a train-mode batch norm forward."""

    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    new_running_mean: np.ndarray
    new_running_var: np.ndarray


def batchnorm3d_forward(x, params: LayerParams, mode: str = "train",
                        eps: float = 1e-5, momentum: float = 0.9):
    """Per-channel batch normalization with affine transform.

    Train mode normalizes by batch statistics and returns a cache holding
    updated running statistics (running <- momentum*running + (1-m)*batch);
    the caller decides when to commit them, so shared params are never
    mutated here. Infer mode normalizes by the stored running statistics
    and returns cache None.
    """
    x = as_tensor5(x)
    if params.kind != "batchnorm3d":
        raise ValueError(f"expected batchnorm3d params, got kind {params.kind!r}")
    gamma = np.asarray(params.bn_gamma, dtype=np.float64)
    beta = np.asarray(params.bn_beta, dtype=np.float64)
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(
            f"input has {x.shape[1]} channels along channel axis, "
            f"batch norm expects {gamma.shape[0]}"
        )
    cshape = (1, -1, 1, 1, 1)
    if mode == "infer":
        mean = np.asarray(params.bn_running_mean, dtype=np.float64)
        var = np.asarray(params.bn_running_var, dtype=np.float64)
        inv_std = 1.0 / np.sqrt(var + eps)
        out = (x - mean.reshape(cshape)) * (gamma * inv_std).reshape(cshape)
        out += beta.reshape(cshape)
        return out, None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    n_stat = x.shape[0] * x.shape[2] * x.shape[3] * x.shape[4]
    if n_stat < 2:
        raise ValueError(
            f"train-mode batch norm needs at least 2 values per channel, got {n_stat}"
        )
    mean = x.mean(axis=(0, 2, 3, 4))
    var = x.var(axis=(0, 2, 3, 4))
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean.reshape(cshape)) * inv_std.reshape(cshape)
    out = x_hat * gamma.reshape(cshape) + beta.reshape(cshape)
    cache = BatchNormCache(
        x_hat=x_hat,
        inv_std=inv_std,
        gamma=gamma,
        new_running_mean=momentum * np.asarray(params.bn_running_mean) + (1 - momentum) * mean,
        new_running_var=momentum * np.asarray(params.bn_running_var) + (1 - momentum) * var,
    )
    return out, cache


def batchnorm3d_backward(cache: BatchNormCache, grad_out):
    """Gradients of the train-mode forward w.r.t. input, gamma, beta."""
    grad_out = as_tensor5(grad_out, "grad_out")
    x_hat = cache.x_hat
    if grad_out.shape != x_hat.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match activations {x_hat.shape}"
        )
    axes = (0, 2, 3, 4)
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3] * grad_out.shape[4]
    cshape = (1, -1, 1, 1, 1)
    grad_gamma = (grad_out * x_hat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    # d/dx of ((x - mu) / sigma) folded through the batch statistics
    grad_input = (cache.gamma * cache.inv_std).reshape(cshape) * (
        grad_out
        - (grad_beta / m).reshape(cshape)
        - x_hat * (grad_gamma / m).reshape(cshape)
    )
    return grad_input, grad_gamma, grad_beta


def relu(x) -> np.ndarray:
    """Elementwise max(0, x)."""
    x = as_tensor5(x)
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    """Pass grad where input > 0; the subgradient at 0 is taken as 0."""
    x = as_tensor5(x)
    grad_out = as_tensor5(grad_out, "grad_out")
    if grad_out.shape != x.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match input {x.shape}"
        )
    return np.where(x > 0.0, grad_out, 0.0)


def global_avg_pool(x) -> np.ndarray:
    """Mean over the spatial axes, keeping a (N, C, 1, 1, 1) layout."""
    x = as_tensor5(x)
    return x.mean(axis=(2, 3, 4), keepdims=True)


def global_avg_pool_backward(x_shape, grad_out) -> np.ndarray:
    grad_out = as_tensor5(grad_out, "grad_out")
    m = x_shape[2] * x_shape[3] * x_shape[4]
    return np.broadcast_to(grad_out / m, x_shape).copy()
