"""Dense NCHW numerics with hand-written reverse-mode gradients.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)``.
Every backward function returns the gradient with respect to the layer
input and, when ``accumulate`` is true, adds parameter gradients into the
:class:`LayerParams` it was given.

Backward functions accept a ``grad_out`` whose batch axis is larger than
the cached input's batch axis of one.  The input-gradient path then
broadcasts, which is what batched sensitivity sweeps rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass
class LayerParams:
    """Weights and gradient buffers of one layer.

    Convolutions store ``weight`` as ``(out_c, in_c, kh, kw)`` and ``bias``
    as ``(out_c,)``.  Transposed convolutions use the same layout, with
    ``out_c`` the channel count they produce.  PReLU layers only carry
    ``slope`` (one per channel).
    """

    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    slope: Optional[np.ndarray] = None
    weight_grad: Optional[np.ndarray] = field(default=None, repr=False)
    bias_grad: Optional[np.ndarray] = field(default=None, repr=False)
    slope_grad: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.zero_grad()

    @classmethod
    def conv(cls, weight, bias=None):
        weight = np.asarray(weight)
        if bias is None:
            bias = np.zeros(weight.shape[0], dtype=weight.dtype)
        return cls(weight=weight, bias=np.asarray(bias, dtype=weight.dtype))

    @classmethod
    def prelu(cls, slope):
        return cls(slope=np.asarray(slope))

    @property
    def kind(self) -> str:
        return "prelu" if self.slope is not None else "conv"

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        if self.slope is not None:
            return [("slope", self.slope)]
        return [("weight", self.weight), ("bias", self.bias)]

    def grads(self) -> list[np.ndarray]:
        if self.slope is not None:
            return [self.slope_grad]
        return [self.weight_grad, self.bias_grad]

    def zero_grad(self):
        for name, arr in self.arrays():
            if arr is None:
                continue
            g = getattr(self, name + "_grad")
            if g is not None and g.shape == arr.shape and g.dtype == arr.dtype:
                g[...] = 0
            else:
                setattr(self, name + "_grad", np.zeros_like(arr))

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(**{k: v.astype(dtype) for k, v in self.arrays()})


def _check4(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp, kh, kw, stride, ho, wo):
    """Columns ``(n, kh*kw*c, ho*wo)`` of a padded map, rows ordered (tap row, tap col, channel)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, kh, kw, c, ho, wo), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, a, b] = xp[:, :, a : a + (ho - 1) * stride + 1 : stride, b : b + (wo - 1) * stride + 1 : stride]
    return cols.reshape(n, kh * kw * c, ho * wo)


def _col2im(cols, c, kh, kw, stride, hp, wp, ho, wo):
    """Adjoint of :func:`_im2col`: sum ``(n, kh*kw*c, ho*wo)`` columns into a padded map."""
    n = cols.shape[0]
    cols = cols.reshape(n, kh, kw, c, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            out[:, :, a : a + (ho - 1) * stride + 1 : stride, b : b + (wo - 1) * stride + 1 : stride] += cols[:, a, b]
    return out


def _wmat(w):
    # (oc, ic, kh, kw) -> (oc, kh*kw*ic), matching the im2col row order
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _wgrad(grad, cols, shape):
    # sum_n grad (n, oc, L) @ cols (n, K, L)^T, back to (oc, ic, kh, kw)
    oc, ic, kh, kw = shape
    g = np.matmul(grad, cols.transpose(0, 2, 1)).sum(axis=0)
    return g.reshape(oc, kh, kw, ic).transpose(0, 3, 1, 2)


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: np.ndarray, params: LayerParams, stride: int = 1, pad: int = 1) -> np.ndarray:
    """Zero-padded cross-correlation (no kernel flip) plus bias."""
    _check4(x)
    w = params.weight
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input shape {x.shape} does not match weight shape {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    _, _, kh, kw = w.shape
    ho = conv_output_size(x.shape[2], kh, stride, pad)
    wo = conv_output_size(x.shape[3], kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input shape {x.shape} too small for weight shape {w.shape}")
    cols = _im2col(_pad(x, pad), kh, kw, stride, ho, wo)
    out = np.matmul(_wmat(w), cols) + params.bias[:, None]
    return out.reshape(x.shape[0], w.shape[0], ho, wo)


def conv2d_backward(x, params: LayerParams, grad_out, stride=1, pad=1, accumulate=True):
    """Gradient of :func:`conv2d` w.r.t. its input; adds weight/bias grads when ``accumulate``."""
    if x is None:
        raise ShapeError("conv2d_backward: no cached forward input")
    w = params.weight
    oc, ic, kh, kw = w.shape
    h, wd = x.shape[2], x.shape[3]
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    expected = (oc, ho, wo)
    if grad_out.ndim != 4 or grad_out.shape[1:] != expected or (
        grad_out.shape[0] != x.shape[0] and x.shape[0] != 1
    ):
        raise ShapeError(
            f"conv2d_backward: grad_out shape {grad_out.shape} does not match forward output "
            f"{(x.shape[0],) + expected}"
        )
    n = grad_out.shape[0]
    if accumulate:
        if n != x.shape[0]:
            raise ShapeError("conv2d_backward: parameter grads need matching batch sizes")
        cols = _im2col(_pad(x, pad), kh, kw, stride, ho, wo)
        params.weight_grad += _wgrad(grad_out.reshape(n, oc, -1), cols, w.shape)
        params.bias_grad += grad_out.sum(axis=(0, 2, 3))
    if stride == 1 and pad <= kh - 1 and pad <= kw - 1 and kh == kw:
        # full correlation with the flipped, transposed kernel
        flipped = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        cols = _im2col(_pad(grad_out, kh - 1 - pad), kh, kw, 1, h, wd)
        return np.matmul(_wmat(flipped), cols).reshape(n, ic, h, wd)
    cols = np.matmul(_wmat(w).T, grad_out.reshape(n, oc, -1))
    gp = _col2im(cols, ic, kh, kw, stride, h + 2 * pad, wd + 2 * pad, ho, wo)
    return np.ascontiguousarray(gp[:, :, pad : pad + h, pad : pad + wd])


def conv_transpose_output_size(size, k, stride, pad):
    return stride * (size - 1) + k - 2 * pad


def conv_transpose2d(x: np.ndarray, params: LayerParams, stride: int = 2, pad: int = 1) -> np.ndarray:
    """Transposed convolution, the exact adjoint of :func:`conv2d` with the same geometry."""
    _check4(x)
    w = params.weight
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv_transpose2d: input shape {x.shape} does not match weight shape {w.shape}")
    oc, _, kh, kw = w.shape
    n, _, h, wd = x.shape
    ho = conv_transpose_output_size(h, kh, stride, pad)
    wo = conv_transpose_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: non-positive output size {(ho, wo)} for input {x.shape}")
    cols = np.matmul(_wmat(w.transpose(1, 0, 2, 3)).T, x.reshape(n, x.shape[1], -1))
    full = _col2im(cols, oc, kh, kw, stride, ho + 2 * pad, wo + 2 * pad, h, wd)
    out = full[:, :, pad : pad + ho, pad : pad + wo]
    return np.ascontiguousarray(out + params.bias[None, :, None, None])


def conv_transpose2d_backward(x, params: LayerParams, grad_out, stride=2, pad=1, accumulate=True):
    if x is None:
        raise ShapeError("conv_transpose2d_backward: no cached forward input")
    w = params.weight
    oc, ic, kh, kw = w.shape
    h, wd = x.shape[2], x.shape[3]
    expected = (
        oc,
        conv_transpose_output_size(h, kh, stride, pad),
        conv_transpose_output_size(wd, kw, stride, pad),
    )
    if grad_out.ndim != 4 or grad_out.shape[1:] != expected or (
        grad_out.shape[0] != x.shape[0] and x.shape[0] != 1
    ):
        raise ShapeError(
            f"conv_transpose2d_backward: grad_out shape {grad_out.shape} does not match "
            f"forward output {(x.shape[0],) + expected}"
        )
    n = grad_out.shape[0]
    cols = _im2col(_pad(grad_out, pad), kh, kw, stride, h, wd)  # (n, kh*kw*oc, h*w)
    wt = w.transpose(1, 0, 2, 3)  # viewed as a strided conv from oc to ic channels
    if accumulate:
        if n != x.shape[0]:
            raise ShapeError("conv_transpose2d_backward: parameter grads need matching batch sizes")
        params.weight_grad += _wgrad(x.reshape(n, ic, -1), cols, wt.shape).transpose(1, 0, 2, 3)
        params.bias_grad += grad_out.sum(axis=(0, 2, 3))
    return np.matmul(_wmat(wt), cols).reshape(n, ic, h, wd)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pooling.

    Returns the pooled tensor and the window offset (0..3, row-major) of
    each maximum.  Ties go to the smallest offset.
    """
    _check4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial dims must be even, got {x.shape}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(grad_out: np.ndarray, idx: np.ndarray) -> np.ndarray:
    if grad_out.shape[1:] != idx.shape[1:]:
        raise ShapeError(f"maxpool2x2_backward: grad_out {grad_out.shape} vs argmax map {idx.shape}")
    n, c, h2, w2 = grad_out.shape
    gin = np.zeros((n, c, h2, 2, w2, 2), dtype=grad_out.dtype)
    for off in range(4):
        gin[:, :, :, off // 2, :, off % 2] = np.where(idx == off, grad_out, 0)
    return gin.reshape(n, c, 2 * h2, 2 * w2)


def prelu(x: np.ndarray, params: LayerParams) -> np.ndarray:
    _check4(x)
    a = params.slope
    if a.shape != (x.shape[1],):
        raise ShapeError(f"prelu: slope shape {a.shape} does not match input channels of {x.shape}")
    return np.where(x >= 0, x, a[None, :, None, None] * x)


def prelu_backward(x, params: LayerParams, grad_out, accumulate=True):
    if x is None:
        raise ShapeError("prelu_backward: no cached forward input")
    pos = x >= 0
    if accumulate:
        params.slope_grad += np.where(pos, 0, x * grad_out).sum(axis=(0, 2, 3))
    return np.where(pos, grad_out, params.slope[None, :, None, None] * grad_out)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check4(a, "a")
    _check4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} disagree outside the channel axis")
    return np.concatenate([a, b], axis=1)


def split_channels(grad: np.ndarray, c_first: int) -> tuple[np.ndarray, np.ndarray]:
    return grad[:, :c_first], grad[:, c_first:]


def relative_error(analytic, numeric, floor=1e-8) -> float:
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_gradient(func: Callable[[np.ndarray], float], x: np.ndarray, delta: float) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + delta
        fp = func(x)
        flat[k] = orig - delta
        fm = func(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * delta)
    return grad


def finite_diff_check(func, analytic_grad, x, delta=1e-4) -> float:
    """Max elementwise relative error between ``analytic_grad`` and central differences of ``func`` at ``x``.

    ``func`` maps an array shaped like ``x`` to a scalar.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    return relative_error(analytic_grad, numeric_gradient(func, x, delta))
