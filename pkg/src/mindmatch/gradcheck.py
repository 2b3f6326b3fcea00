"""Finite-difference and adjoint checks over every layer, in double precision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .network import NetConfig, PixelSeed, build
from .tensor import LayerParams, finite_diff_check, numeric_gradient, relative_error
from .train import charbonnier_loss

FD_TOL = 1e-4
ADJOINT_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def _param_check(name, fwd, bwd, p: LayerParams, rng, delta):
    """FD check of every parameter array of ``p`` for the scalar ``sum(r * fwd())``."""
    y = fwd()
    r = rng.standard_normal(y.shape)
    p.zero_grad()
    bwd(r)
    out = []
    for attr, arr in p.arrays():
        analytic = getattr(p, attr + "_grad").copy()
        orig = arr.copy()

        def f(v, arr=arr):
            arr[...] = v
            return float((fwd() * r).sum())

        numeric = numeric_gradient(f, orig, delta)
        arr[...] = orig
        out.append(CheckResult(f"{name}.{attr}", relative_error(analytic, numeric), FD_TOL))
    return out


def _input_check(name, fwd, bwd, x, rng, delta):
    y = fwd(x)
    r = rng.standard_normal(y.shape)
    g = bwd(x, r)
    return CheckResult(f"{name}.input", finite_diff_check(lambda v: float((fwd(v) * r).sum()), g, x, delta), FD_TOL)


def _adjoint(name, lin, lin_t, u, v_shape, rng):
    v = rng.standard_normal(v_shape)
    lu = lin(u)
    lhs = float((lu * v).sum())
    rhs = float((u * lin_t(v)).sum())
    scale = float(np.linalg.norm(lu) * np.linalg.norm(v)) or 1.0
    return CheckResult(f"{name}.adjoint", abs(lhs - rhs) / scale, ADJOINT_TOL)


def check_seed(seed: int, delta: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    res = []

    # conv2d, stride 1 and 2
    for stride, pad in ((1, 1), (2, 1)):
        name = f"conv2d[s={stride},p={pad}]"
        x = rng.standard_normal((2, 3, 6, 5))
        p = LayerParams.conv(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4))
        res.append(_input_check(name, lambda v: T.conv2d(v, p, stride, pad),
                                lambda v, g: T.conv2d_backward(v, p, g, stride, pad, accumulate=False), x, rng, delta))
        res += _param_check(name, lambda: T.conv2d(x, p, stride, pad),
                            lambda g: T.conv2d_backward(x, p, g, stride, pad), p, rng, delta)
        p0 = LayerParams.conv(p.weight)
        y_shape = T.conv2d(x, p0, stride, pad).shape
        res.append(_adjoint(name, lambda u: T.conv2d(u, p0, stride, pad),
                            lambda v: T.conv2d_backward(x, p0, v, stride, pad, accumulate=False), x, y_shape, rng))

    # transposed convolution in the network geometry
    name = "conv_transpose2d"
    x = rng.standard_normal((2, 3, 3, 4))
    p = LayerParams.conv(rng.standard_normal((2, 3, 4, 4)), rng.standard_normal(2))
    res.append(_input_check(name, lambda v: T.conv_transpose2d(v, p),
                            lambda v, g: T.conv_transpose2d_backward(v, p, g, accumulate=False), x, rng, delta))
    res += _param_check(name, lambda: T.conv_transpose2d(x, p), lambda g: T.conv_transpose2d_backward(x, p, g), p, rng, delta)
    p0 = LayerParams.conv(p.weight)
    res.append(_adjoint(name, lambda u: T.conv_transpose2d(u, p0),
                        lambda v: T.conv_transpose2d_backward(x, p0, v, accumulate=False), x, (2, 2, 6, 8), rng))

    # max pooling; distinct values spaced far beyond delta keep argmaxes fixed
    name = "maxpool2x2"
    x = (rng.permutation(2 * 3 * 6 * 8) * 0.01 + rng.uniform(0, 1e-3, 2 * 3 * 6 * 8)).reshape(2, 3, 6, 8)
    res.append(_input_check(name, lambda v: T.maxpool2x2(v)[0],
                            lambda v, g: T.maxpool2x2_backward(g, T.maxpool2x2(v)[1]), x, rng, delta))

    # PReLU away from the kink
    name = "prelu"
    x = rng.choice([-1.0, 1.0], size=(2, 3, 4, 5)) * rng.uniform(0.1, 1.0, size=(2, 3, 4, 5))
    p = LayerParams.prelu(rng.uniform(0.05, 0.5, 3))
    res.append(_input_check(name, lambda v: T.prelu(v, p), lambda v, g: T.prelu_backward(v, p, g, accumulate=False), x, rng, delta))
    res += _param_check(name, lambda: T.prelu(x, p), lambda g: T.prelu_backward(x, p, g), p, rng, delta)

    # channel concatenation
    a, b = rng.standard_normal((2, 2, 3, 4)), rng.standard_normal((2, 3, 3, 4))
    res.append(_adjoint("concat_channels", lambda u: T.concat_channels(u, np.zeros_like(b)),
                        lambda v: T.split_channels(v, 2)[0], a, (2, 5, 3, 4), rng))
    res.append(_adjoint("concat_channels[b]", lambda u: T.concat_channels(np.zeros_like(a), u),
                        lambda v: T.split_channels(v, 2)[1], b, (2, 5, 3, 4), rng))

    # Charbonnier loss
    pred, target = rng.random((2, 3, 4, 4)), rng.random((2, 3, 4, 4))
    _, g = charbonnier_loss(pred, target, 0.1)
    res.append(CheckResult("charbonnier.pred", finite_diff_check(lambda v: charbonnier_loss(v, target, 0.1)[0], g, pred, delta), FD_TOL))
    return res


def check_network_row(seed: int, delta: float = 1e-6) -> CheckResult:
    """One output-pixel Jacobian row of a tiny two-block net against central differences."""
    rng = np.random.default_rng(seed)
    net = build(NetConfig(8, 8, (4, 4), (4, 4), 1), rng_seed=seed, dtype=np.float64)
    i1, i3 = rng.random((1, 3, 8, 8)), rng.random((1, 3, 8, 8))
    anchor = tuple(int(v) for v in rng.integers(0, 8, 2))
    net.forward(i1, i3)
    g1, g3 = net.backward_to_input(PixelSeed(*anchor))
    x = np.concatenate([i1, i3], axis=1)

    def f(v):
        return float(net.forward(v[:, :3], v[:, 3:])[0, :, anchor[0], anchor[1]].sum())

    numeric = numeric_gradient(f, x, delta)
    analytic = np.concatenate([g1, g3], axis=1)
    err = float(np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-8))
    return CheckResult("mindnet.jacobian_row", err, FD_TOL)


def run(seeds=range(20)) -> list[CheckResult]:
    out = []
    for s in seeds:
        out += check_seed(s)
        out.append(check_network_row(s))
    return out
