"""Hand-built linear networks with known Jacobians, used as matching oracles."""

from __future__ import annotations

import numpy as np

from .network import MindNet, NetConfig
from .tensor import LayerParams


def _steps(d, n):
    """Split an integer displacement into ``n`` steps of at most one pixel per axis."""
    return [tuple(int(np.sign(r)) if k < abs(r) else 0 for r in d) for k in range(n)]


def shift_network(height, width, d1=(0, 0), d3=None, dtype=np.float64) -> MindNet:
    """Linear net computing ``0.5 * I1(p - d1) + 0.5 * I3(p + d3)`` per colour channel.

    ``d3`` defaults to ``d1``.  Built on the depth-0 configuration (no
    pooling) with a stack of 3x3 convolutions whose PReLU slopes are 1, so
    interior anchors ``p`` have single-pixel sensitivity at ``p - d1`` in I1
    and ``p + d3`` in I3.
    """
    d3 = d1 if d3 is None else d3
    n = max(1, *(abs(v) for v in (*d1, *d3)))
    cfg = NetConfig(height, width, (), (), 1, head_convs=n, skips=())
    s1, s3 = _steps(d1, n), _steps(d3, n)
    layers = []
    for k in range(n):
        last = k == n - 1
        out_c = 3 if last else 6
        w = np.zeros((out_c, 6, 3, 3), dtype=dtype)
        gain = 0.5 if last else 1.0
        for c in range(3):
            o1, o3 = (c, c) if last else (c, c + 3)
            # y(p) = x(p - s) for I1 channels, y(p) = x(p + s) for I3 channels
            w[o1, c, 1 - s1[k][0], 1 - s1[k][1]] += gain
            w[o3, c + 3, 1 + s3[k][0], 1 + s3[k][1]] += gain
        layers.append(LayerParams.conv(w, np.zeros(out_c, dtype=dtype)))
        if not last:
            layers.append(LayerParams.prelu(np.ones(6, dtype=dtype)))
    return MindNet(cfg, layers)


def averaging_network(height, width, dtype=np.float64) -> MindNet:
    """``0.5 * I1 + 0.5 * I3`` via centre-tap kernels."""
    return shift_network(height, width, (0, 0), (0, 0), dtype)
