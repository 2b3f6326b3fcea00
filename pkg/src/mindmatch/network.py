"""Encoder-decoder frame interpolation network and its inversion to input gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import LayerParams, ShapeError

PRELU_INIT = 0.25


class StaleCacheError(RuntimeError):
    """Raised when a backward pass is requested without a valid forward cache."""


@dataclass(frozen=True)
class NetConfig:
    input_h: int = 32
    input_w: int = 64
    block_channels: tuple = (8, 8, 16, 16, 16)
    dconv_channels: tuple = (16, 16, 16, 8, 8)
    convs_per_block: int = 2
    head_convs: int = 1
    # Conv Block k feeds Dconv Block k (same resolution); None means blocks 2..depth-1
    skips: Optional[tuple] = None
    out_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "dconv_channels", tuple(int(c) for c in self.dconv_channels))
        if self.skips is None:
            object.__setattr__(self, "skips", tuple(range(2, len(self.block_channels))))
        else:
            object.__setattr__(self, "skips", tuple(sorted(int(s) for s in self.skips)))

    @classmethod
    def paper(cls, input_h=128, input_w=384):
        return cls(input_h, input_w, (96, 96, 128, 128, 128), (128, 128, 128, 96, 96), 3)

    @property
    def depth(self) -> int:
        return len(self.block_channels)

    def validate(self):
        d = self.depth
        if len(self.dconv_channels) != d:
            raise ValueError(
                f"dconv_channels has {len(self.dconv_channels)} entries, block_channels has {d}"
            )
        if self.convs_per_block < 1 or self.head_convs < 1:
            raise ValueError("convs_per_block and head_convs must be >= 1")
        if any(c < 1 for c in self.block_channels + self.dconv_channels):
            raise ValueError("channel counts must be positive")
        if self.input_h < 1 or self.input_w < 1:
            raise ValueError("input dims must be positive")
        if self.input_h % 2**d or self.input_w % 2**d:
            raise ValueError(
                f"input {self.input_h}x{self.input_w} not divisible by 2^{d} for {d} pooling stages"
            )
        for s in self.skips:
            if not 1 <= s <= d - 1:
                raise ValueError(f"skip from Conv Block {s} has no matching Dconv Block input")

    def block_shapes(self) -> dict:
        """Output (c, h, w) of every block, keyed 'conv1'.. and 'dconv5'.., plus 'output'."""
        shapes = {}
        h, w = self.input_h, self.input_w
        for b, c in enumerate(self.block_channels, 1):
            h, w = h // 2, w // 2
            shapes[f"conv{b}"] = (c, h, w)
        for k, c in zip(range(self.depth, 0, -1), self.dconv_channels):
            h, w = h * 2, w * 2
            shapes[f"dconv{k}"] = (c, h, w)
        shapes["output"] = (self.out_channels, self.input_h, self.input_w)
        return shapes


@dataclass(frozen=True)
class PixelSeed:
    i: int
    j: int
    # None seeds every output channel with 1 (gradient of the channel sum)
    channel: Optional[int] = None


def _xavier(rng, out_c, in_c, k):
    fan_in, fan_out = in_c * k * k, out_c * k * k
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(out_c, in_c, k, k))


def _layer_plan(cfg: NetConfig):
    """Yield (kind, in_c, out_c) for every parameterised layer, encoder first."""
    plan = []
    c = 6
    for out in cfg.block_channels:
        for _ in range(cfg.convs_per_block):
            plan += [("conv", c, out), ("prelu", out, out)]
            c = out
    for k, out in zip(range(cfg.depth, 0, -1), cfg.dconv_channels):
        if k in cfg.skips:
            c += cfg.block_channels[k - 1]
        plan += [("convT", c, out), ("prelu", out, out)]
        c = out
        for _ in range(cfg.convs_per_block - 1):
            plan += [("conv", c, out), ("prelu", out, out)]
    for h in range(cfg.head_convs):
        last = h == cfg.head_convs - 1
        out = cfg.out_channels if last else c
        plan.append(("conv", c, out))
        if not last:
            plan.append(("prelu", out, out))
        c = out
    return plan


class MindNet:
    """Interpolation network F(I1, I3) -> I2.

    Layout per Conv Block: ``[conv3x3 -> PReLU] * convs_per_block -> maxpool``.
    Per Dconv Block: ``[convT4x4/2 -> PReLU] -> [conv3x3 -> PReLU] * (convs_per_block - 1)``.
    The head is ``head_convs`` 3x3 convolutions, the last one without activation.
    """

    def __init__(self, config: NetConfig, layers: Sequence[LayerParams]):
        config.validate()
        plan = _layer_plan(config)
        if len(layers) != len(plan):
            raise ValueError(f"expected {len(plan)} layers for this config, got {len(layers)}")
        for (kind, in_c, out_c), p in zip(plan, layers):
            if kind == "prelu":
                if p.slope is None or p.slope.shape != (out_c,):
                    raise ValueError(f"PReLU layer needs slope of shape ({out_c},)")
            else:
                k = 4 if kind == "convT" else 3
                if p.weight is None or p.weight.shape != (out_c, in_c, k, k):
                    got = None if p.weight is None else p.weight.shape
                    raise ValueError(f"{kind} layer needs weight {(out_c, in_c, k, k)}, got {got}")
        self.config = config
        self.layers = list(layers)
        self.kinds = [k for k, _, _ in plan]
        self._version = 0
        self._tape = None
        self._tape_version = -1
        self._inputs = None
        self.backward_seeds = 0
        self.backward_sweeps = 0

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def astype(self, dtype) -> "MindNet":
        return MindNet(self.config, [p.astype(dtype) for p in self.layers])

    def parameters(self) -> list[np.ndarray]:
        return [a for p in self.layers for _, a in p.arrays()]

    def zero_grad(self):
        for p in self.layers:
            p.zero_grad()

    def invalidate(self):
        """Mark cached activations stale; call after any in-place parameter change."""
        self._version += 1
        self._tape = None

    # forward -----------------------------------------------------------

    def forward(self, i1: np.ndarray, i3: np.ndarray) -> np.ndarray:
        cfg = self.config
        want = (3, cfg.input_h, cfg.input_w)
        if i1.ndim != 4 or i1.shape[1:] != want or i3.shape != i1.shape:
            raise ShapeError(
                f"forward expects two (n, {want[0]}, {want[1]}, {want[2]}) inputs, "
                f"got {i1.shape} and {i3.shape}"
            )
        dtype = self.dtype
        x = T.concat_channels(i1.astype(dtype, copy=False), i3.astype(dtype, copy=False))
        tape = []
        layers = iter(self.layers)

        def run(kind, x):
            p = next(layers)
            if kind == "conv":
                tape.append(("conv", p, x))
                return T.conv2d(x, p, 1, 1)
            if kind == "convT":
                tape.append(("convT", p, x))
                return T.conv_transpose2d(x, p, 2, 1)
            tape.append(("prelu", p, x))
            return T.prelu(x, p)

        kinds = iter(self.kinds)
        feats = {}
        for b in range(1, cfg.depth + 1):
            for _ in range(2 * cfg.convs_per_block):
                x = run(next(kinds), x)
            x, idx = T.maxpool2x2(x)
            tape.append(("pool", idx, None))
            feats[b] = x
            tape.append(("feat", b, None))
        for k in range(cfg.depth, 0, -1):
            if k in cfg.skips:
                tape.append(("concat", feats[k].shape[1], k))
                x = T.concat_channels(feats[k], x)
            for _ in range(2 * cfg.convs_per_block):
                x = run(next(kinds), x)
        for kind in kinds:
            x = run(kind, x)
        self._tape = tape
        self._tape_version = self._version
        self._inputs = (i1.copy(), i3.copy())
        return x

    __call__ = forward

    def cache_matches(self, i1, i3) -> bool:
        return (
            self._tape is not None
            and self._tape_version == self._version
            and self._inputs[0].shape == i1.shape
            and np.array_equal(self._inputs[0], i1)
            and np.array_equal(self._inputs[1], i3)
        )

    # backward ----------------------------------------------------------

    def backward(self, grad_out: np.ndarray, accumulate: bool = True):
        """Back-propagate ``grad_out`` through the cached forward pass.

        Returns ``(g1, g3)``, the gradients w.r.t. the two input frames.
        Parameter gradients are accumulated only when ``accumulate`` is true.
        With ``accumulate=False`` the batch of ``grad_out`` may exceed the
        cached batch of one; activations broadcast across it.
        """
        if self._tape is None or self._tape_version != self._version:
            raise StaleCacheError("no valid forward cache; run forward() after the last parameter update")
        g = grad_out
        pending = {}
        for op, a, b in reversed(self._tape):
            if op == "conv":
                g = T.conv2d_backward(b, a, g, 1, 1, accumulate)
            elif op == "convT":
                g = T.conv_transpose2d_backward(b, a, g, 2, 1, accumulate)
            elif op == "prelu":
                g = T.prelu_backward(b, a, g, accumulate)
            elif op == "pool":
                g = T.maxpool2x2_backward(g, a)
            elif op == "concat":
                skip_g, g = T.split_channels(g, a)
                pending[b] = skip_g
            elif op == "feat" and a in pending:
                g = g + pending.pop(a)
        g1, g3 = T.split_channels(g, 3)
        return g1, g3

    def seed_tensor(self, seeds: Sequence[PixelSeed]) -> np.ndarray:
        cfg = self.config
        g = np.zeros((len(seeds), cfg.out_channels, cfg.input_h, cfg.input_w), dtype=self.dtype)
        for n, s in enumerate(seeds):
            if not (0 <= s.i < cfg.input_h and 0 <= s.j < cfg.input_w):
                raise IndexError(f"seed ({s.i}, {s.j}) outside {cfg.input_h}x{cfg.input_w} output")
            if s.channel is None:
                g[n, :, s.i, s.j] = 1
            else:
                g[n, s.channel, s.i, s.j] = 1
        return g

    def backward_to_input(self, seed: PixelSeed):
        """Input gradients of output pixel ``seed`` for a forward pass over a single pair.

        Returns ``(g1, g3)`` each of shape ``(1, 3, h, w)``.  Parameter
        gradients are left untouched.
        """
        return self.backward_seeds_to_input([seed])

    def backward_seeds_to_input(self, seeds: Sequence[PixelSeed]):
        if self._tape is not None and self._inputs[0].shape[0] != 1:
            raise ShapeError("input inversion needs a forward pass over a single image pair")
        g1, g3 = self.backward(self.seed_tensor(seeds), accumulate=False)
        self.backward_seeds += len(seeds)
        self.backward_sweeps += 1
        return g1, g3


def build(config: NetConfig, rng_seed: int = 0, dtype=np.float32) -> MindNet:
    """Xavier-uniform weights, zero biases, PReLU slopes at 0.25."""
    config.validate()
    rng = np.random.default_rng(rng_seed)
    layers = []
    for kind, in_c, out_c in _layer_plan(config):
        if kind == "prelu":
            layers.append(LayerParams.prelu(np.full(out_c, PRELU_INIT, dtype=dtype)))
        else:
            k = 4 if kind == "convT" else 3
            w = _xavier(rng, out_c, in_c, k).astype(dtype)
            layers.append(LayerParams.conv(w, np.zeros(out_c, dtype=dtype)))
    return MindNet(config, layers)
