"""Unsupervised training of the interpolation network on frame triplets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .network import MindNet

log = logging.getLogger(__name__)

FLIPS = ("none", "v", "h", "vh")


@dataclass
class Triplet:
    i1: np.ndarray
    i2: np.ndarray
    i3: np.ndarray
    sequence: int = 0
    frame: int = 0
    direction: str = "forward"
    flip: str = "none"

    def __post_init__(self):
        if not (self.i1.shape == self.i2.shape == self.i3.shape):
            raise ValueError(f"triplet frames disagree in shape: {self.i1.shape}, {self.i2.shape}, {self.i3.shape}")

    @property
    def provenance(self):
        return (self.sequence, self.frame, self.direction, self.flip)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    charbonnier_eps: float = 0.1
    epochs: int = 1
    rng_seed: int = 0
    # stop after this many optimizer steps (0: run all epochs)
    max_steps: int = 0
    plateau_window: int = 50
    # 0 keeps the learning rate constant
    plateau_patience: int = 200
    plateau_tol: float = 1e-3

    def validate(self):
        for name in ("lr", "adam_eps", "batch_size", "charbonnier_eps", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {getattr(self, name)}")


@dataclass
class OptimizerState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


class TrainingDiverged(RuntimeError):
    pass


def flip_frame(x: np.ndarray, flip: str) -> np.ndarray:
    """Vertical ('v'), horizontal ('h') or both ('vh') flip of an NCHW frame; involutive."""
    if "v" in flip:
        x = x[..., ::-1, :]
    if "h" in flip:
        x = x[..., :, ::-1]
    return np.ascontiguousarray(x)


def make_triplets(frames: Sequence[np.ndarray], augment: bool = True, sequence: int = 0) -> list[Triplet]:
    """Every window of three consecutive frames, played forward and backward.

    With ``augment`` each triplet is also emitted vertically flipped,
    horizontally flipped and flipped both ways, for 8 triplets per window.
    """
    if len(frames) < 3:
        log.warning("sequence %d has %d frames; need at least 3 for a triplet", sequence, len(frames))
        return []
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ValueError("all frames of a sequence must share one shape")
    flips = FLIPS if augment else ("none",)
    out = []
    for t in range(len(frames) - 2):
        a, b, c = frames[t], frames[t + 1], frames[t + 2]
        for direction, (f1, f3) in (("forward", (a, c)), ("backward", (c, a))):
            for fl in flips:
                out.append(
                    Triplet(flip_frame(f1, fl), flip_frame(b, fl), flip_frame(f3, fl), sequence, t, direction, fl)
                )
    return out


def split_windows(sequences: Sequence[Sequence[np.ndarray]], holdout: float = 0.1):
    """Split (sequence, window-start) pairs into train/validation by position, before augmentation.

    The last ``holdout`` fraction of windows in order of appearance is held out.
    """
    windows = [(s, t) for s, frames in enumerate(sequences) for t in range(len(frames) - 2)]
    n_val = int(round(holdout * len(windows)))
    cut = len(windows) - n_val
    return windows[:cut], windows[cut:]


def charbonnier_loss(pred: np.ndarray, target: np.ndarray, eps: float = 0.1):
    """Mean of sqrt(d^2 + eps^2) over all elements, and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ValueError(f"charbonnier_loss: shapes {pred.shape} and {target.shape} differ")
    d = pred - target
    rho = np.sqrt(d * d + eps * eps)
    return float(rho.mean()), d / (d.size * rho)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState, cfg: TrainConfig, lr=None):
    """One bias-corrected Adam update, in place.  Gradients are zeroed afterwards."""
    if state is None or len(state.m) != len(params):
        raise ValueError("optimizer state is not initialised for these parameters")
    lr = cfg.lr if lr is None else lr
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)).astype(p.dtype)
        g[...] = 0


def _net_grads(net: MindNet):
    return [g for p in net.layers for g in p.grads()]


def _stack(triplets, idx, name):
    return np.concatenate([getattr(triplets[k], name) for k in idx], axis=0)


class PlateauSchedule:
    """Halve the learning rate when the moving-average loss stops improving.

    The ``window``-step moving average is compared with its value ``patience``
    steps earlier; less than a ``tol`` relative improvement halves the rate
    and restarts the comparison.
    """

    def __init__(self, lr, window=50, patience=200, tol=1e-3):
        self.lr = lr
        self.window, self.patience, self.tol = window, patience, tol
        self.recent: list[float] = []
        self.averages: list[float] = []

    def update(self, loss: float) -> float:
        if self.patience <= 0:
            return self.lr
        self.recent.append(loss)
        if len(self.recent) > self.window:
            self.recent.pop(0)
        if len(self.recent) < self.window:
            return self.lr
        self.averages.append(sum(self.recent) / self.window)
        if len(self.averages) > self.patience:
            then, now = self.averages[-self.patience - 1], self.averages[-1]
            if now > then * (1 - self.tol):
                self.lr *= 0.5
                self.averages = [now]
                log.info("loss plateau; learning rate halved to %g", self.lr)
            else:
                self.averages.pop(0)
        return self.lr


def train(
    net: MindNet,
    triplets: Sequence[Triplet],
    cfg: TrainConfig,
    state: Optional[OptimizerState] = None,
    checkpoint: Optional[Callable[[MindNet, OptimizerState, int], None]] = None,
):
    """Minibatch Adam on the Charbonnier reconstruction loss.

    Returns ``(net, state, curve)`` where ``curve`` holds one
    ``(step, loss, lr)`` row per optimizer step.  ``checkpoint`` is called
    at the end of every epoch.  A non-finite loss restores the parameters of
    the last completed epoch and raises :class:`TrainingDiverged`.
    """
    cfg.validate()
    if not triplets:
        raise ValueError("train: empty triplet list")
    params = net.parameters()
    grads = _net_grads(net)
    if state is None:
        state = OptimizerState.for_params(params)
    rng = np.random.default_rng(cfg.rng_seed)
    sched = PlateauSchedule(cfg.lr, cfg.plateau_window, cfg.plateau_patience, cfg.plateau_tol)
    curve = []
    good = [p.copy() for p in params]
    step = 0
    net.zero_grad()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(triplets))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            i1, i2, i3 = (_stack(triplets, idx, n) for n in ("i1", "i2", "i3"))
            pred = net.forward(i1, i3)
            loss, g = charbonnier_loss(pred, i2.astype(pred.dtype), cfg.charbonnier_eps)
            if not np.isfinite(loss):
                for p, q in zip(params, good):
                    p[...] = q
                net.invalidate()
                raise TrainingDiverged(f"non-finite loss at step {step}; parameters restored to last good epoch")
            net.backward(g.astype(pred.dtype), accumulate=True)
            lr = sched.lr
            adam_step(params, grads, state, cfg, lr=lr)
            net.invalidate()
            curve.append((step, loss, lr))
            sched.update(loss)
            step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                break
        good = [p.copy() for p in params]
        if checkpoint is not None:
            checkpoint(net, state, epoch)
        log.info("epoch %d done, step %d, loss %.5f", epoch, step, curve[-1][1])
        if cfg.max_steps and step >= cfg.max_steps:
            break
    return net, state, curve
