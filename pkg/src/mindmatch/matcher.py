"""Correspondences from input-gradient (sensitivity) maps of the interpolation network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .network import MindNet, PixelSeed

SCORE_WINDOW = 20
DEFAULT_BATCH = 16
DEFAULT_MEMORY_BUDGET = 512 * 2**20


@dataclass
class SensitivityPair:
    anchor: tuple
    g1: np.ndarray
    g3: np.ndarray


@dataclass
class Correspondence:
    anchor: tuple
    p1: tuple
    p3: tuple
    score1: float
    score3: float
    valid: bool = True

    @property
    def score(self) -> float:
        """Single ranking key: the weaker of the two per-image scores."""
        return min(self.score1, self.score3)


@dataclass
class MatchSet:
    matches: list
    grid_stride: int
    height: int
    width: int
    # 'interpolated' for network matches, 'I1' for baselines anchored in the first frame
    anchor_frame: str = "interpolated"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.matches)

    def __iter__(self):
        return iter(self.matches)


def grid_anchors(h: int, w: int, stride: int) -> list[tuple]:
    if stride < 1:
        raise ValueError(f"grid stride must be >= 1, got {stride}")
    return [(r, c) for r in range(0, h, stride) for c in range(0, w, stride)]


def _ensure_forward(net: MindNet, i1, i3):
    if not net.cache_matches(i1, i3):
        net.forward(i1, i3)


def _reduce(g: np.ndarray) -> np.ndarray:
    # (k, 3, h, w) -> (k, h, w): abs of the channel-summed gradient
    return np.abs(g.sum(axis=1))


def _check_anchor(net, anchor):
    i, j = anchor
    h, w = net.config.input_h, net.config.input_w
    if not (0 <= i < h and 0 <= j < w):
        raise IndexError(f"anchor {anchor} outside the {h}x{w} output")


def sensitivity(net: MindNet, i1, i3, anchor, channel: Optional[int] = None) -> SensitivityPair:
    """Absolute gradient maps of output pixel ``anchor`` w.r.t. each input frame.

    Runs a forward pass only if the network's cache does not already hold
    ``(i1, i3)``; always exactly one backward pass.
    """
    _check_anchor(net, anchor)
    _ensure_forward(net, i1, i3)
    g1, g3 = net.backward_to_input(PixelSeed(anchor[0], anchor[1], channel))
    return SensitivityPair(tuple(anchor), _reduce(g1)[0], _reduce(g3)[0])


def _sweep_bytes(net: MindNet, k: int) -> int:
    acts = sum(b.size for op, _, b in net._tape if op in ("conv", "convT", "prelu"))
    # input-grad buffers plus the im2col-sized temporaries of the widest layer
    return 12 * k * acts * net.dtype.itemsize


def sensitivity_batch(
    net: MindNet,
    i1,
    i3,
    anchors: Sequence[tuple],
    k: int = DEFAULT_BATCH,
    channel: Optional[int] = None,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> list[SensitivityPair]:
    """Sensitivity maps for many anchors, ``k`` seeds per backward sweep.

    The cached activations of one forward pass broadcast across a batch of
    ``k`` distinct seeds.  ``k`` shrinks when a sweep would exceed
    ``memory_budget`` bytes.
    """
    anchors = [tuple(a) for a in anchors]
    if len(set(anchors)) != len(anchors):
        raise ValueError("sensitivity_batch: anchors must be distinct")
    for a in anchors:
        _check_anchor(net, a)
    _ensure_forward(net, i1, i3)
    k = max(1, int(k))
    while k > 1 and _sweep_bytes(net, k) > memory_budget:
        k //= 2
    out = []
    pos = 0
    while pos < len(anchors):
        chunk = anchors[pos : pos + k]
        try:
            g1, g3 = net.backward_seeds_to_input([PixelSeed(a[0], a[1], channel) for a in chunk])
        except MemoryError:
            if k == 1:
                raise
            k //= 2
            continue
        r1, r3 = _reduce(g1), _reduce(g3)
        out += [SensitivityPair(a, r1[n], r3[n]) for n, a in enumerate(chunk)]
        pos += len(chunk)
    return out


def matching_score(g: np.ndarray, p, window: int = SCORE_WINDOW) -> float:
    """Peak value over the mean of the ``window``-square around ``p``, clipped to the map.

    An all-zero window scores 0.
    """
    r, c = p
    half = window // 2
    r0, r1 = max(r - half, 0), min(r - half + window, g.shape[0])
    c0, c1 = max(c - half, 0), min(c - half + window, g.shape[1])
    mean = float(g[r0:r1, c0:c1].mean())
    if mean <= 0:
        return 0.0
    return float(g[r, c]) / mean


def _argmax(g):
    return tuple(int(v) for v in np.unravel_index(int(np.argmax(g)), g.shape))


def extract_match(sp: SensitivityPair, window: int = SCORE_WINDOW) -> Correspondence:
    if sp.g1.size == 0 or sp.g3.size == 0:
        raise ValueError("extract_match: empty sensitivity map")
    p1, p3 = _argmax(sp.g1), _argmax(sp.g3)
    s1, s3 = matching_score(sp.g1, p1, window), matching_score(sp.g3, p3, window)
    valid = bool(sp.g1.max() > 0 and sp.g3.max() > 0)
    if not valid:
        s1 = s3 = 0.0
    return Correspondence(sp.anchor, p1, p3, s1, s3, valid)


def match_grid(net: MindNet, i1, i3, stride: int = 4, k: int = DEFAULT_BATCH, channel=None) -> MatchSet:
    """One forward pass, then one correspondence per grid anchor (one backward seed each)."""
    h, w = net.config.input_h, net.config.input_w
    anchors = grid_anchors(h, w, stride)
    net.forward(i1, i3)
    pairs = sensitivity_batch(net, i1, i3, anchors, k=k, channel=channel)
    return MatchSet([extract_match(sp) for sp in pairs], stride, h, w)


def expected_anchor_count(h: int, w: int, stride: int) -> int:
    return math.ceil(h / stride) * math.ceil(w / stride)
