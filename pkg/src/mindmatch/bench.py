"""Synthetic coherent video with exact flow, matching/interpolation metrics and an SSD baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .matcher import Correspondence, MatchSet, grid_anchors

DESK_THRESHOLDS = (1, 2, 3, 5)
PAPER_THRESHOLDS = (5, 10, 20, 30)


@dataclass
class FlowField:
    """Displacement I1 -> I3; ``u`` along columns (x), ``v`` along rows (y)."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.isfinite(self.u) & np.isfinite(self.v)
        if not (self.u.shape == self.v.shape == self.valid.shape):
            raise ValueError("flow components and mask must share one shape")

    @property
    def shape(self):
        return self.u.shape


@dataclass
class Sprite:
    texture_seed: int
    size: tuple  # (rows, cols)
    position: tuple  # top-left (row, col) in frame 1, real pixels
    velocity: tuple  # (row, col) pixels per frame


@dataclass
class SceneConfig:
    height: int = 32
    width: int = 64
    sprites: list = field(default_factory=list)
    background_seed: int = 0
    rng_seed: int = 0
    max_velocity: float = 3.0

    def validate(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("canvas dims must be positive")
        for n, s in enumerate(self.sprites):
            if math.hypot(*s.velocity) > self.max_velocity + 1e-12:
                raise ValueError(f"sprite {n}: |velocity| {math.hypot(*s.velocity):.3f} exceeds {self.max_velocity}")
            for t in range(3):
                r = s.position[0] + t * s.velocity[0]
                c = s.position[1] + t * s.velocity[1]
                if r < 0 or c < 0 or r + s.size[0] > self.height or c + s.size[1] > self.width:
                    raise ValueError(f"sprite {n} leaves the {self.height}x{self.width} canvas in frame {t + 1}")


def texture(seed: int, h: int, w: int, smooth: float = 1.0) -> np.ndarray:
    """Smooth random colour texture in [0, 1], shape (3, h, w)."""
    rng = np.random.default_rng(seed)
    tex = rng.random((3, h, w))
    if smooth > 0:
        tex = ndimage.gaussian_filter(tex, sigma=(0, smooth, smooth), mode="reflect")
    lo, hi = tex.min(axis=(1, 2), keepdims=True), tex.max(axis=(1, 2), keepdims=True)
    tex = (tex - lo) / np.maximum(hi - lo, 1e-12)
    tint = rng.random((3, 1, 1))
    return 0.15 + 0.7 * (0.5 * tex + 0.5 * tint)


def _render(cfg: SceneConfig, t: int, textures):
    img = texture(cfg.background_seed, cfg.height, cfg.width)
    owner = np.full((cfg.height, cfg.width), -1, dtype=int)
    rows, cols = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(float)
    for n, (s, tex) in enumerate(zip(cfg.sprites, textures)):
        r0 = s.position[0] + t * s.velocity[0]
        c0 = s.position[1] + t * s.velocity[1]
        lr, lc = rows - r0, cols - c0
        inside = (lr >= 0) & (lr <= s.size[0] - 1) & (lc >= 0) & (lc <= s.size[1] - 1)
        if not inside.any():
            continue
        coords = np.stack([lr[inside], lc[inside]])
        for ch in range(3):
            img[ch][inside] = ndimage.map_coordinates(tex[ch], coords, order=1, mode="nearest")
        owner[inside] = n
    return img, owner


def generate_sequence(cfg: SceneConfig):
    """Three frames of sprites translating at constant velocity over a static background.

    Frame 2 is the exact temporal midpoint.  Flow is ``2 * velocity`` on
    sprite pixels of I1 and zero on background; a pixel is invalid when its
    destination in I3 belongs to a different layer (occlusion) or leaves the
    canvas.
    """
    cfg.validate()
    textures = [texture(s.texture_seed, *s.size) for s in cfg.sprites]
    frames, owners = [], []
    for t in range(3):
        img, owner = _render(cfg, t, textures)
        frames.append(img[None].astype(np.float64))
        owners.append(owner)
    h, w = cfg.height, cfg.width
    vel = np.array([s.velocity for s in cfg.sprites] + [(0.0, 0.0)], dtype=float)
    o1 = owners[0]
    v = 2 * vel[o1, 0]
    u = 2 * vel[o1, 1]
    rows, cols = np.mgrid[0:h, 0:w]
    dr = np.rint(rows + v).astype(int)
    dc = np.rint(cols + u).astype(int)
    inb = (dr >= 0) & (dr < h) & (dc >= 0) & (dc < w)
    valid = np.zeros((h, w), dtype=bool)
    valid[inb] = owners[2][dr[inb], dc[inb]] == o1[inb]
    return frames, FlowField(u, v, valid)


def random_scene(
    rng_seed: int,
    height: int = 32,
    width: int = 64,
    n_sprites: tuple = (1, 3),
    sprite_size: tuple = (6, 14),
    max_velocity: float = 3.0,
) -> SceneConfig:
    """Random scene with integer sprite velocities of norm at most ``max_velocity``."""
    rng = np.random.default_rng(rng_seed)
    vmax = int(math.floor(max_velocity))
    choices = [(a, b) for a in range(-vmax, vmax + 1) for b in range(-vmax, vmax + 1) if math.hypot(a, b) <= max_velocity]
    sprites = []
    for _ in range(int(rng.integers(n_sprites[0], n_sprites[1] + 1))):
        size = (int(rng.integers(sprite_size[0], sprite_size[1] + 1)), int(rng.integers(sprite_size[0], sprite_size[1] + 1)))
        size = (min(size[0], height - 2 * vmax - 1), min(size[1], width - 2 * vmax - 1))
        vel = choices[int(rng.integers(len(choices)))]
        # all three positions must fit on the canvas
        r_lo, r_hi = max(0, -2 * vel[0]), height - size[0] - max(0, 2 * vel[0])
        c_lo, c_hi = max(0, -2 * vel[1]), width - size[1] - max(0, 2 * vel[1])
        pos = (int(rng.integers(r_lo, r_hi + 1)), int(rng.integers(c_lo, c_hi + 1)))
        sprites.append(Sprite(int(rng.integers(2**31)), size, pos, vel))
    return SceneConfig(height, width, sprites, int(rng.integers(2**31)), rng_seed, max_velocity)


# metrics ---------------------------------------------------------------


def match_errors(ms: Sequence[Correspondence], gt: FlowField) -> np.ndarray:
    """Endpoint error of each match whose p1 has valid ground truth."""
    errs = []
    h, w = gt.shape
    for m in ms:
        r, c = m.p1
        if not (0 <= r < h and 0 <= c < w) or not gt.valid[r, c]:
            continue
        er = m.p3[0] - (r + gt.v[r, c])
        ec = m.p3[1] - (c + gt.u[r, c])
        errs.append(math.hypot(er, ec))
    return np.array(errs, dtype=float)


def average_point_error(ms, gt: FlowField) -> Optional[float]:
    errs = match_errors(ms, gt)
    return float(errs.mean()) if errs.size else None


def accuracy_at(ms, gt: FlowField, t: float) -> Optional[float]:
    """Fraction of valid matches with error strictly below ``t`` pixels."""
    errs = match_errors(ms, gt)
    return float((errs < t).mean()) if errs.size else None


def _rgb(x):
    x = np.asarray(x, dtype=np.float64)
    return x[0] if x.ndim == 4 else x


def interpolation_error(pred, gt) -> float:
    """RMS over pixels of the L2 norm of the colour difference."""
    pred, gt = _rgb(pred), _rgb(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"interpolation_error: shapes {pred.shape} and {gt.shape} differ")
    sq = ((pred - gt) ** 2).sum(axis=0)
    return float(np.sqrt(sq.mean()))


def normalized_interpolation_error(pred, gt, eps: float = 1.0) -> float:
    """Like :func:`interpolation_error` but each pixel is divided by ``|grad gt|^2 + eps``."""
    pred, gt = _rgb(pred), _rgb(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"normalized_interpolation_error: shapes {pred.shape} and {gt.shape} differ")
    gy, gx = np.gradient(gt, axis=(1, 2))
    grad2 = (gx**2 + gy**2).sum(axis=0)
    sq = ((pred - gt) ** 2).sum(axis=0)
    return float(np.sqrt((sq / (grad2 + eps)).mean()))


# baseline --------------------------------------------------------------


def block_match_baseline(i1, i3, stride: int = 4, window: int = 7, radius: int = 6) -> MatchSet:
    """Exhaustive SSD search in I3 around each grid anchor of I1.

    Ties prefer the smaller displacement.  ``meta['boundary_fraction']``
    reports how many best matches sit on the search border, a sign the
    true motion exceeds ``radius``.
    """
    if window % 2 == 0:
        raise ValueError("window must be odd")
    a, b = _rgb(i1), _rgb(i3)
    _, h, w = a.shape
    half = window // 2
    pad = radius + half
    bp = np.pad(b, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    disps = sorted(
        ((dr, dc) for dr in range(-radius, radius + 1) for dc in range(-radius, radius + 1)),
        key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]),
    )
    best = np.full((h, w), np.inf)
    arg = np.zeros((h, w, 2), dtype=int)
    rows, cols = np.mgrid[0:h, 0:w]
    for dr, dc in disps:
        shifted = bp[:, pad + dr : pad + dr + h, pad + dc : pad + dc + w]
        sq = ((a - shifted) ** 2).sum(axis=0)
        ssd = ndimage.uniform_filter(sq, size=window, mode="constant") * window * window
        inside = (rows + dr >= 0) & (rows + dr < h) & (cols + dc >= 0) & (cols + dc < w)
        better = inside & (ssd < best - 1e-12)
        best[better] = ssd[better]
        arg[better] = (dr, dc)
    matches = []
    boundary = 0
    for r, c in grid_anchors(h, w, stride):
        dr, dc = arg[r, c]
        score = 1.0 / (1.0 + best[r, c])
        matches.append(Correspondence((r, c), (r, c), (r + int(dr), c + int(dc)), score, score))
        boundary += max(abs(dr), abs(dc)) == radius
    meta = {"radius": radius, "window": window, "boundary_fraction": boundary / max(len(matches), 1)}
    return MatchSet(matches, stride, h, w, anchor_frame="I1", meta=meta)


# report ----------------------------------------------------------------


@dataclass
class MetricReport:
    ape: Optional[float]
    accuracy: dict
    ie: Optional[float] = None
    ne: Optional[float] = None
    match_count: int = 0
    anchor_frame: str = "interpolated"

    def rows(self):
        yield "ape", self.ape
        for t, a in sorted(self.accuracy.items()):
            yield f"accuracy@{t:g}", a
        yield "ie", self.ie
        yield "ne", self.ne
        yield "match_count", self.match_count
        yield "anchor_frame", self.anchor_frame

    def table(self) -> str:
        lines = []
        for k, v in self.rows():
            if isinstance(v, float):
                v = f"{v:.4f}"
            lines.append(f"{k:<14}{'absent' if v is None else v}")
        return "\n".join(lines)


def top_matches(ms: MatchSet, top_fraction: float) -> list:
    if not 0 < top_fraction <= 1:
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
    keep = math.ceil(top_fraction * len(ms.matches))
    order = sorted(range(len(ms.matches)), key=lambda n: -ms.matches[n].score)
    return [ms.matches[n] for n in order[:keep]]


def evaluate(
    ms: MatchSet,
    gt: FlowField,
    pred=None,
    gt_frame=None,
    top_fraction: float = 1.0,
    thresholds: Sequence[float] = DESK_THRESHOLDS,
) -> MetricReport:
    kept = top_matches(ms, top_fraction)
    errs = match_errors(kept, gt)
    acc = {t: (float((errs < t).mean()) if errs.size else None) for t in thresholds}
    ie = ne = None
    if pred is not None and gt_frame is not None:
        ie = interpolation_error(pred, gt_frame)
        ne = normalized_interpolation_error(pred, gt_frame)
    return MetricReport(float(errs.mean()) if errs.size else None, acc, ie, ne, len(kept), ms.anchor_frame)
