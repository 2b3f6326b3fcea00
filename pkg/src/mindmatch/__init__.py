"""Image matching by inverting a frame-interpolation network."""

from .network import MindNet, NetConfig, PixelSeed, build
from .matcher import MatchSet, extract_match, match_grid, sensitivity, sensitivity_batch

__all__ = [
    "MindNet",
    "NetConfig",
    "PixelSeed",
    "build",
    "MatchSet",
    "extract_match",
    "match_grid",
    "sensitivity",
    "sensitivity_batch",
]
