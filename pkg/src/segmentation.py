"""Depth layer extraction by graph-based segmentation.

Felzenszwalb-Huttenlocher merging on the 4-connected pixel grid of a pseudo-depth
image: edges are processed in ascending weight order and two components merge when
the connecting weight does not exceed min(Int(C) + k/|C|) of both sides. A final pass
absorbs components below ``min_size`` into their lowest-weight neighbour.

Follows Single Responsibility Principle (SRP) - handles only depth segmentation.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class SegmentationParams:
    """Segmentation parameters in normalized depth units."""

    sigma: float = 0.0
    k: float = 0.02
    min_size_frac: float = 0.005
    min_size: Optional[int] = None

    def resolved_min_size(self, pixel_count: int) -> int:
        """Absolute minimum component size for an image of ``pixel_count`` pixels."""
        if self.min_size is not None:
            return max(1, int(self.min_size))
        return max(1, int(round(self.min_size_frac * pixel_count)))


@dataclass(frozen=True)
class LayerLabelMap:
    """Per-pixel layer ids 0..M-1 (-1 for invalid pixels) of one frame."""

    labels: np.ndarray
    timestamp: int = 0
    window_index: int = 0

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int32, copy=True)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def layer_count(self) -> int:
        """Number of layers M."""
        return int(self.labels.max()) + 1 if self.labels.size and self.labels.max() >= 0 else 0

    @property
    def shape(self) -> Tuple[int, int]:
        """(H, W)."""
        return self.labels.shape

    def mask(self, layer: int) -> np.ndarray:
        """Boolean pixel mask of one layer."""
        return self.labels == layer

    def sizes(self) -> np.ndarray:
        """Pixel count per layer."""
        valid = self.labels[self.labels >= 0]
        return np.bincount(valid, minlength=self.layer_count)


class _DisjointSet:
    """Union-find with union by size and per-component internal difference."""

    def __init__(self, count: int):
        self.parent = list(range(count))
        self.size = [1] * count
        self.internal = [0.0] * count

    def find(self, node: int) -> int:
        parent = self.parent
        while parent[node] != node:
            parent[node] = parent[parent[node]]
            node = parent[node]
        return node

    def union(self, a: int, b: int, weight: float) -> int:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = weight
        return a


def normalize_depth(depth: np.ndarray, valid: np.ndarray, sigma: float = 0.0) -> np.ndarray:
    """Scale valid depth to [0, 1] and optionally smooth it (masked normalized convolution)."""
    out = np.zeros(depth.shape, dtype=np.float64)
    if not np.any(valid):
        return out
    values = depth[valid].astype(np.float64)
    low, high = values.min(), values.max()
    span = high - low
    out[valid] = (values - low) / span if span > 0 else 0.0
    if sigma > 0:
        weight = valid.astype(np.float64)
        numerator = ndimage.gaussian_filter(out * weight, sigma, mode="nearest")
        denominator = ndimage.gaussian_filter(weight, sigma, mode="nearest")
        smoothed = np.divide(numerator, denominator, out=np.zeros_like(out), where=denominator > 0)
        out = np.where(valid, smoothed, 0.0)
    return out


def grid_edges(values: np.ndarray, valid: np.ndarray):
    """4-connected edges between valid pixels, sorted by weight (stable, raster order)."""
    height, width = values.shape
    index = np.arange(height * width).reshape(height, width)
    horizontal = valid[:, :-1] & valid[:, 1:]
    vertical = valid[:-1, :] & valid[1:, :]
    src = np.concatenate([index[:, :-1][horizontal], index[:-1, :][vertical]])
    dst = np.concatenate([index[:, 1:][horizontal], index[1:, :][vertical]])
    weights = np.concatenate(
        [
            np.abs(values[:, :-1] - values[:, 1:])[horizontal],
            np.abs(values[:-1, :] - values[1:, :])[vertical],
        ]
    )
    order = np.argsort(weights, kind="stable")
    return src[order], dst[order], weights[order]


def segment_depth(
    depth: np.ndarray,
    params: Optional[SegmentationParams] = None,
    valid: Optional[np.ndarray] = None,
    timestamp: int = 0,
    window_index: int = 0,
) -> LayerLabelMap:
    """
    Segment a pseudo-depth image into 4-connected depth layers.

    Args:
        depth: H×W depth grid (non-finite entries are treated as invalid)
        params: Smoothing, merge constant and minimum size
        valid: Optional validity mask
        timestamp: Frame recorded on the label map
        window_index: Window recorded on the label map

    Returns:
        LayerLabelMap with ids numbered by first appearance in raster order
    """
    params = params or SegmentationParams()
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.isfinite(depth)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    height, width = depth.shape
    labels = np.full((height, width), -1, dtype=np.int32)
    if not np.any(mask):
        return LayerLabelMap(labels, timestamp, window_index)

    values = normalize_depth(np.where(mask, depth, 0.0), mask, params.sigma)
    src, dst, weights = grid_edges(values, mask)
    sets = _DisjointSet(height * width)
    k = params.k
    edges = list(zip(src.tolist(), dst.tolist(), weights.tolist()))
    for a, b, weight in edges:
        ra, rb = sets.find(a), sets.find(b)
        if ra == rb:
            continue
        threshold = min(
            sets.internal[ra] + k / sets.size[ra], sets.internal[rb] + k / sets.size[rb]
        )
        if weight <= threshold:
            sets.union(ra, rb, weight)

    min_size = params.resolved_min_size(height * width)
    if min_size > 1:
        for a, b, weight in edges:
            ra, rb = sets.find(a), sets.find(b)
            if ra != rb and (sets.size[ra] < min_size or sets.size[rb] < min_size):
                sets.union(ra, rb, max(weight, sets.internal[ra], sets.internal[rb]))

    flat = labels.reshape(-1)
    remap = {}
    for pixel in np.flatnonzero(mask.reshape(-1)).tolist():
        root = sets.find(pixel)
        if root not in remap:
            remap[root] = len(remap)
        flat[pixel] = remap[root]
    return LayerLabelMap(labels, timestamp, window_index)
