"""Overlapping patch extraction and reassembly.

Patches are square (P x P, P even) and tile the map with stride P/2, so
neighbouring patches overlap by half a patch in each direction. A map is
admissible only when (H - P) and (W - P) are exact multiples of the stride;
nothing is ever padded. Patch origins are enumerated row-major.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, LayoutError, ParameterError
from .grids import FeatureGrid


class PatchLayout:
    """Geometry of an overlapping patch tiling.

    Attributes:
        map_h, map_w: source map size.
        patch: patch side length P.
        stride: P // 2.
        n_h, n_w: patch counts along each axis.
        origins: (N, 2) int array of top-left corners, row-major.
    """

    def __init__(self, map_h, map_w, patch, stride, n_h, n_w, origins):
        self.map_h = map_h
        self.map_w = map_w
        self.patch = patch
        self.stride = stride
        self.n_h = n_h
        self.n_w = n_w
        self.origins = origins

    @property
    def n_patches(self):
        return self.n_h * self.n_w


def make_layout(map_h, map_w, patch):
    """Build the patch layout for a map, or raise LayoutError.

    Requires an even patch size no larger than either map dim, and map dims
    that the stride tiles exactly: (dim - P) % (P / 2) == 0.
    """
    if patch < 2 or patch % 2 != 0:
        raise ParameterError(f"patch size must be even and >= 2, got {patch}")
    if map_h < 1 or map_w < 1:
        raise DimensionError(f"map dims must be positive, got ({map_h}, {map_w})")
    if patch > map_h or patch > map_w:
        raise LayoutError(
            f"patch {patch} exceeds map dims ({map_h}, {map_w})")
    stride = patch // 2
    if (map_h - patch) % stride != 0:
        raise LayoutError(
            f"height {map_h} is not tileable by patch {patch} stride {stride}")
    if (map_w - patch) % stride != 0:
        raise LayoutError(
            f"width {map_w} is not tileable by patch {patch} stride {stride}")
    n_h = (map_h - patch) // stride + 1
    n_w = (map_w - patch) // stride + 1
    rows = np.repeat(np.arange(n_h) * stride, n_w)
    cols = np.tile(np.arange(n_w) * stride, n_h)
    origins = np.stack([rows, cols], axis=1).astype(np.intp)
    return PatchLayout(map_h, map_w, patch, stride, n_h, n_w, origins)


class PatchGrid:
    """Patches cut from (or destined for) one feature map.

    Attributes:
        layout: the PatchLayout the patches follow.
        data: (N, C, P, P) float64 array.
    """

    def __init__(self, layout, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 4:
            raise DimensionError(f"patch data must be (N, C, P, P), got {data.shape}")
        n, _, ph, pw = data.shape
        if n != layout.n_patches or ph != layout.patch or pw != layout.patch:
            raise DimensionError(
                f"patch data shape {data.shape} does not match layout "
                f"(N={layout.n_patches}, P={layout.patch})")
        self.layout = layout
        self.data = data

    @property
    def n_patches(self):
        return self.data.shape[0]

    @property
    def channels(self):
        return self.data.shape[1]

    def verify_against(self, grid):
        """Check every patch equals the source grid at its origin."""
        for i, (r, c) in enumerate(self.layout.origins):
            if not np.array_equal(self.data[i], grid.data[:, r:r + self.layout.patch,
                                                          c:c + self.layout.patch]):
                raise DimensionError(f"patch {i} does not match its source window")


def unfold(grid, layout):
    """Cut a FeatureGrid into overlapping patches.

    Returns a PatchGrid whose patch i is the source restricted to
    origins[i] .. origins[i] + P.
    """
    if grid.height != layout.map_h or grid.width != layout.map_w:
        raise DimensionError(
            f"grid dims ({grid.height}, {grid.width}) do not match layout "
            f"({layout.map_h}, {layout.map_w})")
    p, s = layout.patch, layout.stride
    windows = np.lib.stride_tricks.sliding_window_view(grid.data, (p, p), axis=(1, 2))
    # windows: (C, H-P+1, W-P+1, P, P); subsample at the stride
    sub = windows[:, ::s, ::s][:, : layout.n_h, : layout.n_w]
    patches = np.ascontiguousarray(sub.transpose(1, 2, 0, 3, 4).reshape(
        layout.n_patches, grid.channels, p, p))
    return PatchGrid(layout, patches)


def coverage_map(layout):
    """Return the (H, W) count of patches covering each pixel.

    Interior pixels of a multi-patch layout are covered up to 4 times;
    coverage is never zero because the stride tiles the map exactly.
    """
    cov = np.zeros((layout.map_h, layout.map_w), dtype=np.int64)
    p = layout.patch
    for r, c in layout.origins:
        cov[r:r + p, c:c + p] += 1
    return cov


def fold(patches):
    """Reassemble overlapping patches into a FeatureGrid.

    Overlapping contributions are averaged: each output pixel is the sum of
    all patch values covering it divided by its coverage count.
    """
    layout = patches.layout
    c = patches.channels
    p = layout.patch
    acc = np.zeros((c, layout.map_h, layout.map_w), dtype=np.float64)
    for i, (r, col) in enumerate(layout.origins):
        acc[:, r:r + p, col:col + p] += patches.data[i]
    cov = coverage_map(layout)
    return FeatureGrid(acc / cov[None, :, :])


def scatter_add(patches):
    """Adjoint of unfold: sum patches back onto the map without averaging.

    Used by gradient propagation; returns a raw (C, H, W) array.
    """
    layout = patches.layout
    acc = np.zeros((patches.channels, layout.map_h, layout.map_w), dtype=np.float64)
    p = layout.patch
    for i, (r, col) in enumerate(layout.origins):
        acc[:, r:r + p, col:col + p] += patches.data[i]
    return acc


def center_block_coverage(layout):
    """Map of pixels lying in the central P/2 block of at least one patch.

    The central block of a patch at origin o starts at o + (P - P//2) // 2
    and spans P//2 pixels per axis. Returns a boolean (H, W) array.
    """
    half = layout.patch // 2
    off = (layout.patch - half) // 2
    hit = np.zeros((layout.map_h, layout.map_w), dtype=bool)
    for r, c in layout.origins:
        hit[r + off:r + off + half, c + off:c + off + half] = True
    return hit
