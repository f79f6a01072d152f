"""Two-scale matching with a shared top-K selection.

Scale 4 is the coarse grid (feature stride 16); scale 3 is exactly twice its
size in both spatial dims (stride 8). Matching runs the full patch pipeline
at scale 4 with patch size P, then reuses the resulting top-K table at
scale 3 with patch size 2P. The layouts are congruent by construction: both
scales have the same patch count and scale-3 origins are exactly twice the
scale-4 origins, so the table transfers verbatim and no scale-3 affinity is
ever computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LayoutError, ParameterError, PyramidError
from .grids import FeatureGrid
from .matcher import OpCounter, TopKIndex, plmm_forward
from .patcher import make_layout


@dataclass
class FeaturePyramid:
    """Per-scale feature grids; scale3 dims are exactly 2x scale4 dims."""

    scale4: FeatureGrid
    scale3: FeatureGrid

    def __post_init__(self):
        if (self.scale3.height != 2 * self.scale4.height
                or self.scale3.width != 2 * self.scale4.width):
            raise PyramidError(
                f"scale-3 dims ({self.scale3.height}, {self.scale3.width}) are not "
                f"twice scale-4 dims ({self.scale4.height}, {self.scale4.width})")


# The key and value pathways carry the same structure; the aliases are purely
# for reading signatures.
KeyPyramid = FeaturePyramid
ValuePyramid = FeaturePyramid


@dataclass
class ScalePair:
    """Patch sizes used at the two scales; p3 is pinned to 2 * p4."""

    p4: int
    p3: int

    def __post_init__(self):
        if self.p3 != 2 * self.p4:
            raise ParameterError(f"scale-3 patch must be 2*p4, got {self.p3} vs {self.p4}")


def lift_topk(topk, layout4, layout3):
    """Transfer a scale-4 top-K table to the scale-3 layout.

    The two layouts must have the same patch count; because origins scale by
    exactly 2, patch i at scale 3 covers the same image region as patch i at
    scale 4, so the table itself is reused unchanged.
    """
    if layout3.n_patches != layout4.n_patches:
        raise LayoutError(
            f"scale-3 layout has {layout3.n_patches} patches, scale-4 has "
            f"{layout4.n_patches}; top-K cannot be lifted")
    if layout3.patch != 2 * layout4.patch:
        raise LayoutError(
            f"scale-3 patch {layout3.patch} is not twice scale-4 patch {layout4.patch}")
    if not np.array_equal(layout3.origins, 2 * layout4.origins):
        raise LayoutError("scale-3 origins are not twice the scale-4 origins")
    if topk.ids.shape[0] != layout4.n_patches:
        raise LayoutError(
            f"top-K table has {topk.ids.shape[0]} rows, layouts expect "
            f"{layout4.n_patches}")
    return TopKIndex(ids=topk.ids.copy(), k=topk.k)


@dataclass
class MultiScaleResult:
    """Readouts from a two-scale pass plus the shared top-K table."""

    readout4: FeatureGrid
    readout3: FeatureGrid
    topk: TopKIndex


def match_multiscale(query, memory_keys, memory_values, p4, k, counter=None):
    """Run patch matching at both scales with one top-K selection.

    Args:
        query: KeyPyramid for the query frame.
        memory_keys: list of KeyPyramid, one per memory frame.
        memory_values: list of ValuePyramid, parallel to memory_keys.
        p4: patch size at scale 4; scale 3 uses 2 * p4.
        k: memory patches kept per query patch.
        counter: optional OpCounter. Only the scale-4 pass adds patch pairs.

    Returns:
        MultiScaleResult with both readouts and the scale-4 top-K table.
    """
    if len(memory_keys) != len(memory_values) or not memory_keys:
        raise ParameterError("memory keys and values must be parallel, non-empty lists")
    res4 = plmm_forward(
        query.scale4,
        [m.scale4 for m in memory_keys],
        [m.scale4 for m in memory_values],
        patch=p4, k=k, counter=counter)
    layout4 = make_layout(query.scale4.height, query.scale4.width, p4)
    layout3 = make_layout(query.scale3.height, query.scale3.width, 2 * p4)
    lifted = lift_topk(res4.topk, layout4, layout3)
    res3 = plmm_forward(
        query.scale3,
        [m.scale3 for m in memory_keys],
        [m.scale3 for m in memory_values],
        patch=2 * p4, k=k, counter=counter, topk_override=lifted)
    return MultiScaleResult(readout4=res4.readout, readout3=res3.readout, topk=res4.topk)
