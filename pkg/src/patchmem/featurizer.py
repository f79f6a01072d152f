"""Handcrafted feature encoders for the key and value pathways.

The key pathway turns one grayscale frame into a two-scale pyramid of
compact feature grids. The channel bank is deliberately simple and fully
deterministic: the raw intensity, Gaussian blurs at a few widths, a
finite-difference gradient magnitude, a 3x3 local standard deviation, and
(by default) normalized row/column coordinates. The bank is average-pooled
to strides 8 and 16, standardized per channel per frame, and projected to a
fixed channel count with a seeded random linear map shared by all frames
and both scales.

The value pathway carries class probabilities: a soft label map is
area-averaged to the same two strides. Decoding reverses that with bilinear
upsampling, averages whatever scales are active, clamps, and renormalizes.

Externally computed pyramids can be loaded from CGRID files instead, one
CYX file per scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ParameterError, PyramidError
from .grids import (
    FeatureGrid,
    SoftLabelMap,
    downsample_avg,
    load_container,
    resize_bilinear,
)
from .pyramid import FeaturePyramid, KeyPyramid, ValuePyramid

STRIDE_SCALE4 = 16
STRIDE_SCALE3 = 8
_VAR_CLAMP = 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    """Settings for the handcrafted key encoder.

    Attributes:
        mode: "handcrafted" computes features here; "external-file" marks
            runs whose pyramids come from load_feature_pyramid.
        key_channels: output channel count after projection.
        blur_sigmas: Gaussian blur widths in the channel bank.
        include_coords: append normalized row/col coordinate channels.
        projection_seed: seed of the fixed random projection.
    """

    mode: str = "handcrafted"
    key_channels: int = 32
    blur_sigmas: tuple = (1.0, 2.0, 4.0)
    include_coords: bool = True
    projection_seed: int = 1234

    def __post_init__(self):
        if self.mode not in ("handcrafted", "external-file"):
            raise ParameterError(f"unknown encoder mode {self.mode!r}")
        if self.key_channels < 1:
            raise ParameterError("key_channels must be positive")
        if any(s <= 0 for s in self.blur_sigmas):
            raise ParameterError("blur sigmas must be positive")

    @property
    def raw_channels(self):
        return 3 + len(self.blur_sigmas) + (2 if self.include_coords else 0)


def raw_channel_names(cfg):
    """Channel names of the raw bank, in stacking order."""
    names = ["intensity"]
    names += [f"blur{int(s) if float(s).is_integer() else s}" for s in cfg.blur_sigmas]
    names += ["gradmag", "localstd"]
    if cfg.include_coords:
        names += ["row", "col"]
    return names


def raw_feature_bank(image, cfg):
    """Compute the unprojected channel bank for one frame.

    Args:
        image: (H, W) array with values in [0, 1].
        cfg: EncoderConfig.

    Returns:
        (C_raw, H, W) float64 array; channel order follows
        raw_channel_names(cfg).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError(f"encoder expects an (H, W) frame, got {image.shape}")
    h, w = image.shape
    if h < 2 or w < 2:
        raise DimensionError("frame too small to featurize")

    channels = [image]
    for sigma in cfg.blur_sigmas:
        channels.append(ndimage.gaussian_filter(image, sigma=sigma, mode="reflect"))

    gy, gx = np.gradient(image)
    channels.append(np.sqrt(gy * gy + gx * gx))

    mean = ndimage.uniform_filter(image, size=3, mode="reflect")
    mean_sq = ndimage.uniform_filter(image * image, size=3, mode="reflect")
    channels.append(np.sqrt(np.maximum(mean_sq - mean * mean, 0.0)))

    if cfg.include_coords:
        rows = np.repeat(np.arange(h, dtype=np.float64)[:, None], w, axis=1) / (h - 1)
        cols = np.repeat(np.arange(w, dtype=np.float64)[None, :], h, axis=0) / (w - 1)
        channels.append(rows)
        channels.append(cols)
    return np.stack(channels, axis=0)


def projection_matrix(cfg):
    """The fixed random projection shared by every frame and both scales."""
    rng = np.random.default_rng(cfg.projection_seed)
    mat = rng.standard_normal((cfg.key_channels, cfg.raw_channels))
    return mat / np.sqrt(cfg.raw_channels)


def _standardize(grid):
    """Zero-mean unit-variance per channel, variance clamped at 1e-6."""
    data = grid.data
    mean = data.mean(axis=(1, 2), keepdims=True)
    var = data.var(axis=(1, 2), keepdims=True)
    return (data - mean) / np.sqrt(np.maximum(var, _VAR_CLAMP))


def encode_key(image, cfg=EncoderConfig()):
    """Encode one frame into a two-scale key pyramid.

    The frame dims must be divisible by 16. Identical inputs produce
    bit-identical outputs.
    """
    if cfg.mode != "handcrafted":
        raise ParameterError(
            "encode_key computes handcrafted features; external pyramids "
            "come from load_feature_pyramid")
    bank = raw_feature_bank(image, cfg)
    h, w = bank.shape[1], bank.shape[2]
    if h % STRIDE_SCALE4 or w % STRIDE_SCALE4:
        raise DimensionError(
            f"frame dims ({h}, {w}) must be divisible by {STRIDE_SCALE4}")
    proj = projection_matrix(cfg)
    grids = {}
    for name, stride in (("scale4", STRIDE_SCALE4), ("scale3", STRIDE_SCALE3)):
        pooled = downsample_avg(bank, stride)
        std = _standardize(pooled)
        c, gh, gw = std.shape
        projected = (proj @ std.reshape(c, gh * gw)).reshape(cfg.key_channels, gh, gw)
        grids[name] = FeatureGrid(projected)
    return KeyPyramid(scale4=grids["scale4"], scale3=grids["scale3"])


def encode_value(labels_soft):
    """Area-average a soft label map down to the two matching strides.

    Pooling preserves normalization exactly, so each pooled cell is still a
    probability vector.
    """
    if not isinstance(labels_soft, SoftLabelMap):
        raise ParameterError("encode_value expects a SoftLabelMap")
    h, w = labels_soft.height, labels_soft.width
    if h % STRIDE_SCALE4 or w % STRIDE_SCALE4:
        raise DimensionError(
            f"soft map dims ({h}, {w}) must be divisible by {STRIDE_SCALE4}")
    g3 = downsample_avg(labels_soft.probabilities, STRIDE_SCALE3)
    g4 = downsample_avg(labels_soft.probabilities, STRIDE_SCALE4)
    for g in (g3, g4):
        sums = g.data.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise DimensionError("pooled value grid lost probability normalization")
    return ValuePyramid(scale4=g4, scale3=g3)


def decode(readout3, readout4):
    """Fuse per-scale readouts back into a full-resolution soft label map.

    Either readout may be None (single-scale mode) but not both. Both are
    bilinearly upsampled to full resolution (stride 8 and 16 respectively),
    averaged when both are present, clamped to [0, 1], and renormalized
    per pixel.
    """
    if readout3 is None and readout4 is None:
        raise ParameterError("decode needs at least one scale")
    if readout3 is not None and readout4 is not None:
        if readout3.channels != readout4.channels:
            raise DimensionError(
                f"scale channel mismatch: {readout3.channels} vs {readout4.channels}")
        if (readout3.height * STRIDE_SCALE3 != readout4.height * STRIDE_SCALE4
                or readout3.width * STRIDE_SCALE3 != readout4.width * STRIDE_SCALE4):
            raise DimensionError("per-scale readout dims imply different resolutions")
    if readout3 is not None:
        out_h = readout3.height * STRIDE_SCALE3
        out_w = readout3.width * STRIDE_SCALE3
    else:
        out_h = readout4.height * STRIDE_SCALE4
        out_w = readout4.width * STRIDE_SCALE4

    ups = []
    if readout3 is not None:
        ups.append(resize_bilinear(readout3.data, out_h, out_w))
    if readout4 is not None:
        ups.append(resize_bilinear(readout4.data, out_h, out_w))
    fused = ups[0] if len(ups) == 1 else 0.5 * (ups[0] + ups[1])
    fused = np.clip(fused, 0.0, 1.0)
    sums = fused.sum(axis=0, keepdims=True)
    # degenerate all-zero pixels fall back to uniform
    uniform = 1.0 / fused.shape[0]
    fused = np.where(sums > 1e-12, fused / np.maximum(sums, 1e-12), uniform)
    return SoftLabelMap(fused)


def load_feature_pyramid(path_scale4, path_scale3):
    """Load an externally computed pyramid, one CGRID CYX file per scale."""
    g4 = load_container(path_scale4)
    g3 = load_container(path_scale3)
    if not isinstance(g4, FeatureGrid) or not isinstance(g3, FeatureGrid):
        raise PyramidError("feature pyramid files must hold CYX feature grids")
    return FeaturePyramid(scale4=g4, scale3=g3)
