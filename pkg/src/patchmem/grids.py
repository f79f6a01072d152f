"""Dense array containers, resampling primitives, and the CGRID file format.

All in-memory real arrays are float64; files store them as little-endian
float32. Axis order is fixed: volumes are (Z, T, Y, X), feature grids are
(C, Y, X), single maps are (Y, X).

CGRID layout, byte for byte:

    bytes 0..5    ASCII magic ``CGRID\\n``
    bytes 6..13   u64 little-endian header length L
    bytes 14..    UTF-8 JSON header of length L
    rest          raw row-major payload

The JSON header always carries ``dims``, ``order`` (``ZTYX``, ``CYX`` or
``YX``), ``dtype`` (``f32`` or ``u8``) and ``spacing_mm`` ([dy, dx]); label
volumes additionally carry a ``labels`` legend.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import (
    ContainerFormatError,
    DataError,
    DimensionError,
    LabelError,
    ParameterError,
    TruncationError,
    UnsupportedDtypeError,
)

MAGIC = b"CGRID\n"
CARDIAC_LABELS = {"1": "LV", "2": "Myo", "3": "RV"}
MAX_LABEL = 3

_DTYPE_TO_NUMPY = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class FeatureGrid:
    """A (C, H, W) real-valued feature map."""

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3:
            raise DimensionError(
                f"feature grid must have shape (C, H, W), got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1 or data.shape[2] < 1:
            raise DimensionError(f"feature grid has empty axis: {data.shape}")
        if not np.isfinite(data).all():
            raise DataError("feature grid contains non-finite values")
        self.data = data

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


class CineVolume:
    """A (Z, T, H, W) stack of intensity frames normalized to [0, 1].

    Args:
        intensities: array of shape (Z, T, H, W) with values in [0, 1].
        spacing_mm: in-plane pixel spacing (dy, dx) in millimetres.
    """

    def __init__(self, intensities, spacing_mm=(1.0, 1.0)):
        intensities = np.asarray(intensities, dtype=np.float64)
        if intensities.ndim != 4:
            raise DimensionError(
                f"cine volume must have shape (Z, T, H, W), got {intensities.shape}")
        z, t, h, w = intensities.shape
        if z < 1:
            raise DimensionError("cine volume needs at least one slice")
        if t < 2:
            raise DimensionError("cine volume needs at least two phases")
        if h < 1 or w < 1:
            raise DimensionError(f"cine volume has empty frame axis: {intensities.shape}")
        if not np.isfinite(intensities).all():
            raise DataError("cine volume contains non-finite values")
        if intensities.min() < 0.0 or intensities.max() > 1.0:
            raise DataError("cine volume intensities must lie in [0, 1]")
        dy, dx = float(spacing_mm[0]), float(spacing_mm[1])
        if dy <= 0.0 or dx <= 0.0:
            raise ParameterError(f"spacing must be positive, got {(dy, dx)}")
        self.intensities = intensities
        self.spacing_mm = (dy, dx)

    @property
    def z_count(self):
        return self.intensities.shape[0]

    @property
    def t_count(self):
        return self.intensities.shape[1]

    @property
    def height(self):
        return self.intensities.shape[2]

    @property
    def width(self):
        return self.intensities.shape[3]

    def frame(self, z, t):
        """Return the (H, W) image at slice z, phase t."""
        return self.intensities[z, t]


class LabelVolume:
    """A (Z, T, H, W) stack of uint8 label maps with classes 0..3."""

    def __init__(self, labels, spacing_mm=(1.0, 1.0)):
        labels = np.asarray(labels)
        if labels.ndim != 4:
            raise DimensionError(
                f"label volume must have shape (Z, T, H, W), got {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise LabelError(f"label volume must be integer-typed, got {labels.dtype}")
        if labels.size and (labels.min() < 0 or labels.max() > MAX_LABEL):
            raise LabelError(
                f"label values must lie in 0..{MAX_LABEL}, "
                f"got range {labels.min()}..{labels.max()}")
        dy, dx = float(spacing_mm[0]), float(spacing_mm[1])
        if dy <= 0.0 or dx <= 0.0:
            raise ParameterError(f"spacing must be positive, got {(dy, dx)}")
        self.labels = labels.astype(np.uint8)
        self.spacing_mm = (dy, dx)

    @property
    def z_count(self):
        return self.labels.shape[0]

    @property
    def t_count(self):
        return self.labels.shape[1]

    @property
    def height(self):
        return self.labels.shape[2]

    @property
    def width(self):
        return self.labels.shape[3]

    def frame(self, z, t):
        return self.labels[z, t]


class SoftLabelMap:
    """Per-pixel class probabilities of shape (L + 1, H, W).

    Channel 0 is background; every pixel's channel vector sums to 1
    within 1e-5.
    """

    def __init__(self, probabilities):
        probabilities = np.asarray(probabilities, dtype=np.float64)
        if probabilities.ndim != 3:
            raise DimensionError(
                f"soft label map must have shape (L+1, H, W), got {probabilities.shape}")
        if probabilities.shape[0] < 2:
            raise DimensionError("soft label map needs background plus one class")
        if not np.isfinite(probabilities).all():
            raise DataError("soft label map contains non-finite values")
        if probabilities.min() < -1e-9:
            raise DataError("soft label map has negative probabilities")
        sums = probabilities.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise DataError("soft label map columns must sum to 1 within 1e-5")
        self.probabilities = probabilities

    @property
    def num_classes(self):
        """Foreground class count L (channels minus background)."""
        return self.probabilities.shape[0] - 1

    @property
    def height(self):
        return self.probabilities.shape[1]

    @property
    def width(self):
        return self.probabilities.shape[2]

    def argmax_labels(self):
        """Collapse to a hard (H, W) uint8 label map."""
        return self.probabilities.argmax(axis=0).astype(np.uint8)


def one_hot(labels, num_classes):
    """Expand an integer (H, W) label map into a SoftLabelMap.

    Args:
        labels: 2-d integer array with values in 0..num_classes.
        num_classes: foreground class count L; output has L + 1 channels.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DimensionError(f"label map must be 2-d, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"label map must be integer-typed, got {labels.dtype}")
    if num_classes < 1:
        raise ParameterError("num_classes must be at least 1")
    if labels.size and (labels.min() < 0 or labels.max() > num_classes):
        raise LabelError(
            f"labels exceed class range 0..{num_classes}: "
            f"{labels.min()}..{labels.max()}")
    probs = np.zeros((num_classes + 1,) + labels.shape, dtype=np.float64)
    for c in range(num_classes + 1):
        probs[c] = labels == c
    return SoftLabelMap(probs)


def resize_bilinear(image, out_h, out_w):
    """Bilinear resampling with half-pixel center alignment.

    Source coordinates follow the area-style convention
    ``src = (dst + 0.5) * (in / out) - 0.5`` with edge clamping, so constant
    images stay constant and equal input/output sizes reproduce the input
    exactly. Accepts an (H, W) map or a (C, H, W) grid; channels are
    resampled independently.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (2, 3):
        raise DimensionError(f"resize expects 2-d or 3-d input, got {image.shape}")
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"output size must be positive, got {(out_h, out_w)}")
    in_h, in_w = image.shape[-2], image.shape[-1]

    src_r = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    src_c = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    src_r = np.clip(src_r, 0.0, in_h - 1.0)
    src_c = np.clip(src_c, 0.0, in_w - 1.0)

    r0 = np.floor(src_r).astype(np.intp)
    c0 = np.floor(src_c).astype(np.intp)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    wr = (src_r - r0).reshape(-1, 1)
    wc = (src_c - c0).reshape(1, -1)

    top = image[..., r0, :]
    bot = image[..., r1, :]
    tl, tr = top[..., c0], top[..., c1]
    bl, br = bot[..., c0], bot[..., c1]
    return (1.0 - wr) * ((1.0 - wc) * tl + wc * tr) + wr * ((1.0 - wc) * bl + wc * br)


def downsample_avg(grid, factor):
    """Average-pool a FeatureGrid (or raw (C, H, W) array) by an integer factor.

    Both spatial dims must be divisible by the factor; pooling windows never
    straddle the border, so the global sum is preserved exactly up to float
    rounding.
    """
    data = grid.data if isinstance(grid, FeatureGrid) else np.asarray(grid, dtype=np.float64)
    if data.ndim != 3:
        raise DimensionError(f"downsample expects (C, H, W), got {data.shape}")
    if factor < 1:
        raise ParameterError(f"factor must be >= 1, got {factor}")
    c, h, w = data.shape
    if h % factor or w % factor:
        raise DimensionError(
            f"dims ({h}, {w}) are not divisible by pooling factor {factor}")
    pooled = data.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return FeatureGrid(pooled)


def _header_bytes(header):
    # sort_keys plus fixed separators keeps saves byte-deterministic
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_container(obj, path):
    """Serialize a container to a CGRID file.

    Accepts CineVolume, LabelVolume, FeatureGrid, or a bare 2-d array
    (integer arrays are stored as u8 label maps, real arrays as f32 maps).
    Writing is byte-deterministic: the same object always produces the
    same file.
    """
    if isinstance(obj, CineVolume):
        header = {
            "dims": [int(d) for d in obj.intensities.shape],
            "order": "ZTYX",
            "dtype": "f32",
            "spacing_mm": [obj.spacing_mm[0], obj.spacing_mm[1]],
        }
        payload = obj.intensities.astype("<f4").tobytes()
    elif isinstance(obj, LabelVolume):
        header = {
            "dims": [int(d) for d in obj.labels.shape],
            "order": "ZTYX",
            "dtype": "u8",
            "spacing_mm": [obj.spacing_mm[0], obj.spacing_mm[1]],
            "labels": CARDIAC_LABELS,
        }
        payload = obj.labels.astype("u1").tobytes()
    elif isinstance(obj, FeatureGrid):
        header = {
            "dims": [int(d) for d in obj.data.shape],
            "order": "CYX",
            "dtype": "f32",
            "spacing_mm": [1.0, 1.0],
        }
        payload = obj.data.astype("<f4").tobytes()
    elif isinstance(obj, np.ndarray) and obj.ndim == 2:
        if np.issubdtype(obj.dtype, np.integer):
            if obj.size and (obj.min() < 0 or obj.max() > 255):
                raise LabelError("2-d integer map does not fit in u8")
            header = {
                "dims": [int(d) for d in obj.shape],
                "order": "YX",
                "dtype": "u8",
                "spacing_mm": [1.0, 1.0],
            }
            payload = obj.astype("u1").tobytes()
        else:
            header = {
                "dims": [int(d) for d in obj.shape],
                "order": "YX",
                "dtype": "f32",
                "spacing_mm": [1.0, 1.0],
            }
            payload = obj.astype("<f4").tobytes()
    else:
        raise ParameterError(f"cannot serialize object of type {type(obj).__name__}")

    blob = _header_bytes(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(payload)


def load_container(path):
    """Read a CGRID file back into its typed container.

    Dispatch is driven by the header: ZTYX u8 gives a LabelVolume, ZTYX f32 a
    CineVolume, CYX f32 a FeatureGrid, and YX either a uint8 or float64 2-d
    array.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8:
        raise ContainerFormatError(f"file too short for a CGRID header: {path}")
    if raw[: len(MAGIC)] != MAGIC:
        raise ContainerFormatError(f"bad magic in {path}")
    header_len = int.from_bytes(raw[len(MAGIC): len(MAGIC) + 8], "little")
    header_start = len(MAGIC) + 8
    if len(raw) < header_start + header_len:
        raise ContainerFormatError(f"header truncated in {path}")
    try:
        header = json.loads(raw[header_start: header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"header is not valid JSON in {path}: {exc}") from exc

    for key in ("dims", "order", "dtype", "spacing_mm"):
        if key not in header:
            raise ContainerFormatError(f"header missing required key {key!r} in {path}")
    dims = header["dims"]
    order = header["order"]
    dtype_name = header["dtype"]
    spacing = header["spacing_mm"]
    if dtype_name not in _DTYPE_TO_NUMPY:
        raise UnsupportedDtypeError(f"unsupported dtype {dtype_name!r} in {path}")
    if order not in ("ZTYX", "CYX", "YX"):
        raise ContainerFormatError(f"unsupported axis order {order!r} in {path}")
    if not isinstance(dims, list) or len(dims) != len(order) or any(
            not isinstance(d, int) or d < 1 for d in dims):
        raise ContainerFormatError(f"dims {dims!r} do not match order {order!r} in {path}")
    if (not isinstance(spacing, list) or len(spacing) != 2
            or any(not isinstance(s, (int, float)) or s <= 0 for s in spacing)):
        raise ContainerFormatError(f"bad spacing_mm {spacing!r} in {path}")

    np_dtype = _DTYPE_TO_NUMPY[dtype_name]
    expected = int(np.prod(dims)) * np_dtype.itemsize
    payload = raw[header_start + header_len:]
    if len(payload) != expected:
        raise TruncationError(
            f"payload is {len(payload)} bytes but header implies {expected} in {path}")
    data = np.frombuffer(payload, dtype=np_dtype).reshape(dims)

    if order == "ZTYX":
        if dtype_name == "u8":
            return LabelVolume(data, spacing_mm=tuple(spacing))
        return CineVolume(data.astype(np.float64), spacing_mm=tuple(spacing))
    if order == "CYX":
        if dtype_name != "f32":
            raise UnsupportedDtypeError(
                f"feature grids must be f32, got {dtype_name!r} in {path}")
        return FeatureGrid(data.astype(np.float64))
    # order == "YX": a bare 2-d map, used for seed masks
    if dtype_name == "u8":
        return data.astype(np.uint8).copy()
    return data.astype(np.float64)
