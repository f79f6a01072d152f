"""Metrics, the synthetic 4D phantom, and complexity accounting.

Dice is computed per class over pooled voxels; HD95 is computed per frame
in 2D (millimetres, anisotropic in-plane spacing allowed) and aggregated by
the mean over frames where it is defined. A frame with an empty mask on
either side has no HD95 and is excluded with a count.

The phantom is a fully analytic short-axis heart: an LV disc inside a
myocardial ring, with an RV crescent attached on one side. Contraction
scales the geometry through the cycle, through-plane shortening removes the
apical slices around end-systole, and an optional bright off-heart blob
provides false-match pressure. Labels are exact (no noise); intensities get
Gaussian noise and are clipped to [0, 1]. Everything is deterministic under
the seed.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DimensionError, ParameterError, PhantomSpecError
from .grids import CineVolume, FeatureGrid, LabelVolume
from .matcher import OpCounter, dense_readout, plmm_forward
from .patcher import make_layout
from .pyramid import lift_topk

CLASS_NAMES = {1: "LV", 2: "Myo", 3: "RV"}

_PLUS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def dice(pred, truth, label):
    """Dice overlap of one class between two label maps.

    Both masks empty gives 1.0; exactly one empty gives 0.0.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    a = pred == label
    b = truth == label
    na = int(a.sum())
    nb = int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def _boundary(mask):
    """Pixels of the mask with at least one 4-neighbour outside it.

    The image border counts as outside, so a mask touching the border has
    boundary pixels there.
    """
    interior = ndimage.binary_erosion(mask, structure=_PLUS, border_value=0)
    return mask & ~interior


def hd95(pred, truth, label, spacing_mm=(1.0, 1.0)):
    """95th-percentile symmetric boundary distance in millimetres.

    Distances from every boundary pixel of one mask to the nearest boundary
    pixel of the other are pooled in both directions; the nearest-rank 95th
    percentile of the pooled list is returned. If either mask is empty the
    distance is undefined and None is returned.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.ndim != 2:
        raise DimensionError("hd95 operates on single 2-d frames")
    dy, dx = float(spacing_mm[0]), float(spacing_mm[1])
    if dy <= 0 or dx <= 0:
        raise ParameterError(f"spacing must be positive, got {spacing_mm}")
    a = pred == label
    b = truth == label
    if not a.any() or not b.any():
        return None
    pa = np.argwhere(_boundary(a)).astype(np.float64) * np.array([dy, dx])
    pb = np.argwhere(_boundary(b)).astype(np.float64) * np.array([dy, dx])
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    pooled = np.sort(np.concatenate([d_ab, d_ba]))
    rank = math.ceil(0.95 * pooled.size)  # nearest-rank percentile
    return float(pooled[rank - 1])


@dataclass
class MetricRow:
    method: str
    region: str
    class_label: str
    dice: float
    hd95_mm: float | None
    n_frames: int
    n_excluded_hd: int


@dataclass
class MetricsReport:
    """Per-class, per-region metric rows plus per-region class averages."""

    rows: list

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "region", "class", "dice", "hd95_mm",
                             "n_frames", "n_excluded_hd"])
            for r in self.rows:
                writer.writerow([
                    r.method, r.region, r.class_label,
                    f"{r.dice:.6f}",
                    "" if r.hd95_mm is None else f"{r.hd95_mm:.6f}",
                    r.n_frames, r.n_excluded_hd,
                ])

    def format_table(self):
        lines = [f"{'region':<8} {'class':<5} {'dice':>8} {'hd95_mm':>9} "
                 f"{'frames':>7} {'hd_excl':>8}"]
        for r in self.rows:
            hd = "-" if r.hd95_mm is None else f"{r.hd95_mm:9.3f}"
            lines.append(f"{r.region:<8} {r.class_label:<5} {r.dice:8.4f} "
                         f"{hd:>9} {r.n_frames:7d} {r.n_excluded_hd:8d}")
        return "\n".join(lines)

    def lookup(self, region, class_label):
        for r in self.rows:
            if r.region == region and r.class_label == class_label:
                return r
        raise KeyError((region, class_label))


def _frame_hd_table(pred, truth, spacing, threads=1):
    """HD95 for every (z, t, label) frame, computed once and shared by the
    region rows. The task order is fixed, so results do not depend on the
    worker count."""
    z_count, t_count = truth.shape[:2]
    tasks = [(z, t, label)
             for label in CLASS_NAMES
             for z in range(z_count)
             for t in range(t_count)]

    def one(task):
        z, t, label = task
        return hd95(pred[z, t], truth[z, t], label, spacing)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(one, tasks))
    else:
        values = [one(task) for task in tasks]
    return dict(zip(tasks, values))


def report_by_region(pred, truth, partition, method="plmm", threads=1):
    """Score a predicted LabelVolume against the truth, region by region.

    Dice pools all voxels of a region's frames per class; HD95 is averaged
    over the region's frames where defined. Regions are basal, middle, apex,
    and whole (all slices), each with per-class rows plus an Avg row.
    """
    if not isinstance(pred, LabelVolume) or not isinstance(truth, LabelVolume):
        raise ParameterError("report_by_region expects LabelVolume inputs")
    if pred.labels.shape != truth.labels.shape:
        raise DimensionError(
            f"prediction {pred.labels.shape} and truth {truth.labels.shape} disagree")
    if partition.z_count != truth.z_count:
        raise DimensionError(
            f"partition covers {partition.z_count} slices, volume has {truth.z_count}")
    spacing = truth.spacing_mm
    hd_table = _frame_hd_table(pred.labels, truth.labels, spacing, threads)
    regions = [
        ("basal", partition.basal),
        ("middle", partition.middle),
        ("apex", partition.apex),
        ("whole", tuple(range(truth.z_count))),
    ]
    t_count = truth.t_count
    rows = []
    for region_name, slices in regions:
        pred_stack = pred.labels[list(slices)]
        truth_stack = truth.labels[list(slices)]
        n_frames = len(slices) * t_count
        class_dices = []
        class_hds = []
        for label, cname in CLASS_NAMES.items():
            d = dice(pred_stack, truth_stack, label)
            frame_hds = [hd_table[(z, t, label)]
                         for z in slices for t in range(t_count)]
            hds = [h for h in frame_hds if h is not None]
            excluded = len(frame_hds) - len(hds)
            hd_mean = float(np.mean(hds)) if hds else None
            rows.append(MetricRow(method, region_name, cname, d, hd_mean,
                                  n_frames, excluded))
            class_dices.append(d)
            if hd_mean is not None:
                class_hds.append(hd_mean)
        rows.append(MetricRow(
            method, region_name, "Avg",
            float(np.mean(class_dices)),
            float(np.mean(class_hds)) if class_hds else None,
            n_frames,
            sum(r.n_excluded_hd for r in rows[-3:]),
        ))
    return MetricsReport(rows=rows)


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of the analytic 4D phantom.

    Geometry is specified at end-diastole; contraction_frac scales it down
    toward end-systole by 1 - c * sin^2(pi * t / T), and
    longaxis_shorten_frac empties ceil(frac * Z) apical slices around
    end-systole. The distractor is a static bright blob away from the heart.
    """

    z_count: int = 9
    t_count: int = 10
    height: int = 128
    width: int = 128
    spacing_mm: tuple = (1.3, 1.3)
    lv_radius_px: float = 20.0
    myo_thickness_px: float = 7.0
    rv_offset_px: float = 30.0
    contraction_frac: float = 0.3
    longaxis_shorten_frac: float = 2.0 / 9.0
    noise_sigma: float = 0.03
    distractor: bool = True
    seed: int = 7

    def __post_init__(self):
        if self.z_count < 1 or self.t_count < 2:
            raise PhantomSpecError(
                f"need z_count >= 1 and t_count >= 2, got ({self.z_count}, {self.t_count})")
        if self.height < 16 or self.width < 16:
            raise PhantomSpecError("frame dims must be at least 16")
        if not 0.0 <= self.contraction_frac < 1.0:
            raise PhantomSpecError(
                f"contraction_frac must lie in [0, 1), got {self.contraction_frac}")
        if not 0.0 <= self.longaxis_shorten_frac <= 1.0:
            raise PhantomSpecError(
                f"longaxis_shorten_frac must lie in [0, 1], got {self.longaxis_shorten_frac}")
        if self.noise_sigma < 0.0:
            raise PhantomSpecError("noise_sigma must be non-negative")
        if self.lv_radius_px <= 0 or self.myo_thickness_px <= 0 or self.rv_offset_px <= 0:
            raise PhantomSpecError("geometry radii must be positive")


def _phantom_centers(spec):
    cy = 0.5 * (spec.height - 1)
    cx = 0.5 * (spec.width - 1)
    outer = spec.lv_radius_px + spec.myo_thickness_px
    dist_c = (cy + 1.6 * outer, cx + 1.6 * outer)
    dist_r = 0.4 * spec.lv_radius_px
    return cy, cx, outer, dist_c, dist_r


def _check_margins(spec):
    cy, cx, outer, dist_c, dist_r = _phantom_centers(spec)
    margin = 2.0
    checks = [
        cy - outer, spec.height - 1 - (cy + outer) ,
        cx - outer, spec.width - 1 - (cx + outer),
        cx - spec.rv_offset_px - spec.lv_radius_px,
    ]
    if spec.distractor:
        checks += [
            dist_c[0] - dist_r, spec.height - 1 - (dist_c[0] + dist_r),
            dist_c[1] - dist_r, spec.width - 1 - (dist_c[1] + dist_r),
        ]
    if min(checks) < margin:
        raise PhantomSpecError(
            "phantom geometry does not fit inside the frame with a 2 px margin")


def gen_phantom(spec=PhantomSpec()):
    """Generate the phantom's cine volume and its exact label volume."""
    _check_margins(spec)
    z_count, t_count = spec.z_count, spec.t_count
    h, w = spec.height, spec.width
    cy, cx, outer, dist_c, dist_r = _phantom_centers(spec)
    n_short = math.ceil(spec.longaxis_shorten_frac * z_count) \
        if spec.longaxis_shorten_frac > 0 else 0

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d_lv = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)

    labels = np.zeros((z_count, t_count, h, w), dtype=np.uint8)
    intens = np.full((z_count, t_count, h, w), 0.15, dtype=np.float64)

    if spec.distractor:
        d_blob = np.sqrt((yy - dist_c[0]) ** 2 + (xx - dist_c[1]) ** 2)
        blob = d_blob <= dist_r
    else:
        blob = None

    for tau in range(t_count):
        pf = math.sin(math.pi * tau / t_count) ** 2
        s = 1.0 - spec.contraction_frac * pf
        r_lv = spec.lv_radius_px * s
        r_outer = outer * s
        rv_off = spec.rv_offset_px * s
        r_rv = spec.lv_radius_px * s
        d_rv = np.sqrt((yy - cy) ** 2 + (xx - (cx - rv_off)) ** 2)

        lab2d = np.zeros((h, w), dtype=np.uint8)
        lab2d[d_rv <= r_rv] = 3
        lab2d[d_lv <= r_outer] = 2
        lab2d[d_lv <= r_lv] = 1

        img2d = np.full((h, w), 0.15, dtype=np.float64)
        img2d[lab2d == 2] = 0.45
        img2d[(lab2d == 1) | (lab2d == 3)] = 0.9
        if blob is not None:
            img2d[blob] = 0.85

        visible_limit = z_count - n_short * pf
        for z in range(z_count):
            if z < visible_limit:
                labels[z, tau] = lab2d
                intens[z, tau] = img2d
            else:
                # apical slice lost to through-plane shortening at this phase
                if blob is not None:
                    frame = np.full((h, w), 0.15, dtype=np.float64)
                    frame[blob] = 0.85
                    intens[z, tau] = frame

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        intens = intens + rng.normal(0.0, spec.noise_sigma, size=intens.shape)
    intens = np.clip(intens, 0.0, 1.0)
    return (CineVolume(intens, spacing_mm=spec.spacing_mm),
            LabelVolume(labels, spacing_mm=spec.spacing_mm))


@dataclass(frozen=True)
class BenchConfig:
    """One complexity measurement point."""

    t: int
    h: int
    w: int
    patch: int
    k: int
    scales: tuple = (4,)


@dataclass
class BenchRow:
    t: int
    h: int
    w: int
    patch: int
    k: int
    scale: int
    predicted_patch_pairs: int
    measured_patch_pairs: int
    predicted_pixel_pairs: int
    measured_pixel_pairs: int
    predicted_dense_pairs: int
    measured_dense_pairs: int
    plmm_ms: float
    dense_ms: float

    @property
    def counts_match(self):
        return (self.predicted_patch_pairs == self.measured_patch_pairs
                and self.predicted_pixel_pairs == self.measured_pixel_pairs
                and self.predicted_dense_pairs == self.measured_dense_pairs)


@dataclass
class ComplexityReport:
    rows: list

    @property
    def all_match(self):
        return all(r.counts_match for r in self.rows)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([
                "T", "H", "W", "P", "K", "scale",
                "predicted_patch_pairs", "measured_patch_pairs",
                "predicted_pixel_pairs", "measured_pixel_pairs",
                "plmm_ms", "dense_ms",
            ])
            for r in self.rows:
                writer.writerow([
                    r.t, r.h, r.w, r.patch, r.k, r.scale,
                    r.predicted_patch_pairs, r.measured_patch_pairs,
                    r.predicted_pixel_pairs, r.measured_pixel_pairs,
                    f"{r.plmm_ms:.3f}", f"{r.dense_ms:.3f}",
                ])


def default_bench_grid():
    """The stock measurement grid: eleven configurations, two with a
    scale-3 pass attached."""
    return [
        BenchConfig(t=2, h=24, w=24, patch=6, k=4, scales=(3, 4)),
        BenchConfig(t=1, h=24, w=24, patch=6, k=4),
        BenchConfig(t=3, h=24, w=24, patch=6, k=4),
        BenchConfig(t=2, h=24, w=24, patch=6, k=1),
        BenchConfig(t=2, h=24, w=24, patch=6, k=2),
        BenchConfig(t=2, h=24, w=24, patch=4, k=4),
        BenchConfig(t=2, h=24, w=24, patch=8, k=4),
        BenchConfig(t=2, h=36, w=36, patch=6, k=4, scales=(3, 4)),
        BenchConfig(t=2, h=48, w=48, patch=6, k=4),
        BenchConfig(t=3, h=48, w=48, patch=6, k=4),
        BenchConfig(t=2, h=60, w=60, patch=6, k=4),
    ]


def _median_ms(fn, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(times))


def check_complexity(configs=None, reps=5, c_key=8, c_val=4, seed=0):
    """Run the matcher over a config grid and compare counters to closed forms.

    For each config the scale-4 pass predicts T*N^2 patch pairs and
    N*K*(P^2)^2 pixel pairs; the dense path predicts T*(H*W)^2. Configs with
    a scale-3 entry additionally run the lifted pass at doubled dims and
    patch size, which must add zero patch pairs and N*K*((2P)^2)^2 pixel
    pairs. Wall times are medians over the given repetitions.
    """
    if configs is None:
        configs = default_bench_grid()
    rng = np.random.default_rng(seed)
    rows = []
    for cfg in configs:
        layout = make_layout(cfg.h, cfg.w, cfg.patch)
        n = layout.n_patches
        if cfg.k > cfg.t * n:
            raise ParameterError(
                f"config {cfg} has k > T*N ({cfg.k} > {cfg.t * n})")
        q4 = FeatureGrid(rng.standard_normal((c_key, cfg.h, cfg.w)))
        mk4 = [FeatureGrid(rng.standard_normal((c_key, cfg.h, cfg.w)))
               for _ in range(cfg.t)]
        mv4 = [FeatureGrid(rng.standard_normal((c_val, cfg.h, cfg.w)))
               for _ in range(cfg.t)]

        counter = OpCounter()
        res4 = plmm_forward(q4, mk4, mv4, cfg.patch, cfg.k, counter=counter)
        dense_counter = OpCounter()
        dense_readout(q4, mk4, mv4, counter=dense_counter)
        plmm_ms = _median_ms(
            lambda: plmm_forward(q4, mk4, mv4, cfg.patch, cfg.k), reps)
        dense_ms = _median_ms(lambda: dense_readout(q4, mk4, mv4), reps)
        hw = cfg.h * cfg.w
        rows.append(BenchRow(
            t=cfg.t, h=cfg.h, w=cfg.w, patch=cfg.patch, k=cfg.k, scale=4,
            predicted_patch_pairs=cfg.t * n * n,
            measured_patch_pairs=counter.patch_pairs,
            predicted_pixel_pairs=n * cfg.k * (cfg.patch ** 2) ** 2,
            measured_pixel_pairs=counter.pixel_pairs,
            predicted_dense_pairs=cfg.t * hw * hw,
            measured_dense_pairs=dense_counter.pixel_pairs,
            plmm_ms=plmm_ms, dense_ms=dense_ms,
        ))

        if 3 not in cfg.scales:
            continue
        h3, w3, p3 = 2 * cfg.h, 2 * cfg.w, 2 * cfg.patch
        layout3 = make_layout(h3, w3, p3)
        lifted = lift_topk(res4.topk, layout, layout3)
        q3 = FeatureGrid(rng.standard_normal((c_key, h3, w3)))
        mk3 = [FeatureGrid(rng.standard_normal((c_key, h3, w3)))
               for _ in range(cfg.t)]
        mv3 = [FeatureGrid(rng.standard_normal((c_val, h3, w3)))
               for _ in range(cfg.t)]
        counter3 = OpCounter()
        plmm_forward(q3, mk3, mv3, p3, cfg.k, counter=counter3,
                     topk_override=lifted)
        dense_counter3 = OpCounter()
        dense_readout(q3, mk3, mv3, counter=dense_counter3)
        plmm3_ms = _median_ms(
            lambda: plmm_forward(q3, mk3, mv3, p3, cfg.k, topk_override=lifted),
            reps)
        dense3_ms = _median_ms(lambda: dense_readout(q3, mk3, mv3), reps)
        hw3 = h3 * w3
        rows.append(BenchRow(
            t=cfg.t, h=h3, w=w3, patch=p3, k=cfg.k, scale=3,
            predicted_patch_pairs=0,
            measured_patch_pairs=counter3.patch_pairs,
            predicted_pixel_pairs=layout3.n_patches * cfg.k * (p3 ** 2) ** 2,
            measured_pixel_pairs=counter3.pixel_pairs,
            predicted_dense_pairs=cfg.t * hw3 * hw3,
            measured_dense_pairs=dense_counter3.pixel_pairs,
            plmm_ms=plmm3_ms, dense_ms=dense3_ms,
        ))
    return ComplexityReport(rows=rows)
