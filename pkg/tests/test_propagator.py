"""Region partition, memory bank policy, and 4D scheduling."""

import numpy as np
import pytest
from scipy import ndimage

from patchmem.errors import (
    DimensionError,
    LabelError,
    ParameterError,
    PartitionError,
    SchedulingError,
    StateError,
)
from patchmem.grids import CineVolume
from patchmem.propagator import (
    BankEntry,
    MemoryBank,
    PropagationConfig,
    PropagationEngine,
    partition_regions,
    propagate_temporal,
    propagate_z,
    run_4d,
    working_side_for,
)


def smooth_volume(z, t, h=48, w=48, seed=11):
    rng = np.random.default_rng(seed)
    frames = np.empty((z, t, h, w))
    for zi in range(z):
        for ti in range(t):
            base = ndimage.gaussian_filter(rng.random((h, w)), 3.0)
            frames[zi, ti] = (base - base.min()) / (base.max() - base.min())
    return CineVolume(frames)


def disc_seed(h=48, w=48):
    labels = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    labels[(yy - h / 2) ** 2 + (xx - w / 2) ** 2 < 64] = 1
    labels[(yy - h / 2) ** 2 + (xx - w / 4) ** 2 < 16] = 2
    return labels


FAST = PropagationConfig(patch=6, k=2, scales=(4,))


class TestPartition:
    def test_nine_slices_in_thirds(self):
        part = partition_regions(9)
        assert part.basal == (0, 1, 2)
        assert part.middle == (3, 4, 5)
        assert part.apex == (6, 7, 8)
        assert part.z_count == 9

    def test_ten_slices_rounds_outer_regions_up(self):
        part = partition_regions(10)
        assert part.basal == (0, 1, 2, 3)
        assert part.middle == (4, 5)
        assert part.apex == (6, 7, 8, 9)

    def test_region_of(self):
        part = partition_regions(9)
        assert part.region_of(0) == "basal"
        assert part.region_of(4) == "middle"
        assert part.region_of(8) == "apex"
        with pytest.raises(ParameterError):
            part.region_of(9)

    def test_empty_middle_rejected(self):
        with pytest.raises(PartitionError):
            partition_regions(3, (0.45, 0.45))

    def test_bad_fractions_rejected(self):
        with pytest.raises(ParameterError):
            partition_regions(9, (0.0, 0.3))
        with pytest.raises(ParameterError):
            partition_regions(9, (0.3, 1.0))
        with pytest.raises(ParameterError):
            partition_regions(0)


class TestMemoryBank:
    @staticmethod
    def entry(z, t):
        return BankEntry(z=z, t=t, keys=None, values=None)

    def test_anchor_survives_eviction(self):
        bank = MemoryBank(2)
        bank.add(self.entry(0, 0))
        bank.add(self.entry(0, 1))
        bank.add(self.entry(0, 2))
        assert bank.frame_ids() == [(0, 0), (0, 2)]

    def test_eviction_is_fifo_after_anchor(self):
        bank = MemoryBank(3)
        for t in range(5):
            bank.add(self.entry(1, t))
        assert bank.frame_ids() == [(1, 0), (1, 3), (1, 4)]

    def test_duplicates_ignored(self):
        bank = MemoryBank(3)
        bank.add(self.entry(2, 0))
        bank.add(self.entry(2, 0))
        assert len(bank) == 1

    def test_capacity_one_cannot_evict(self):
        bank = MemoryBank(1)
        bank.add(self.entry(0, 0))
        with pytest.raises(StateError):
            bank.add(self.entry(0, 1))

    def test_capacity_must_be_positive(self):
        with pytest.raises(ParameterError):
            MemoryBank(0)


class TestPropagationConfig:
    def test_defaults(self):
        cfg = PropagationConfig()
        assert cfg.scales == (3, 4)
        assert cfg.apex_t_max == 3

    def test_scales_normalized(self):
        assert PropagationConfig(scales=(4, 3, 3)).scales == (3, 4)

    @pytest.mark.parametrize("kwargs", [
        {"patch": 5},
        {"patch": 0},
        {"k": 0},
        {"scales": ()},
        {"scales": (2,)},
        {"apex_t_max": 1},
        {"continuity_mode": "none"},
        {"matcher": "exact"},
        {"t0": -1},
    ])
    def test_invalid_settings(self, kwargs):
        with pytest.raises(ParameterError):
            PropagationConfig(**kwargs)


class TestWorkingResolution:
    @pytest.mark.parametrize("side,patch,want", [
        (48, 6, 96),
        (96, 6, 96),
        (97, 6, 144),
        (128, 6, 144),
        (200, 6, 240),
        (100, 4, 128),
    ])
    def test_smallest_admissible(self, side, patch, want):
        assert working_side_for(side, patch) == want

    def test_override_must_be_admissible(self):
        vol = smooth_volume(3, 2)
        cfg = PropagationConfig(patch=6, scales=(4,), working_side=100)
        with pytest.raises(ParameterError):
            run_4d(vol, disc_seed(), cfg)

    def test_work_dims_reported(self):
        vol = smooth_volume(3, 2)
        result = run_4d(vol, disc_seed(), FAST)
        assert result.work_dims == (96, 96)


class TestEngineGuards:
    def test_seed_shape_mismatch(self):
        engine = PropagationEngine(smooth_volume(3, 2), FAST)
        with pytest.raises(DimensionError):
            engine.seed_anchor(np.zeros((32, 32), dtype=np.uint8))

    def test_seed_must_be_integer(self):
        engine = PropagationEngine(smooth_volume(3, 2), FAST)
        with pytest.raises(LabelError):
            engine.seed_anchor(np.zeros((48, 48)))

    def test_z0_outside_middle(self):
        vol = smooth_volume(9, 2)
        with pytest.raises(PartitionError):
            PropagationEngine(vol, PropagationConfig(z0=0, scales=(4,)))

    def test_t0_out_of_range(self):
        vol = smooth_volume(3, 2)
        with pytest.raises(ParameterError):
            PropagationEngine(vol, PropagationConfig(t0=5, scales=(4,)))

    def test_frame_cannot_be_segmented_twice(self):
        engine = PropagationEngine(smooth_volume(3, 2), FAST)
        engine.seed_anchor(disc_seed())
        with pytest.raises(SchedulingError):
            engine.install_soft(engine.z0, engine.t0,
                                np.full((4, 96, 96), 0.25), provenance=[])

    def test_memory_requires_a_mask(self):
        engine = PropagationEngine(smooth_volume(3, 2), FAST)
        engine.seed_anchor(disc_seed())
        with pytest.raises(SchedulingError):
            engine.values_of(0, 1)

    def test_empty_bank_rejected(self):
        engine = PropagationEngine(smooth_volume(3, 2), FAST)
        engine.seed_anchor(disc_seed())
        with pytest.raises(StateError):
            engine.segment_frame((0, 0), MemoryBank(2))


class TestTemporalPass:
    def test_provenance_chain(self):
        vol = smooth_volume(3, 4)
        masks, prov = propagate_temporal(vol, disc_seed(), FAST)
        z0 = 1
        assert set(masks) == {(z0, t) for t in range(4)}
        assert prov[(z0, 0)] == []
        assert prov[(z0, 1)] == [(z0, 0)]
        assert prov[(z0, 2)] == [(z0, 0), (z0, 1)]
        assert prov[(z0, 3)] == [(z0, 0), (z0, 2)]

    def test_anchor_mask_kept_verbatim(self):
        vol = smooth_volume(3, 2)
        seed = disc_seed()
        masks, _ = propagate_temporal(vol, seed, FAST)
        assert np.array_equal(masks[(1, 0)], seed)
        assert masks[(1, 1)].shape == (48, 48)


class TestRun4d:
    def test_full_coverage_and_order(self):
        vol = smooth_volume(3, 2)
        result = run_4d(vol, disc_seed(), FAST)
        assert result.masks.labels.shape == (3, 2, 48, 48)
        expected = {(z, t) for z in range(3) for t in range(2)}
        assert set(result.order) == expected
        assert len(result.order) == len(expected)
        assert result.order[0] == (1, 0)
        assert set(result.provenance) == expected

    def test_anchor_seed_verbatim(self):
        vol = smooth_volume(3, 2)
        seed = disc_seed()
        result = run_4d(vol, seed, FAST)
        assert np.array_equal(result.masks.labels[1, 0], seed)

    def test_requires_t0_zero(self):
        vol = smooth_volume(3, 2)
        with pytest.raises(SchedulingError):
            run_4d(vol, disc_seed(), PropagationConfig(t0=1, scales=(4,)))

    def test_deterministic(self):
        vol = smooth_volume(3, 2)
        a = run_4d(vol, disc_seed(), FAST)
        b = run_4d(vol, disc_seed(), FAST)
        assert np.array_equal(a.masks.labels, b.masks.labels)

    def test_large_k_is_clamped(self):
        vol = smooth_volume(3, 2)
        cfg = PropagationConfig(patch=6, k=500, scales=(4,))
        result = run_4d(vol, disc_seed(), cfg)
        assert result.masks.labels.shape == (3, 2, 48, 48)


class TestContinuityModes:
    def test_both_gives_apex_history(self):
        vol = smooth_volume(3, 3)
        result = run_4d(vol, disc_seed(), FAST)
        # apex slice 2 at phase 2: anchor, adjacent slice, own history
        assert result.provenance[(2, 2)] == [(1, 0), (1, 2), (2, 1)]
        assert result.provenance[(2, 0)] == [(1, 0)]
        # basal banks never exceed two frames
        assert result.provenance[(0, 2)] == [(1, 0), (1, 2)]

    def test_apex_t_max_bounds_bank(self):
        vol = smooth_volume(3, 5)
        cfg = PropagationConfig(patch=6, k=2, scales=(4,), apex_t_max=4)
        result = run_4d(vol, disc_seed(), cfg)
        assert result.provenance[(2, 4)] == [(1, 0), (1, 4), (2, 3), (2, 2)]
        for (z, t), prov in result.provenance.items():
            part_cap = 4 if z == 2 else 2
            assert len(prov) <= part_cap

    def test_spatial_only_drops_history(self):
        vol = smooth_volume(3, 3)
        cfg = PropagationConfig(patch=6, k=2, scales=(4,),
                                continuity_mode="spatial-only")
        result = run_4d(vol, disc_seed(), cfg)
        assert result.provenance[(2, 2)] == [(1, 0), (1, 2)]
        for prov in result.provenance.values():
            assert len(prov) <= 2

    def test_temporal_only_chains_each_slice(self):
        vol = smooth_volume(3, 3)
        cfg = PropagationConfig(patch=6, k=2, scales=(4,),
                                continuity_mode="temporal-only")
        result = run_4d(vol, disc_seed(), cfg)
        # one spatial sweep at t0
        assert result.provenance[(0, 0)] == [(1, 0)]
        assert result.provenance[(2, 0)] == [(1, 0)]
        # then every slice advances on its own frames only
        for z in range(3):
            assert result.provenance[(z, 1)] == [(z, 0)]
            assert result.provenance[(z, 2)] == [(z, 0), (z, 1)]


class TestPropagateZ:
    def test_anchor_phase_pass(self):
        vol = smooth_volume(3, 2)
        seed = disc_seed()
        masks, prov = propagate_z(vol, 0, "apex", {(1, 0): seed}, FAST)
        assert set(masks) == {(2, 0)}
        assert prov[(2, 0)] == [(1, 0)]
        assert masks[(2, 0)].dtype == np.uint8

    def test_later_phase_needs_apex_history(self):
        vol = smooth_volume(3, 2)
        seed = disc_seed()
        temporal, _ = propagate_temporal(vol, seed, FAST)
        prior = {(1, 0): seed, (1, 1): temporal[(1, 1)]}
        # continuity "both" wants (2, 0) in the apex bank, so it must be given
        with pytest.raises(SchedulingError):
            propagate_z(vol, 1, "apex", prior, FAST)
        masks0, _ = propagate_z(vol, 0, "apex", {(1, 0): seed}, FAST)
        prior[(2, 0)] = masks0[(2, 0)]
        masks, prov = propagate_z(vol, 1, "apex", prior, FAST)
        assert prov[(2, 1)] == [(1, 0), (1, 1), (2, 0)]

    def test_spatial_only_pass_skips_history(self):
        vol = smooth_volume(3, 2)
        seed = disc_seed()
        cfg = PropagationConfig(patch=6, k=2, scales=(4,),
                                continuity_mode="spatial-only")
        temporal, _ = propagate_temporal(vol, seed, cfg)
        prior = {(1, 0): seed, (1, 1): temporal[(1, 1)]}
        masks, prov = propagate_z(vol, 1, "apex", prior, cfg)
        assert prov[(2, 1)] == [(1, 0), (1, 1)]

    def test_missing_anchor_rejected(self):
        vol = smooth_volume(3, 2)
        with pytest.raises(SchedulingError):
            propagate_z(vol, 1, "apex", {(1, 1): disc_seed()}, FAST)

    def test_direction_validated(self):
        vol = smooth_volume(3, 2)
        engine = PropagationEngine(vol, FAST)
        engine.seed_anchor(disc_seed())
        with pytest.raises(ParameterError):
            engine.run_z_pass(0, "sideways", allow_apex_history=True)

    def test_matches_run_4d_on_anchor_phase(self):
        # passes at t0 depend only on the exact one-hot seed, so the module
        # function must reproduce the full scheduler frame for frame
        vol = smooth_volume(3, 2)
        seed = disc_seed()
        full = run_4d(vol, seed, FAST)
        masks_b, _ = propagate_z(vol, 0, "base", {(1, 0): seed}, FAST)
        masks_a, _ = propagate_z(vol, 0, "apex", {(1, 0): seed}, FAST)
        assert np.array_equal(masks_b[(0, 0)], full.masks.labels[0, 0])
        assert np.array_equal(masks_a[(2, 0)], full.masks.labels[2, 0])
