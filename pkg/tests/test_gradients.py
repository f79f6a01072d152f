"""Analytic gradients of the patch-matching pass against finite differences.

The oracle re-derives every gradient numerically: perturb one input entry,
rerun the forward pass with the top-K selection frozen, and difference the
scalar loss sum(readout * upstream). Selection indices and coverage counts
are constants of the backward pass by contract.
"""

import numpy as np
import pytest

from patchmem.errors import StateError
from patchmem.grids import FeatureGrid
from patchmem.matcher import plmm_backward, plmm_forward
from patchmem.patcher import make_layout

STEP = 1e-3
TOL = 1e-4
CLAMP = 1e-8


def make_instance(rng, t, h=8, w=8, c_key=2, c_val=2):
    q = FeatureGrid(rng.standard_normal((c_key, h, w)))
    mk = [FeatureGrid(rng.standard_normal((c_key, h, w))) for _ in range(t)]
    mv = [FeatureGrid(rng.standard_normal((c_val, h, w))) for _ in range(t)]
    return q, mk, mv


def numeric_gradients(q, mk, mv, patch, k, upstream, step=STEP):
    """Central differences of the readout loss, selection frozen."""
    frozen = plmm_forward(q, mk, mv, patch, k).topk
    q_arr = q.data.copy()
    mk_arr = [m.data.copy() for m in mk]
    mv_arr = [m.data.copy() for m in mv]

    def loss():
        res = plmm_forward(FeatureGrid(q_arr),
                           [FeatureGrid(a) for a in mk_arr],
                           [FeatureGrid(a) for a in mv_arr],
                           patch, k, topk_override=frozen)
        return float(np.sum(res.readout.data * upstream))

    def grad_of(target):
        out = np.zeros_like(target)
        for idx in range(target.size):
            saved = target.flat[idx]
            target.flat[idx] = saved + step
            lp = loss()
            target.flat[idx] = saved - step
            lm = loss()
            target.flat[idx] = saved
            out.flat[idx] = (lp - lm) / (2 * step)
        return out

    return (frozen, grad_of(q_arr),
            [grad_of(a) for a in mk_arr],
            [grad_of(a) for a in mv_arr])


def rel_err(analytic, numeric):
    denom = max(float(np.abs(analytic).max()),
                float(np.abs(numeric).max()), CLAMP)
    return float(np.abs(analytic - numeric).max()) / denom


def analytic_gradients(q, mk, mv, patch, k, upstream, frozen):
    res = plmm_forward(q, mk, mv, patch, k, topk_override=frozen,
                       keep_cache=True)
    return plmm_backward(res, upstream)


class TestAgainstFiniteDifferences:
    def test_small_instances(self):
        rng = np.random.default_rng(51)
        worst = 0.0
        for i in range(6):
            t = 1 + i % 2
            q, mk, mv = make_instance(rng, t)
            upstream = rng.standard_normal((2, 8, 8))
            frozen, fd_q, fd_mk, fd_mv = numeric_gradients(
                q, mk, mv, patch=4, k=2, upstream=upstream)
            d_q, d_mk, d_mv = analytic_gradients(
                q, mk, mv, 4, 2, upstream, frozen)
            worst = max(worst, rel_err(d_q, fd_q))
            for a, f in zip(d_mk, fd_mk):
                worst = max(worst, rel_err(a, f))
            for a, f in zip(d_mv, fd_mv):
                worst = max(worst, rel_err(a, f))
        assert worst < TOL

    def test_single_patch_case(self):
        # P = H = W collapses fold to the identity, isolating the
        # softmax/similarity adjoints
        rng = np.random.default_rng(52)
        q, mk, mv = make_instance(rng, t=2, h=4, w=4)
        upstream = rng.standard_normal((2, 4, 4))
        frozen, fd_q, fd_mk, fd_mv = numeric_gradients(
            q, mk, mv, patch=4, k=2, upstream=upstream)
        d_q, d_mk, d_mv = analytic_gradients(q, mk, mv, 4, 2, upstream, frozen)
        assert rel_err(d_q, fd_q) < TOL
        for a, f in zip(d_mk, fd_mk):
            assert rel_err(a, f) < TOL
        for a, f in zip(d_mv, fd_mv):
            assert rel_err(a, f) < TOL


class TestStructuralProperties:
    def test_zero_upstream_gives_zero_gradients(self):
        rng = np.random.default_rng(53)
        q, mk, mv = make_instance(rng, t=2)
        res = plmm_forward(q, mk, mv, 4, 2, keep_cache=True)
        d_q, d_mk, d_mv = plmm_backward(res, np.zeros((2, 8, 8)))
        assert not d_q.any()
        assert not any(a.any() for a in d_mk)
        assert not any(a.any() for a in d_mv)

    def test_unselected_memory_pixels_get_zero_gradient(self):
        rng = np.random.default_rng(54)
        q, mk, mv = make_instance(rng, t=2)
        res = plmm_forward(q, mk, mv, 4, 2, keep_cache=True)
        upstream = rng.standard_normal((2, 8, 8))
        d_q, d_mk, d_mv = plmm_backward(res, upstream)

        layout = make_layout(8, 8, 4)
        n = layout.n_patches
        touched = [np.zeros((8, 8), dtype=bool) for _ in range(2)]
        for row in res.topk.ids:
            for flat in row:
                ti, mi = divmod(int(flat), n)
                oy, ox = layout.origins[mi]
                touched[ti][oy:oy + 4, ox:ox + 4] = True
        for ti in range(2):
            outside = ~touched[ti]
            assert not d_mk[ti][:, outside].any()
            assert not d_mv[ti][:, outside].any()

    def test_value_gradient_is_weight_scatter(self):
        # values enter linearly, so their gradient is exact even against a
        # one-sided numeric check with a large step
        rng = np.random.default_rng(55)
        q, mk, mv = make_instance(rng, t=1)
        upstream = rng.standard_normal((2, 8, 8))
        frozen, _, _, fd_mv = numeric_gradients(q, mk, mv, 4, 2, upstream,
                                                step=1e-1)
        _, _, d_mv = analytic_gradients(q, mk, mv, 4, 2, upstream, frozen)
        for a, f in zip(d_mv, fd_mv):
            assert np.allclose(a, f, atol=1e-9)

    def test_backward_requires_cache(self):
        rng = np.random.default_rng(56)
        q, mk, mv = make_instance(rng, t=1)
        res = plmm_forward(q, mk, mv, 4, 2)
        with pytest.raises(StateError):
            plmm_backward(res, np.zeros((2, 8, 8)))

    def test_upstream_shape_checked(self):
        rng = np.random.default_rng(57)
        q, mk, mv = make_instance(rng, t=1)
        res = plmm_forward(q, mk, mv, 4, 2, keep_cache=True)
        from patchmem.errors import DimensionError
        with pytest.raises(DimensionError):
            plmm_backward(res, np.zeros((2, 8, 7)))

    def test_gradient_shapes(self):
        rng = np.random.default_rng(58)
        q, mk, mv = make_instance(rng, t=2, c_key=3, c_val=4)
        res = plmm_forward(q, mk, mv, 4, 2, keep_cache=True)
        d_q, d_mk, d_mv = plmm_backward(res, rng.standard_normal((4, 8, 8)))
        assert d_q.shape == (3, 8, 8)
        assert all(a.shape == (3, 8, 8) for a in d_mk)
        assert all(a.shape == (4, 8, 8) for a in d_mv)
