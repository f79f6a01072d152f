"""Patch-level memory matching.

The matcher compares a query feature map against a bank of memory feature
maps in two stages. Stage one scores whole patches against each other and
keeps the top K memory patches per query patch; stage two runs a softmax
pixel matching only inside the selected patches and reads out memory values
with the resulting weights. Folded back together this gives a value map for
the query frame at a fraction of the cost of all-pairs pixel matching, which
``dense_readout`` still provides as the reference path.

Similarity is the negated squared Euclidean distance, so identical vectors
score 0 and everything else is negative. Softmax rows are stabilized by
subtracting the row maximum.

``OpCounter`` tracks exact comparison counts: a patch affinity over T memory
frames of N patches adds T*N^2 patch pairs, pixel matching adds
N*K*(P^2)^2 pixel pairs, and the dense path adds T*(H*W)^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError, StateError
from .grids import FeatureGrid
from .patcher import PatchGrid, coverage_map, fold, make_layout, scatter_add, unfold

# Fault injection hook used only by the verification harness: when set, the
# pixel-matching logits of the patch path are sign-flipped, which must make
# the dense-oracle equivalence suite fail.
_FAULT_FLIP_PIXEL_SIMILARITY = False


def _set_pixel_similarity_fault(enabled):
    global _FAULT_FLIP_PIXEL_SIMILARITY
    _FAULT_FLIP_PIXEL_SIMILARITY = bool(enabled)


@dataclass
class OpCounter:
    """Exact counts of pairwise comparisons performed."""

    patch_pairs: int = 0
    pixel_pairs: int = 0

    def merge(self, other):
        """Fold another counter into this one (order-independent)."""
        self.patch_pairs += other.patch_pairs
        self.pixel_pairs += other.pixel_pairs
        return self


@dataclass
class AffinityMatrix:
    """Patch-level scores of shape (N, T*N); higher means more similar."""

    scores: np.ndarray
    n_query: int
    n_memory_frames: int


@dataclass
class TopKIndex:
    """Per query patch, the flat indices of its K best memory patches.

    ids[i] is sorted by descending score; ties go to the lower memory index.
    """

    ids: np.ndarray
    k: int


def similarity(a, b):
    """Negated squared Euclidean distance between two flat vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(-(d * d).sum())


def _neg_sqdist(a, b):
    """Pairwise -||a_i - b_j||^2 via the Gram expansion, (n, m) for (n,d),(m,d)."""
    aa = (a * a).sum(axis=1)
    bb = (b * b).sum(axis=1)
    return 2.0 * (a @ b.T) - aa[:, None] - bb[None, :]


def _softmax_rows(logits):
    """Row softmax over the last axis, stabilized by the row max."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def patch_affinity(query, memory, counter=None):
    """Score every query patch against every memory patch.

    Args:
        query: PatchGrid of the query frame (N patches).
        memory: list of PatchGrid, one per memory frame, all sharing the
            query's layout and channel count.
        counter: optional OpCounter; receives T*N^2 patch pairs.

    Returns:
        AffinityMatrix with scores (N, T*N); column t*N+j is memory frame t,
        patch j.
    """
    if not memory:
        raise ParameterError("memory must contain at least one frame")
    n = query.n_patches
    c = query.channels
    p = query.layout.patch
    flat_q = query.data.reshape(n, c * p * p)
    blocks = []
    for m in memory:
        if m.n_patches != n or m.channels != c or m.layout.patch != p:
            raise DimensionError(
                "memory patch grid does not match the query layout")
        blocks.append(m.data.reshape(n, c * p * p))
    flat_m = np.concatenate(blocks, axis=0)
    scores = _neg_sqdist(flat_q, flat_m)
    if counter is not None:
        counter.patch_pairs += len(memory) * n * n
    return AffinityMatrix(scores=scores, n_query=n, n_memory_frames=len(memory))


def topk_select(affinity, k):
    """Pick the K highest-scoring memory patches per query row.

    Ties are broken toward the lower memory index; rows come back sorted by
    descending score. k must lie in 1..T*N.
    """
    scores = affinity.scores
    total = scores.shape[1]
    if k < 1 or k > total:
        raise ParameterError(f"k={k} outside valid range 1..{total}")
    # stable argsort on negated scores keeps the lower index first on ties
    order = np.argsort(-scores, axis=1, kind="stable")
    return TopKIndex(ids=order[:, :k].astype(np.intp), k=k)


def pixel_match_weights(q_patch, k_patches, counter=None):
    """Softmax pixel matching inside one query patch.

    Args:
        q_patch: (C, P, P) query patch.
        k_patches: (K, C, P, P) selected memory key patches.
        counter: optional OpCounter; receives P^2 * K * P^2 pixel pairs.

    Returns:
        (P^2, K*P^2) weight matrix; each row is a distribution over all
        pixels of the K selected patches.
    """
    q_patch = np.asarray(q_patch, dtype=np.float64)
    k_patches = np.asarray(k_patches, dtype=np.float64)
    if q_patch.ndim != 3 or k_patches.ndim != 4:
        raise DimensionError("expected (C,P,P) query and (K,C,P,P) memory patches")
    c, p, p2 = q_patch.shape
    if p != p2 or k_patches.shape[1:] != (c, p, p):
        raise DimensionError(
            f"patch shapes disagree: {q_patch.shape} vs {k_patches.shape}")
    kk = k_patches.shape[0]
    q_pix = q_patch.reshape(c, p * p).T
    m_pix = k_patches.transpose(0, 2, 3, 1).reshape(kk * p * p, c)
    logits = _neg_sqdist(q_pix, m_pix)
    if _FAULT_FLIP_PIXEL_SIMILARITY:
        logits = -logits
    if counter is not None:
        counter.pixel_pairs += (p * p) * (kk * p * p)
    return _softmax_rows(logits)


def readout(weights, v_patches):
    """Weighted sum of memory value pixels for one query patch.

    Args:
        weights: (P^2, K*P^2) matching weights.
        v_patches: (K, C_v, P, P) selected memory value patches.

    Returns:
        (C_v, P, P) readout patch.
    """
    weights = np.asarray(weights, dtype=np.float64)
    v_patches = np.asarray(v_patches, dtype=np.float64)
    kk, cv, p, _ = v_patches.shape
    if weights.shape != (p * p, kk * p * p):
        raise DimensionError(
            f"weights shape {weights.shape} does not match values {v_patches.shape}")
    v_pix = v_patches.transpose(0, 2, 3, 1).reshape(kk * p * p, cv)
    out = weights @ v_pix
    return out.T.reshape(cv, p, p)


@dataclass
class PlmmResult:
    """Output of a patch-matching forward pass.

    ``cache`` is populated only when the pass was run with keep_cache=True
    and is required by plmm_backward.
    """

    readout: FeatureGrid
    topk: TopKIndex
    cache: dict | None = None


def plmm_forward(q_key, mem_keys, mem_values, patch, k,
                 counter=None, topk_override=None, keep_cache=False):
    """Full patch-level matching: affinity, top-K, pixel softmax, readout, fold.

    Args:
        q_key: FeatureGrid (C_k, H, W) of query keys.
        mem_keys: list of FeatureGrid, memory keys, same dims as the query.
        mem_values: list of FeatureGrid, memory values, same spatial dims,
            any channel count; parallel to mem_keys.
        patch: patch size P (even, dims must be tileable).
        k: memory patches kept per query patch.
        counter: optional OpCounter.
        topk_override: reuse a TopKIndex from another scale instead of
            computing affinity here (no patch pairs are counted then).
        keep_cache: retain intermediates so plmm_backward can run.

    Returns:
        PlmmResult with the folded (C_v, H, W) readout and the TopKIndex used.
    """
    if len(mem_keys) != len(mem_values) or not mem_keys:
        raise ParameterError("memory keys and values must be parallel, non-empty lists")
    layout = make_layout(q_key.height, q_key.width, patch)
    n = layout.n_patches
    t = len(mem_keys)
    c_k = q_key.channels
    c_v = mem_values[0].channels
    p = patch

    q_pg = unfold(q_key, layout)
    key_pgs = []
    for mk in mem_keys:
        if (mk.height, mk.width, mk.channels) != (q_key.height, q_key.width, c_k):
            raise DimensionError("memory key dims do not match the query key")
        key_pgs.append(unfold(mk, layout))
    val_pix_blocks = []
    for mv in mem_values:
        if (mv.height, mv.width) != (q_key.height, q_key.width):
            raise DimensionError("memory value dims do not match the query key")
        if mv.channels != c_v:
            raise DimensionError("memory value channel counts disagree")
        vp = unfold(mv, layout)
        val_pix_blocks.append(vp.data.transpose(0, 2, 3, 1).reshape(n, p * p, c_v))

    if topk_override is not None:
        topk = topk_override
        if topk.ids.shape[0] != n:
            raise DimensionError(
                f"top-K table has {topk.ids.shape[0]} rows, layout expects {n}")
        if topk.ids.max() >= t * n or topk.ids.min() < 0:
            raise ParameterError("top-K table indexes outside this memory bank")
    else:
        aff = patch_affinity(q_pg, key_pgs, counter=counter)
        topk = topk_select(aff, k)
    kk = topk.k

    # pixel views: (T*N, P^2, C)
    key_pix = np.concatenate(
        [pg.data.transpose(0, 2, 3, 1).reshape(n, p * p, c_k) for pg in key_pgs], axis=0)
    val_pix = np.concatenate(val_pix_blocks, axis=0)

    ids = topk.ids
    m_sel = key_pix[ids].reshape(n, kk * p * p, c_k)
    v_sel = val_pix[ids].reshape(n, kk * p * p, c_v)
    q_pix = q_pg.data.transpose(0, 2, 3, 1).reshape(n, p * p, c_k)

    # batched -||q - m||^2 over all query patches at once
    qq = (q_pix * q_pix).sum(axis=2)
    mm = (m_sel * m_sel).sum(axis=2)
    logits = 2.0 * np.einsum("npc,nmc->npm", q_pix, m_sel) \
        - qq[:, :, None] - mm[:, None, :]
    if _FAULT_FLIP_PIXEL_SIMILARITY:
        logits = -logits
    weights = _softmax_rows(logits)
    if counter is not None:
        counter.pixel_pairs += n * kk * (p * p) * (p * p)

    ro_pix = np.einsum("npm,nmv->npv", weights, v_sel)
    ro_patches = PatchGrid(layout, ro_pix.transpose(0, 2, 1).reshape(n, c_v, p, p))
    out = fold(ro_patches)

    cache = None
    if keep_cache:
        cache = {
            "layout": layout,
            "ids": ids,
            "weights": weights,
            "q_pix": q_pix,
            "m_sel": m_sel,
            "v_sel": v_sel,
            "t": t,
            "c_k": c_k,
            "c_v": c_v,
        }
    return PlmmResult(readout=out, topk=topk, cache=cache)


def plmm_backward(result, upstream):
    """Exact gradients of the forward pass for a scalar loss.

    The top-K selection and the fold coverage counts are treated as
    constants; gradients flow through fold, readout, softmax, and the
    similarity logits.

    Args:
        result: PlmmResult from plmm_forward(..., keep_cache=True).
        upstream: (C_v, H, W) gradient of the loss w.r.t. the folded readout.

    Returns:
        (d_query_key, d_memory_keys, d_memory_values) where the first is a
        (C_k, H, W) array and the others are lists of per-frame arrays.
    """
    if result.cache is None:
        raise StateError("plmm_backward needs a forward pass run with keep_cache=True")
    cache = result.cache
    layout = cache["layout"]
    ids = cache["ids"]
    w = cache["weights"]          # (N, P^2, K*P^2)
    q_pix = cache["q_pix"]        # (N, P^2, C_k)
    m_sel = cache["m_sel"]        # (N, K*P^2, C_k)
    v_sel = cache["v_sel"]        # (N, K*P^2, C_v)
    t = cache["t"]
    c_k, c_v = cache["c_k"], cache["c_v"]
    n = layout.n_patches
    p = layout.patch
    kk = ids.shape[1]

    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (c_v, layout.map_h, layout.map_w):
        raise DimensionError(
            f"upstream shape {upstream.shape} does not match the readout "
            f"({c_v}, {layout.map_h}, {layout.map_w})")

    # fold adjoint: divide by coverage, then gather patches
    cov = coverage_map(layout).astype(np.float64)
    g_grid = FeatureGrid(upstream / cov[None, :, :])
    g_pg = unfold(g_grid, layout)
    g = g_pg.data.transpose(0, 2, 3, 1).reshape(n, p * p, c_v)

    # readout adjoints
    d_v_sel = np.einsum("npv,npm->nmv", g, w)
    s = np.einsum("npv,nmv->npm", g, v_sel)

    # softmax adjoint
    ws = (w * s).sum(axis=2, keepdims=True)
    d_logit = w * (s - ws)

    # similarity adjoint: logits[i,j] = -||q_i - m_j||^2
    row = d_logit.sum(axis=2)
    col = d_logit.sum(axis=1)
    d_q_pix = -2.0 * (row[:, :, None] * q_pix
                      - np.einsum("npm,nmc->npc", d_logit, m_sel))
    d_m_sel = 2.0 * (np.einsum("npm,npc->nmc", d_logit, q_pix)
                     - col[:, :, None] * m_sel)

    # scatter the selected-patch gradients back to per-frame patch buffers
    d_key_buf = np.zeros((t * n, p * p, c_k), dtype=np.float64)
    d_val_buf = np.zeros((t * n, p * p, c_v), dtype=np.float64)
    np.add.at(d_key_buf, ids.ravel(), d_m_sel.reshape(n * kk, p * p, c_k))
    np.add.at(d_val_buf, ids.ravel(), d_v_sel.reshape(n * kk, p * p, c_v))

    def _to_grid(buf, channels):
        grads = []
        for ti in range(t):
            block = buf[ti * n:(ti + 1) * n]
            pg = PatchGrid(layout, block.transpose(0, 2, 1).reshape(n, channels, p, p))
            grads.append(scatter_add(pg))
        return grads

    d_mem_keys = _to_grid(d_key_buf, c_k)
    d_mem_values = _to_grid(d_val_buf, c_v)

    dq_pg = PatchGrid(layout, d_q_pix.transpose(0, 2, 1).reshape(n, c_k, p, p))
    d_query_key = scatter_add(dq_pg)
    return d_query_key, d_mem_keys, d_mem_values


def dense_readout(q_key, mem_keys, mem_values, counter=None, chunk=2048):
    """All-pairs pixel matching, the reference path.

    Every query pixel is matched by softmax against every memory pixel of
    every frame; no patches, no top-K. Quadratic in H*W, so query rows are
    processed in chunks to bound memory.
    """
    if len(mem_keys) != len(mem_values) or not mem_keys:
        raise ParameterError("memory keys and values must be parallel, non-empty lists")
    h, w, c_k = q_key.height, q_key.width, q_key.channels
    c_v = mem_values[0].channels
    for mk, mv in zip(mem_keys, mem_values):
        if (mk.height, mk.width, mk.channels) != (h, w, c_k):
            raise DimensionError("memory key dims do not match the query key")
        if (mv.height, mv.width) != (h, w) or mv.channels != c_v:
            raise DimensionError("memory value dims are inconsistent")
    t = len(mem_keys)
    hw = h * w
    q_pix = q_key.data.reshape(c_k, hw).T
    m_pix = np.concatenate([mk.data.reshape(c_k, hw).T for mk in mem_keys], axis=0)
    v_pix = np.concatenate([mv.data.reshape(c_v, hw).T for mv in mem_values], axis=0)

    out = np.empty((hw, c_v), dtype=np.float64)
    for start in range(0, hw, chunk):
        stop = min(start + chunk, hw)
        logits = _neg_sqdist(q_pix[start:stop], m_pix)
        out[start:stop] = _softmax_rows(logits) @ v_pix
    if counter is not None:
        counter.pixel_pairs += t * hw * hw
    return FeatureGrid(out.T.reshape(c_v, h, w))
