"""Hot inner loops: pairwise distances, batch-hard mining and ranking hits.

Every kernel exists twice: an explicit-loop version compiled with numba
``@njit`` and a vectorized numpy version. The loop versions are used when
numba imports cleanly and ``XSPEC_NO_NUMBA`` is unset (or ``0``); otherwise
the numpy versions are bound to the public names. Both are importable
directly (``*_loops`` / ``*_numpy``) so tests and the benchmark can compare
them.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("XSPEC_NO_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


def _jit(fn):
    if numba is None:  # pragma: no cover
        return fn
    return numba.njit(cache=True)(fn)


# ---------------------------------------------------------------------------
# loop kernels (numba)
# ---------------------------------------------------------------------------

@_jit
def sqdist_loops(x, y):
    n, d = x.shape
    m = y.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                t = x[i, k] - y[j, k]
                s += t * t
            out[i, j] = s
    return out


@_jit
def pdist_backward_loops(x, dist, g):
    n, d = x.shape
    dx = np.zeros((n, d))
    for i in range(n):
        for j in range(n):
            dij = dist[i, j]
            if dij > 0.0:
                c = (g[i, j] + g[j, i]) / dij
                for k in range(d):
                    dx[i, k] += c * (x[i, k] - x[j, k])
    return dx


@_jit
def hardest_pairs_loops(dist, labels):
    n = dist.shape[0]
    pos = np.empty(n, dtype=np.int64)
    neg = np.empty(n, dtype=np.int64)
    for a in range(n):
        best_p = -1.0
        best_n = np.inf
        ip = -1
        ineg = -1
        for j in range(n):
            if labels[j] == labels[a]:
                if dist[a, j] > best_p:
                    best_p = dist[a, j]
                    ip = j
            elif dist[a, j] < best_n:
                best_n = dist[a, j]
                ineg = j
        pos[a] = ip
        neg[a] = ineg
    return pos, neg


@_jit
def hits_loops(order, probe_ids, gallery_ids):
    q, g = order.shape
    hits = np.zeros((q, g), dtype=np.int8)
    for i in range(q):
        for r in range(g):
            if gallery_ids[order[i, r]] == probe_ids[i]:
                hits[i, r] = 1
    return hits


@_jit
def first_hit_loops(hits):
    q, g = hits.shape
    out = np.full(q, -1, dtype=np.int64)
    for i in range(q):
        for r in range(g):
            if hits[i, r]:
                out[i] = r
                break
    return out


@_jit
def average_precision_loops(hits):
    q, g = hits.shape
    ap = np.full(q, np.nan)
    for i in range(q):
        found = 0
        acc = 0.0
        for r in range(g):
            if hits[i, r]:
                found += 1
                acc += found / (r + 1.0)
        if found > 0:
            ap[i] = acc / found
    return ap


# ---------------------------------------------------------------------------
# numpy kernels
# ---------------------------------------------------------------------------

def sqdist_numpy(x, y):
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def pdist_backward_numpy(x, dist, g):
    sym = g + g.T
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(dist > 0.0, sym / dist, 0.0)
    # sum_j c_ij (x_i - x_j)
    return c.sum(axis=1)[:, None] * x - c @ x


def hardest_pairs_numpy(dist, labels):
    same = labels[:, None] == labels[None, :]
    pos = np.argmax(np.where(same, dist, -1.0), axis=1)
    neg = np.argmin(np.where(same, np.inf, dist), axis=1)
    neg = np.where(same.all(axis=1), -1, neg)
    return pos.astype(np.int64), neg.astype(np.int64)


def hits_numpy(order, probe_ids, gallery_ids):
    return (gallery_ids[order] == probe_ids[:, None]).astype(np.int8)


def first_hit_numpy(hits):
    has = hits.any(axis=1)
    return np.where(has, np.argmax(hits, axis=1), -1).astype(np.int64)


def average_precision_numpy(hits):
    h = hits.astype(np.float64)
    found = np.cumsum(h, axis=1)
    ranks = np.arange(1, h.shape[1] + 1, dtype=np.float64)
    n_rel = h.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ap = (found / ranks * h).sum(axis=1) / n_rel
    return np.where(n_rel > 0, ap, np.nan)


if USE_NUMBA:
    sqdist = sqdist_loops
    pdist_backward = pdist_backward_loops
    hardest_pairs = hardest_pairs_loops
    hits = hits_loops
    first_hit = first_hit_loops
    average_precision = average_precision_loops
else:
    sqdist = sqdist_numpy
    pdist_backward = pdist_backward_numpy
    hardest_pairs = hardest_pairs_numpy
    hits = hits_numpy
    first_hit = first_hit_numpy
    average_precision = average_precision_numpy
