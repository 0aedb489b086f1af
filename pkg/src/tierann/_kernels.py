"""Compiled inner loops: row distances, best-first graph search, graph build.

All loops run in a fixed order so results are bit-identical run to run.
Heaps order entries by (distance, index), which makes ties break by index.
"""

import numpy as np
from numba import njit

L2, COS, NIP = 0, 1, 2


@njit(cache=True, inline="always")
def _dist(a, b, metric):
    if metric == L2:
        s = 0.0
        for j in range(a.shape[0]):
            t = np.float64(a[j]) - np.float64(b[j])
            s += t * t
        return np.float32(s)
    dot = 0.0
    if metric == NIP:
        for j in range(a.shape[0]):
            dot += np.float64(a[j]) * np.float64(b[j])
        return np.float32(-dot)
    na = 0.0
    nb = 0.0
    for j in range(a.shape[0]):
        dot += np.float64(a[j]) * np.float64(b[j])
        na += np.float64(a[j]) * np.float64(a[j])
        nb += np.float64(b[j]) * np.float64(b[j])
    if na == 0.0 or nb == 0.0:
        return np.float32(1.0)
    return np.float32(1.0 - dot / (np.sqrt(na) * np.sqrt(nb)))


@njit(cache=True, nogil=True)
def row_distances(rows, q, metric):
    out = np.empty(rows.shape[0], dtype=np.float32)
    for i in range(rows.shape[0]):
        out[i] = _dist(rows[i], q, metric)
    return out


@njit(cache=True, nogil=True)
def gather_distances(vectors, idx, q, metric):
    out = np.empty(idx.shape[0], dtype=np.float32)
    for i in range(idx.shape[0]):
        out[i] = _dist(vectors[idx[i]], q, metric)
    return out


# -- binary heaps over parallel (dist, idx) arrays --------------------------

@njit(cache=True, inline="always")
def _lt(d1, i1, d2, i2):
    return d1 < d2 or (d1 == d2 and i1 < i2)


@njit(cache=True, nogil=True)
def _push(hd, hi, size, d, i, maxheap):
    pos = size
    hd[pos] = d
    hi[pos] = i
    while pos > 0:
        parent = (pos - 1) >> 1
        if maxheap:
            swap = _lt(hd[parent], hi[parent], hd[pos], hi[pos])
        else:
            swap = _lt(hd[pos], hi[pos], hd[parent], hi[parent])
        if not swap:
            break
        hd[pos], hd[parent] = hd[parent], hd[pos]
        hi[pos], hi[parent] = hi[parent], hi[pos]
        pos = parent
    return size + 1


@njit(cache=True, nogil=True)
def _pop(hd, hi, size, maxheap):
    size -= 1
    hd[0] = hd[size]
    hi[0] = hi[size]
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= size:
            break
        best = left
        right = left + 1
        if right < size:
            if maxheap:
                if _lt(hd[left], hi[left], hd[right], hi[right]):
                    best = right
            elif _lt(hd[right], hi[right], hd[left], hi[left]):
                best = right
        if maxheap:
            swap = _lt(hd[pos], hi[pos], hd[best], hi[best])
        else:
            swap = _lt(hd[best], hi[best], hd[pos], hi[pos])
        if not swap:
            break
        hd[pos], hd[best] = hd[best], hd[pos]
        hi[pos], hi[best] = hi[best], hi[pos]
        pos = best
    return size


@njit(cache=True, nogil=True)
def beam_search(vectors, adj, deg, entry, q, beam, metric, visited, stamp, trace):
    """Best-first search with a result pool of width ``beam``.

    Returns (indices, distances) ascending, the number of distance
    computations, the number of expansions, and, when ``trace`` has room,
    the expansion order written into it.
    """
    cap = 4 * beam + adj.shape[1] + 1
    cd = np.empty(cap, dtype=np.float32)
    ci = np.empty(cap, dtype=np.int64)
    rd = np.empty(beam + 1, dtype=np.float32)
    ri = np.empty(beam + 1, dtype=np.int64)
    nc = 0
    nr = 0
    d0 = _dist(vectors[entry], q, metric)
    visited[entry] = stamp
    ncomp = 1
    nexp = 0
    nc = _push(cd, ci, nc, d0, entry, False)
    nr = _push(rd, ri, nr, d0, entry, True)
    while nc > 0:
        d = cd[0]
        u = ci[0]
        if nr >= beam and _lt(rd[0], ri[0], d, u):
            break
        nc = _pop(cd, ci, nc, False)
        if nexp < trace.shape[0]:
            trace[nexp] = u
        nexp += 1
        for t in range(deg[u]):
            v = adj[u, t]
            if visited[v] == stamp:
                continue
            visited[v] = stamp
            dv = _dist(vectors[v], q, metric)
            ncomp += 1
            if nr < beam or _lt(dv, v, rd[0], ri[0]):
                if nc == cd.shape[0]:
                    cd2 = np.empty(2 * nc, dtype=np.float32)
                    ci2 = np.empty(2 * nc, dtype=np.int64)
                    cd2[:nc] = cd
                    ci2[:nc] = ci
                    cd = cd2
                    ci = ci2
                nc = _push(cd, ci, nc, dv, v, False)
                nr = _push(rd, ri, nr, dv, v, True)
                if nr > beam:
                    nr = _pop(rd, ri, nr, True)
    out_i = np.empty(nr, dtype=np.int64)
    out_d = np.empty(nr, dtype=np.float32)
    for j in range(nr - 1, -1, -1):
        out_i[j] = ri[0]
        out_d[j] = rd[0]
        nr = _pop(rd, ri, nr, True)
    return out_i, out_d, ncomp, nexp


@njit(cache=True, nogil=True)
def _prune(vectors, base, cand_i, cand_d, R, metric, out):
    """Keep candidate c unless a kept b satisfies dist(b, c) < dist(base, c)."""
    kept = 0
    for a in range(cand_i.shape[0]):
        c = cand_i[a]
        if c == base:
            continue
        ok = True
        for b in range(kept):
            if _dist(vectors[out[b]], vectors[c], metric) < cand_d[a]:
                ok = False
                break
        if ok:
            out[kept] = c
            kept += 1
            if kept >= R:
                break
    return kept


@njit(cache=True, nogil=True)
def _sorted_pairs(idx, d):
    # sort by index first so the stable sort by distance breaks ties by index
    o1 = np.argsort(idx, kind="mergesort")
    idx = idx[o1]
    d = d[o1]
    o2 = np.argsort(d, kind="mergesort")
    return idx[o2], d[o2]


@njit(cache=True, nogil=True)
def build_graph(vectors, order, R, beam, metric):
    n = vectors.shape[0]
    adj = np.full((n, R), -1, dtype=np.int64)
    deg = np.zeros(n, dtype=np.int64)
    visited = np.zeros(n, dtype=np.int64)
    no_trace = np.empty(0, dtype=np.int64)
    entry = order[0]
    buf = np.empty(R, dtype=np.int64)
    for step in range(1, n):
        u = order[step]
        res_i, res_d, _, _ = beam_search(vectors, adj, deg, entry, vectors[u], beam,
                                         metric, visited, step, no_trace)
        kept = _prune(vectors, u, res_i, res_d, R, metric, buf)
        for t in range(kept):
            adj[u, t] = buf[t]
        deg[u] = kept
        for t in range(kept):
            v = buf[t]
            if deg[v] < R:
                adj[v, deg[v]] = u
                deg[v] += 1
                continue
            cand = np.empty(R + 1, dtype=np.int64)
            cand[:R] = adj[v]
            cand[R] = u
            cd = np.empty(R + 1, dtype=np.float32)
            for j in range(R + 1):
                cd[j] = _dist(vectors[cand[j]], vectors[v], metric)
            ci, cd = _sorted_pairs(cand, cd)
            nb = np.empty(R, dtype=np.int64)
            kv = _prune(vectors, v, ci, cd, R, metric, nb)
            adj[v, :] = -1
            adj[v, :kv] = nb[:kv]
            deg[v] = kv
    return adj, deg
