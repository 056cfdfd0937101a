"""Compiled CART kernels (exact variance-reduction splits)."""

import numba as nb
import numpy as np

LEAF = -1


@nb.njit(cache=True)
def _splitmix(state):
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def _randbelow(state, k):
    return np.int64(_splitmix(state) % np.uint64(k))


@nb.njit(cache=True)
def best_split(X, y, idx, start, end, min_leaf, mtry, feats, state):
    """Best (feature, threshold) for rows ``idx[start:end]``.

    Features are visited in random order until ``mtry`` non-constant ones
    have been scored.  Ties in child SSE go to the lowest feature index,
    then the lowest threshold.  Returns feature -1 when no split is valid.
    """
    m = end - start
    p = X.shape[1]
    s_tot = 0.0
    for k in range(start, end):
        s_tot += y[idx[k]]
    mean = s_tot / m
    yy = np.empty(m)
    s1_tot = 0.0
    s2_tot = 0.0
    for k in range(m):
        d = y[idx[start + k]] - mean
        yy[k] = d
        s1_tot += d
        s2_tot += d * d
    tol = 1e-10 * s2_tot
    best_sse = np.inf
    best_f = -1
    best_t = 0.0
    v = np.empty(m)
    for j in range(p):
        feats[j] = j
    visited = 0
    i = 0
    while i < p and visited < mtry:
        r = i + _randbelow(state, p - i)
        tmp = feats[i]
        feats[i] = feats[r]
        feats[r] = tmp
        f = feats[i]
        i += 1
        vmin = np.inf
        vmax = -np.inf
        for k in range(m):
            x = X[idx[start + k], f]
            v[k] = x
            if x < vmin:
                vmin = x
            if x > vmax:
                vmax = x
        if not vmax > vmin:
            continue
        visited += 1
        order = np.argsort(v, kind="mergesort")
        s_l = 0.0
        s2_l = 0.0
        for t in range(m - 1):
            d = yy[order[t]]
            s_l += d
            s2_l += d * d
            n_l = t + 1
            n_r = m - n_l
            if n_l < min_leaf:
                continue
            if n_r < min_leaf:
                break
            lo = v[order[t]]
            hi = v[order[t + 1]]
            if not hi > lo:
                continue
            s_r = s1_tot - s_l
            sse = (s2_l - s_l * s_l / n_l) + ((s2_tot - s2_l) - s_r * s_r / n_r)
            thr = 0.5 * (lo + hi)
            if not thr < hi:
                thr = lo
            if sse < best_sse - tol:
                best_sse, best_f, best_t = sse, f, thr
            elif sse <= best_sse + tol and (f < best_f or (f == best_f and thr < best_t)):
                best_sse, best_f, best_t = sse, f, thr
    return best_f, best_t


@nb.njit(cache=True)
def build_tree(X, y, idx, max_depth, min_leaf, mtry, seed):
    """Grow one regression tree on rows ``idx`` (repeats allowed).

    ``max_depth < 0`` means unlimited.  Returns node arrays trimmed to the
    node count: feature, threshold, left, right, value, n_samples.
    """
    n = idx.shape[0]
    p = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, LEAF, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    n_samples = np.zeros(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    st_node = np.empty(cap, dtype=np.int64)
    work = idx.copy()
    buf = np.empty(n, dtype=work.dtype)
    feats = np.empty(p, dtype=np.int64)
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)

    node_count = 1
    sp = 0
    st_start[0], st_end[0], st_depth[0], st_node[0] = 0, n, 0, 0
    sp = 1
    while sp > 0:
        sp -= 1
        start, end, depth, node = st_start[sp], st_end[sp], st_depth[sp], st_node[sp]
        m = end - start
        s = 0.0
        ymin = np.inf
        ymax = -np.inf
        for k in range(start, end):
            t = y[work[k]]
            s += t
            if t < ymin:
                ymin = t
            if t > ymax:
                ymax = t
        value[node] = s / m
        n_samples[node] = m
        if (max_depth >= 0 and depth >= max_depth) or m < 2 * min_leaf or not ymax > ymin:
            continue
        f, thr = best_split(X, y, work, start, end, min_leaf, mtry, feats, state)
        if f < 0:
            continue
        n_left = 0
        n_right = 0
        for k in range(start, end):
            r = work[k]
            if X[r, f] <= thr:
                work[start + n_left] = r
                n_left += 1
            else:
                buf[n_right] = r
                n_right += 1
        for k in range(n_right):
            work[start + n_left + k] = buf[k]
        feature[node] = f
        threshold[node] = thr
        lc = node_count
        rc = node_count + 1
        node_count += 2
        left[node] = lc
        right[node] = rc
        mid = start + n_left
        st_start[sp], st_end[sp], st_depth[sp], st_node[sp] = mid, end, depth + 1, rc
        sp += 1
        st_start[sp], st_end[sp], st_depth[sp], st_node[sp] = start, mid, depth + 1, lc
        sp += 1
    k = node_count
    return (feature[:k].copy(), threshold[:k].copy(), left[:k].copy(), right[:k].copy(),
            value[:k].copy(), n_samples[:k].copy())


@nb.njit(cache=True)
def predict_packed(X, feature, threshold, left, right, value, offsets, out):
    """Mean over trees of leaf values; trees are packed back to back.

    Child indices are local to each tree; ``offsets[t]`` is tree t's first
    node.
    """
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    for i in range(n):
        acc = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while feature[base + node] != LEAF:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            acc += value[base + node]
        out[i] = acc / n_trees
    return out
