"""Numba kernels for the sphere BVH: build and batched point queries.

The tree lives in flat arrays so the kernels stay allocation-free. All
floating-point math is strict IEEE (no fastmath) so results stay bitwise
deterministic and comparable with the numpy brute-force oracle.
"""

from __future__ import annotations

import numpy as np
from numba import njit

LEAF_SIZE = 4
MAX_STACK = 256


@njit(cache=True, nogil=True)
def build_bvh(lo, hi, centroids):
    """Median-split BVH over primitive AABBs (lo[i], hi[i]).

    Returns (node_min, node_max, left, right, first, count, order, node_count).
    Internal nodes have left/right child indices and count == 0; leaves have
    count > 0 and cover order[first : first + count].
    """
    n = lo.shape[0]
    max_nodes = 4 * n + 1
    node_min = np.empty((max_nodes, 3), dtype=np.float64)
    node_max = np.empty((max_nodes, 3), dtype=np.float64)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    first = np.zeros(max_nodes, dtype=np.int64)
    count = np.zeros(max_nodes, dtype=np.int64)
    order = np.arange(n)

    # Work stack of (node, range_first, range_count).
    stack = np.empty((MAX_STACK, 3), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    top = 1
    node_count = 1

    while top > 0:
        top -= 1
        node = stack[top, 0]
        lo_i = stack[top, 1]
        cnt = stack[top, 2]

        for d in range(3):
            mn = np.inf
            mx = -np.inf
            for k in range(lo_i, lo_i + cnt):
                p = order[k]
                if lo[p, d] < mn:
                    mn = lo[p, d]
                if hi[p, d] > mx:
                    mx = hi[p, d]
            node_min[node, d] = mn
            node_max[node, d] = mx

        if cnt <= LEAF_SIZE:
            first[node] = lo_i
            count[node] = cnt
            continue

        # Longest axis of the centroid extent.
        axis = 0
        best = -1.0
        for d in range(3):
            cmn = np.inf
            cmx = -np.inf
            for k in range(lo_i, lo_i + cnt):
                c = centroids[order[k], d]
                if c < cmn:
                    cmn = c
                if c > cmx:
                    cmx = c
            if cmx - cmn > best:
                best = cmx - cmn
                axis = d

        # Median split: sort the subrange by centroid along the axis.
        keys = np.empty(cnt, dtype=np.float64)
        for k in range(cnt):
            keys[k] = centroids[order[lo_i + k], axis]
        perm = np.argsort(keys, kind="mergesort")
        tmp = np.empty(cnt, dtype=np.int64)
        for k in range(cnt):
            tmp[k] = order[lo_i + perm[k]]
        for k in range(cnt):
            order[lo_i + k] = tmp[k]
        half = cnt // 2

        lchild = node_count
        rchild = node_count + 1
        node_count += 2
        left[node] = lchild
        right[node] = rchild
        stack[top, 0] = lchild
        stack[top, 1] = lo_i
        stack[top, 2] = half
        top += 1
        stack[top, 0] = rchild
        stack[top, 1] = lo_i + half
        stack[top, 2] = cnt - half
        top += 1

    return (node_min[:node_count].copy(), node_max[:node_count].copy(),
            left[:node_count].copy(), right[:node_count].copy(),
            first[:node_count].copy(), count[:node_count].copy(),
            order, node_count)


@njit(cache=True, nogil=True)
def query_points(node_min, node_max, left, right, first, count, order,
                 means, radii_sq, xs, k, out_idx, out_d2, out_total):
    """k nearest containing spheres for each query point.

    A sphere is a candidate iff ||x - mean||^2 <= radius^2. Candidates are
    kept in a sorted buffer ordered by (squared distance, index), so ties
    break toward the lower index. out_total[q] counts every containing
    sphere, including those pushed out of the buffer.
    """
    stack = np.empty(MAX_STACK, dtype=np.int64)
    for q in range(xs.shape[0]):
        x0 = xs[q, 0]
        x1 = xs[q, 1]
        x2 = xs[q, 2]
        found = 0
        total = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if (x0 < node_min[node, 0] or x0 > node_max[node, 0]
                    or x1 < node_min[node, 1] or x1 > node_max[node, 1]
                    or x2 < node_min[node, 2] or x2 > node_max[node, 2]):
                continue
            if count[node] > 0:
                for s in range(first[node], first[node] + count[node]):
                    p = order[s]
                    dx = x0 - means[p, 0]
                    dy = x1 - means[p, 1]
                    dz = x2 - means[p, 2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 <= radii_sq[p]:
                        total += 1
                        # Insertion into the sorted (d2, index) buffer.
                        if found < k:
                            pos = found
                            found += 1
                        elif (d2 < out_d2[q, k - 1]
                              or (d2 == out_d2[q, k - 1]
                                  and p < out_idx[q, k - 1])):
                            pos = k - 1
                        else:
                            continue
                        while pos > 0 and (
                                out_d2[q, pos - 1] > d2
                                or (out_d2[q, pos - 1] == d2
                                    and out_idx[q, pos - 1] > p)):
                            out_d2[q, pos] = out_d2[q, pos - 1]
                            out_idx[q, pos] = out_idx[q, pos - 1]
                            pos -= 1
                        out_d2[q, pos] = d2
                        out_idx[q, pos] = p
            else:
                stack[top] = left[node]
                top += 1
                stack[top] = right[node]
                top += 1
        out_total[q] = total
        for s in range(found, k):
            out_idx[q, s] = -1
            out_d2[q, s] = np.inf
