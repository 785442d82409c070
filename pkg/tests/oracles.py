"""Independent reference implementations used by the test-suite.

Nothing here imports the code under test beyond the Tensor wrapper needed
to call it: the oracles are plain loops, explicit formulas, and a Jacobi
eigensolver.
"""

from __future__ import annotations

import math

import numpy as np


def central_difference(fn, arrays, h=1e-5):
    """Numerical gradient of scalar ``fn(*arrays)`` w.r.t. every array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            fp = fn(*arrays)
            arr[idx] = old - h
            fm = fn(*arrays)
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gem_direct(row, p, eps=1e-6):
    vals = [max(v, eps) ** p for v in row]
    return (sum(vals) / len(vals)) ** (1.0 / p)


def attention_dense(x, wq, wk, wv):
    """Row-by-row softmax attention with residual, in explicit loops."""
    k, e = x.shape
    q = x @ wq
    kk = x @ wk
    v = x @ wv
    out = np.zeros_like(x)
    for i in range(k):
        logits = [float(q[i] @ kk[j]) / math.sqrt(e) for j in range(k)]
        mx = max(logits)
        ws = [math.exp(l - mx) for l in logits]
        z = sum(ws)
        acc = np.zeros(e)
        for j in range(k):
            acc += ws[j] / z * v[j]
        out[i] = x[i] + acc
    return out


def brute_force_mine(desc, positives, negatives):
    """Exhaustive hardest-positive / hardest-negative search, lowest index on ties."""
    b = len(desc)
    triplets = []
    for a in range(b):
        best_p, best_pd = None, -1.0
        best_n, best_nd = None, math.inf
        for j in range(b):
            d = math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(desc[a], desc[j])))
            if positives[a][j] and d > best_pd:
                best_p, best_pd = j, d
            if negatives[a][j] and d < best_nd:
                best_n, best_nd = j, d
        if best_p is not None and best_n is not None:
            triplets.append((a, best_p, best_n))
    return triplets


def brute_force_knn(rows, ids, query, k):
    dists = []
    for i, row in enumerate(rows):
        d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(row, query)))
        dists.append((d, ids[i], i))
    dists.sort()
    return dists[:k]


def brute_force_recall(db_desc, db_pos, db_ids, q_desc, q_pos, n_max=25, threshold=25.0):
    """Recall@1..n_max (percent) and AR@1% by exhaustive sorting per query."""
    m = len(db_desc)
    n_pct = max(1, math.floor(0.01 * m + 0.5))
    n_top = max(n_max, n_pct)
    hits_at = np.zeros(n_top + 1)
    for qd, qp in zip(q_desc, q_pos):
        ranked = brute_force_knn(db_desc, db_ids, qd, m)
        first_hit = None
        for rank, (_, _, row) in enumerate(ranked, start=1):
            dx = qp[0] - db_pos[row][0]
            dy = qp[1] - db_pos[row][1]
            if math.sqrt(dx * dx + dy * dy) <= threshold:
                first_hit = rank
                break
        if first_hit is not None and first_hit <= n_top:
            hits_at[first_hit:] += 1
    curve = 100.0 * hits_at[1 : n_max + 1] / len(q_desc)
    return curve, 100.0 * hits_at[n_pct] / len(q_desc)


def jacobi_eigh(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi eigensolver for a symmetric matrix. Returns (values, vectors-as-columns)."""
    a = np.array(a, dtype=float, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off < tol * max(1.0, np.abs(a).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    return np.diag(a).copy(), v


def bin_points(points, lo, hi, resolution, saturation):
    """Loop-based BEV occupancy binning."""
    grid = [[0] * resolution for _ in range(resolution)]
    for x, y, _z in points:
        if not (lo[0] <= x < hi[0] and lo[1] <= y < hi[1]):
            continue
        ix = int(math.floor((x - lo[0]) / (hi[0] - lo[0]) * resolution))
        iy = int(math.floor((y - lo[1]) / (hi[1] - lo[1]) * resolution))
        ix = min(ix, resolution - 1)
        iy = min(iy, resolution - 1)
        grid[iy][ix] += 1
    return np.array([[min(1.0, c / saturation) for c in row] for row in grid])
