"""Brute-force reference implementations, kept deliberately loop-based.

These are the trusted second route for oracle-equivalence tests: plain
Python float arithmetic, no vectorization shared with the library code.
"""

import numpy as np


def conv2d_loops(x, w, stride=1, pad=0):
    """Six-nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[ni, ci, yi * stride + ki, xi * stride + kj] \
                                       * w[oi, ci, ki, kj]
                    out[ni, oi, yi, xi] = acc
    return out


def matmul_loops(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def _sq_dist(row, c):
    return sum((float(a) - float(b)) ** 2 for a, b in zip(row, c))


def idc_loops(features, domain_ids, centroids):
    """Sum_k [ (1/(K-1)) sum_{m!=k} meansq(rows_k, c_m) - meansq(rows_k, c_k) ].

    K counts the centroids registered in ``centroids``; the outer sum runs
    over domains present in the batch.
    """
    kk = len(centroids)
    total = 0.0
    for k in sorted(set(int(d) for d in domain_ids)):
        rows = [features[i] for i in range(len(domain_ids)) if domain_ids[i] == k]
        sd = sum(_sq_dist(r, centroids[k]) for r in rows) / len(rows)
        dd = 0.0
        for m, cm in centroids.items():
            if m != k:
                dd += sum(_sq_dist(r, cm) for r in rows) / len(rows)
        dd /= (kk - 1)
        total += dd - sd
    return total


def ics_loops(features, labels, c_real, c_fake):
    """meansq(reals, c_real) - meansq(reals, c_fake) - meansq(fakes, c_real)."""
    reals = [features[i] for i in range(len(labels)) if labels[i] == 1]
    fakes = [features[i] for i in range(len(labels)) if labels[i] == 0]
    d_rr = sum(_sq_dist(r, c_real) for r in reals) / len(reals)
    d_rf = sum(_sq_dist(r, c_fake) for r in reals) / len(reals)
    d_fr = sum(_sq_dist(f, c_real) for f in fakes) / len(fakes)
    return d_rr - d_rf - d_fr


def auc_pairs(scores, labels):
    """Probability a random positive outscores a random negative; ties 0.5."""
    pos = [float(s) for s, l in zip(scores, labels) if l == 1]
    neg = [float(s) for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))
