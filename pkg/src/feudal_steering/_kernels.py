"""Hot inner loops, each in two flavours: numba ``@njit`` and plain numpy.

The numba path is used when numba imports and ``FEUDAL_STEERING_NUMBA`` is not
set to a false-ish value (``0``, ``false``, ``off``, ``no``).  Both paths are
always importable so tests and ``benchmarks/bench_kernels.py`` can compare them.
"""
import math
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_flag = os.environ.get("FEUDAL_STEERING_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _flag not in ("0", "false", "off", "no")


# ---------------------------------------------------------------------------
# numpy implementations


def im2col3d_numpy(xp, kd, kh, kw, sd, sh, sw):
    """Unfold a padded (N, C, D, H, W) volume into a (N*Do*Ho*Wo, C*kd*kh*kw) matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    do, ho, wo = win.shape[2:5]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * do * ho * wo, c * kd * kh * kw)
    return np.ascontiguousarray(cols)


def col2im3d_numpy(cols, padded_shape, kd, kh, kw, sd, sh, sw, do, ho, wo):
    """Adjoint of :func:`im2col3d_numpy`: scatter-add columns back into the volume."""
    n, c = padded_shape[:2]
    g = cols.reshape(n, do, ho, wo, c, kd, kh, kw)
    dx = np.zeros(padded_shape)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                dx[:, :, a:a + sd * do:sd, b:b + sh * ho:sh, e:e + sw * wo:sw] += (
                    g[..., a, b, e].transpose(0, 4, 1, 2, 3)
                )
    return dx


def perplexity_search_numpy(dist2, perplexity, tol, max_iter):
    """Per-row Gaussian precision by bisection so each row hits ``perplexity``.

    Returns the conditional affinity matrix (rows sum to 1, zero diagonal) and the
    precision ``beta = 1 / (2 sigma^2)`` chosen for every row.
    """
    n = dist2.shape[0]
    cond = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        d = np.delete(dist2[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0, -np.inf, np.inf
        for _ in range(max_iter):
            w = np.exp(-d * beta)
            s = w.sum()
            h = math.log(s) + beta * float(np.dot(d, w)) / s
            diff = math.exp(h) - perplexity
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = beta / 2.0 if lo == -np.inf else (beta + lo) / 2.0
        w = np.exp(-d * beta)
        row = w / w.sum()
        cond[i, :i] = row[:i]
        cond[i, i + 1:] = row[i:]
        betas[i] = beta
    return cond, betas


def tsne_gradient_numpy(y, p):
    """KL(P||Q) gradient w.r.t. the embedding and the KL value itself."""
    sq = np.sum(y * y, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (y @ y.T), 0.0)
    num = 1.0 / (1.0 + d2)
    np.fill_diagonal(num, 0.0)
    q = num / num.sum()
    pq = (p - q) * num
    grad = 4.0 * (pq.sum(axis=1)[:, None] * y - pq @ y)
    mask = p > 0
    kl = float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-300))))
    return grad, kl


def nearest_centroid_numpy(x, centroids):
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels.astype(np.int64), d2[np.arange(x.shape[0]), labels]


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True)
    def im2col3d_numba(xp, kd, kh, kw, sd, sh, sw):
        n, c, d, h, w = xp.shape
        do = (d - kd) // sd + 1
        ho = (h - kh) // sh + 1
        wo = (w - kw) // sw + 1
        cols = np.empty((n * do * ho * wo, c * kd * kh * kw))
        for b in range(n):
            for od in range(do):
                for oh in range(ho):
                    for ow in range(wo):
                        row = ((b * do + od) * ho + oh) * wo + ow
                        col = 0
                        for ch in range(c):
                            for a in range(kd):
                                for e in range(kh):
                                    for f in range(kw):
                                        cols[row, col] = xp[b, ch, od * sd + a, oh * sh + e, ow * sw + f]
                                        col += 1
        return cols

    @njit(cache=True)
    def _col2im3d_numba(cols, dx, kd, kh, kw, sd, sh, sw, do, ho, wo):
        n, c = dx.shape[0], dx.shape[1]
        for b in range(n):
            for od in range(do):
                for oh in range(ho):
                    for ow in range(wo):
                        row = ((b * do + od) * ho + oh) * wo + ow
                        col = 0
                        for ch in range(c):
                            for a in range(kd):
                                for e in range(kh):
                                    for f in range(kw):
                                        dx[b, ch, od * sd + a, oh * sh + e, ow * sw + f] += cols[row, col]
                                        col += 1
        return dx

    def col2im3d_numba(cols, padded_shape, kd, kh, kw, sd, sh, sw, do, ho, wo):
        dx = np.zeros(padded_shape)
        return _col2im3d_numba(np.ascontiguousarray(cols), dx, kd, kh, kw, sd, sh, sw, do, ho, wo)

    @njit(cache=True)
    def perplexity_search_numba(dist2, perplexity, tol, max_iter):
        n = dist2.shape[0]
        cond = np.zeros((n, n))
        betas = np.ones(n)
        d = np.empty(n - 1)
        w = np.empty(n - 1)
        for i in range(n):
            k = 0
            for j in range(n):
                if j != i:
                    d[k] = dist2[i, j]
                    k += 1
            dmin = d.min()
            for j in range(n - 1):
                d[j] -= dmin
            beta = 1.0
            lo = -np.inf
            hi = np.inf
            for _ in range(max_iter):
                s = 0.0
                dw = 0.0
                for j in range(n - 1):
                    w[j] = math.exp(-d[j] * beta)
                    s += w[j]
                    dw += d[j] * w[j]
                h = math.log(s) + beta * dw / s
                diff = math.exp(h) - perplexity
                if abs(diff) < tol:
                    break
                if diff > 0:
                    lo = beta
                    beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
                else:
                    hi = beta
                    beta = beta / 2.0 if lo == -np.inf else (beta + lo) / 2.0
            s = 0.0
            for j in range(n - 1):
                w[j] = math.exp(-d[j] * beta)
                s += w[j]
            k = 0
            for j in range(n):
                if j != i:
                    cond[i, j] = w[k] / s
                    k += 1
            betas[i] = beta
        return cond, betas

    @njit(cache=True)
    def tsne_gradient_numba(y, p):
        n, dim = y.shape
        num = np.zeros((n, n))
        total = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                d2 = 0.0
                for a in range(dim):
                    t = y[i, a] - y[j, a]
                    d2 += t * t
                v = 1.0 / (1.0 + d2)
                num[i, j] = v
                num[j, i] = v
                total += 2.0 * v
        grad = np.zeros((n, dim))
        kl = 0.0
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                q = num[i, j] / total
                pq = (p[i, j] - q) * num[i, j]
                for a in range(dim):
                    grad[i, a] += 4.0 * pq * (y[i, a] - y[j, a])
                if p[i, j] > 0:
                    kl += p[i, j] * math.log(p[i, j] / max(q, 1e-300))
        return grad, kl

    @njit(cache=True)
    def nearest_centroid_numba(x, centroids):
        n, dim = x.shape
        k = centroids.shape[0]
        labels = np.zeros(n, dtype=np.int64)
        best = np.empty(n)
        for i in range(n):
            bd = np.inf
            bl = 0
            for c in range(k):
                d2 = 0.0
                for a in range(dim):
                    t = x[i, a] - centroids[c, a]
                    d2 += t * t
                if d2 < bd:
                    bd = d2
                    bl = c
            labels[i] = bl
            best[i] = bd
        return labels, best


NUMPY_KERNELS = {
    "im2col3d": im2col3d_numpy,
    "col2im3d": col2im3d_numpy,
    "perplexity_search": perplexity_search_numpy,
    "tsne_gradient": tsne_gradient_numpy,
    "nearest_centroid": nearest_centroid_numpy,
}

if HAVE_NUMBA:
    NUMBA_KERNELS = {
        "im2col3d": im2col3d_numba,
        "col2im3d": col2im3d_numba,
        "perplexity_search": perplexity_search_numba,
        "tsne_gradient": tsne_gradient_numba,
        "nearest_centroid": nearest_centroid_numba,
    }
else:  # pragma: no cover
    NUMBA_KERNELS = {}

_active = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

im2col3d = _active["im2col3d"]
col2im3d = _active["col2im3d"]
perplexity_search = _active["perplexity_search"]
tsne_gradient = _active["tsne_gradient"]
nearest_centroid = _active["nearest_centroid"]


def backend():
    return "numba" if USE_NUMBA else "numpy"
