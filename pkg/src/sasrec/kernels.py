"""Hot inner-loop kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``SASREC_NUMBA=0`` to force
the numpy path (useful for debugging and for the kernel benchmark). Both
paths are kept numerically equivalent; within one backend every kernel is
deterministic.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None

_FLAG = os.environ.get("SASREC_NUMBA", "1").strip().lower()
USE_NUMBA = numba is not None and _FLAG not in ("0", "false", "off", "no")


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def masked_softmax_numpy(x, mask):
    m = np.where(mask, x, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, x - m, 0.0)), 0.0).astype(x.dtype, copy=False)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1)  # empty rows stay all zero


def softmax_backward_numpy(y, gy):
    return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


def layer_norm_forward_numpy(x, alpha, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * alpha + beta, xhat, rstd[:, 0]


def layer_norm_backward_numpy(gy, xhat, rstd, alpha):
    galpha = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    gxhat = gy * alpha
    gx = rstd[:, None] * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return gx, galpha, gbeta


def scatter_add_rows_numpy(idx, values, nrows):
    out = np.zeros((nrows, values.shape[1]), dtype=values.dtype)
    np.add.at(out, idx, values)
    return out


def isin_rows_numpy(cand, rows, indptr, items):
    """cand[r, c] in items[indptr[rows[r]]:indptr[rows[r] + 1]] (sorted segments)."""
    if not items.size:
        return np.zeros(cand.shape, dtype=bool)
    width = int(max(items.max(), cand.max() if cand.size else 0)) + 1
    seg = np.repeat(np.arange(len(indptr) - 1, dtype=np.int64), np.diff(indptr))
    keys = seg * width + items.astype(np.int64)
    q = rows.astype(np.int64)[:, None] * width + cand.astype(np.int64)
    pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
    return keys[pos] == q


def pessimistic_ranks_numpy(scores, valid):
    """Column 0 holds the ground truth; ties with it count against it."""
    beats = (scores[:, 1:] >= scores[:, :1]) & valid[:, 1:]
    return 1 + beats.sum(axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if numba is not None:
    njit = numba.njit(cache=True, nogil=True)

    @njit
    def _masked_softmax_nb(x, mask):
        rows, cols = x.shape
        y = np.zeros_like(x)
        for r in range(rows):
            m = -np.inf
            for c in range(cols):
                if mask[r, c] and x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(cols):
                if mask[r, c]:
                    e = np.exp(x[r, c] - m)
                    y[r, c] = e
                    s += e
            for c in range(cols):
                if mask[r, c]:
                    y[r, c] = y[r, c] / s
        return y

    @njit
    def _softmax_backward_nb(y, gy):
        rows, cols = y.shape
        gx = np.empty_like(y)
        for r in range(rows):
            dot = 0.0
            for c in range(cols):
                dot += gy[r, c] * y[r, c]
            for c in range(cols):
                gx[r, c] = y[r, c] * (gy[r, c] - dot)
        return gx

    @njit
    def _layer_norm_forward_nb(x, alpha, beta, eps):
        rows, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            mu = 0.0
            for c in range(d):
                mu += x[r, c]
            mu /= d
            var = 0.0
            for c in range(d):
                t = x[r, c] - mu
                var += t * t
            var /= d
            rs = 1.0 / np.sqrt(var + eps)
            rstd[r] = rs
            for c in range(d):
                h = (x[r, c] - mu) * rs
                xhat[r, c] = h
                y[r, c] = h * alpha[c] + beta[c]
        return y, xhat, rstd

    @njit
    def _layer_norm_backward_nb(gy, xhat, rstd, alpha):
        rows, d = gy.shape
        gx = np.empty_like(gy)
        galpha = np.zeros(d, dtype=gy.dtype)
        gbeta = np.zeros(d, dtype=gy.dtype)
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for c in range(d):
                g = gy[r, c] * alpha[c]
                m1 += g
                m2 += g * xhat[r, c]
                galpha[c] += gy[r, c] * xhat[r, c]
                gbeta[c] += gy[r, c]
            m1 /= d
            m2 /= d
            for c in range(d):
                gx[r, c] = rstd[r] * (gy[r, c] * alpha[c] - m1 - xhat[r, c] * m2)
        return gx, galpha, gbeta

    @njit
    def _scatter_add_rows_nb(idx, values, nrows):
        out = np.zeros((nrows, values.shape[1]), dtype=values.dtype)
        for r in range(idx.shape[0]):
            k = idx[r]
            for c in range(values.shape[1]):
                out[k, c] += values[r, c]
        return out

    @njit
    def _isin_rows_nb(cand, rows, indptr, items):
        n_rows, n_cols = cand.shape
        out = np.zeros((n_rows, n_cols), dtype=np.bool_)
        for r in range(n_rows):
            lo0 = indptr[rows[r]]
            hi0 = indptr[rows[r] + 1]
            for c in range(n_cols):
                v = cand[r, c]
                lo = lo0
                hi = hi0
                while lo < hi:
                    mid = (lo + hi) // 2
                    if items[mid] < v:
                        lo = mid + 1
                    else:
                        hi = mid
                out[r, c] = lo < hi0 and items[lo] == v
        return out

    @njit
    def _pessimistic_ranks_nb(scores, valid):
        n_rows, n_cols = scores.shape
        ranks = np.ones(n_rows, dtype=np.int64)
        for r in range(n_rows):
            t = scores[r, 0]
            for c in range(1, n_cols):
                if valid[r, c] and scores[r, c] >= t:
                    ranks[r] += 1
        return ranks


def _flat2(fn):
    def wrapped(x, *args):
        shape = x.shape
        out = fn(np.ascontiguousarray(x.reshape(-1, shape[-1])),
                 *[np.ascontiguousarray(a.reshape(-1, shape[-1])) for a in args])
        return out.reshape(shape)
    return wrapped


def _softmax_nb(x, mask):
    return _flat2(_masked_softmax_nb)(x, mask)


def _softmax_bwd_nb(y, gy):
    return _flat2(_softmax_backward_nb)(y, gy)


def _ln_fwd_nb(x, alpha, beta, eps):
    return _layer_norm_forward_nb(np.ascontiguousarray(x), alpha, beta, x.dtype.type(eps))


def _ln_bwd_nb(gy, xhat, rstd, alpha):
    return _layer_norm_backward_nb(np.ascontiguousarray(gy), xhat, rstd, alpha)


def _scatter_nb(idx, values, nrows):
    return _scatter_add_rows_nb(np.ascontiguousarray(idx, dtype=np.int64),
                                np.ascontiguousarray(values), nrows)


def _isin_nb(cand, rows, indptr, items):
    return _isin_rows_nb(np.ascontiguousarray(cand, dtype=np.int64),
                         np.ascontiguousarray(rows, dtype=np.int64),
                         np.ascontiguousarray(indptr, dtype=np.int64),
                         np.ascontiguousarray(items, dtype=np.int64))


def _ranks_nb(scores, valid):
    return _pessimistic_ranks_nb(np.ascontiguousarray(scores), np.ascontiguousarray(valid))


NUMPY_KERNELS = {
    "masked_softmax": masked_softmax_numpy,
    "softmax_backward": softmax_backward_numpy,
    "layer_norm_forward": layer_norm_forward_numpy,
    "layer_norm_backward": layer_norm_backward_numpy,
    "scatter_add_rows": scatter_add_rows_numpy,
    "isin_rows": isin_rows_numpy,
    "pessimistic_ranks": pessimistic_ranks_numpy,
}

NUMBA_KERNELS = {} if numba is None else {
    "masked_softmax": _softmax_nb,
    "softmax_backward": _softmax_bwd_nb,
    "layer_norm_forward": _ln_fwd_nb,
    "layer_norm_backward": _ln_bwd_nb,
    "scatter_add_rows": _scatter_nb,
    "isin_rows": _isin_nb,
    "pessimistic_ranks": _ranks_nb,
}

_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

masked_softmax = _ACTIVE["masked_softmax"]
softmax_backward = _ACTIVE["softmax_backward"]
layer_norm_forward = _ACTIVE["layer_norm_forward"]
layer_norm_backward = _ACTIVE["layer_norm_backward"]
scatter_add_rows = _ACTIVE["scatter_add_rows"]
isin_rows = _ACTIVE["isin_rows"]
pessimistic_ranks = _ACTIVE["pessimistic_ranks"]
