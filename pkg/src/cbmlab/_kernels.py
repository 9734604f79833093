"""Hot loops with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``CBMLAB_NO_NUMBA`` is unset
(or ``0``).  Both paths are always importable as ``numpy_impl`` and
``numba_impl`` so tests can compare them; ``numba_impl`` is ``None`` when
numba is unavailable.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np


# -- numpy reference implementations ---------------------------------------

def _posterior_counts_np(K: int, L: int, fixed_idx: np.ndarray, fixed_vals: np.ndarray) -> np.ndarray:
    free = np.setdiff1d(np.arange(K), fixed_idx)
    base = int(np.sum(fixed_vals.astype(np.int64) << fixed_idx.astype(np.int64)))
    combos = np.arange(1 << free.size, dtype=np.int64)
    codes = np.full(combos.shape, base, dtype=np.int64)
    for j, bit in enumerate(free):
        codes |= ((combos >> j) & 1) << int(bit)
    return np.bincount(codes % L, minlength=L).astype(np.float64)


def _salt_pepper_np(x, idx_max, idx_min, fmax, fmin):
    out = x.copy()
    rows = np.arange(x.shape[0])[:, None]
    out[rows, idx_max] = fmax[idx_max]
    out[rows, idx_min] = fmin[idx_min]
    return out


def _rank_auc_np(scores: np.ndarray, labels: np.ndarray) -> float:
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # average ranks over tie blocks
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], s.size]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    pos = labels > 0
    n_pos = pos.sum()
    n_neg = labels.size - n_pos
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


numpy_impl = SimpleNamespace(
    posterior_counts=_posterior_counts_np,
    salt_pepper=_salt_pepper_np,
    rank_auc=_rank_auc_np,
)


# -- numba implementations ---------------------------------------------------

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None
else:

    @njit(cache=True)
    def _posterior_counts_nb(K, L, fixed_idx, fixed_vals):
        is_fixed = np.zeros(K, dtype=np.bool_)
        base = 0
        for j in range(fixed_idx.size):
            is_fixed[fixed_idx[j]] = True
            base |= np.int64(fixed_vals[j]) << np.int64(fixed_idx[j])
        free = np.empty(K - fixed_idx.size, dtype=np.int64)
        f = 0
        for i in range(K):
            if not is_fixed[i]:
                free[f] = i
                f += 1
        counts = np.zeros(L, dtype=np.float64)
        for combo in range(np.int64(1) << free.size):
            code = base
            for j in range(free.size):
                code |= ((combo >> j) & 1) << free[j]
            counts[code % L] += 1.0
        return counts

    @njit(cache=True)
    def _salt_pepper_nb(x, idx_max, idx_min, fmax, fmin):
        out = x.copy()
        for r in range(x.shape[0]):
            for j in range(idx_max.shape[1]):
                out[r, idx_max[r, j]] = fmax[idx_max[r, j]]
            for j in range(idx_min.shape[1]):
                out[r, idx_min[r, j]] = fmin[idx_min[r, j]]
        return out

    @njit(cache=True)
    def _rank_auc_nb(scores, labels):
        order = np.argsort(scores, kind="mergesort")
        n = scores.size
        ranks = np.empty(n, dtype=np.float64)
        i = 0
        while i < n:
            j = i
            while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
                j += 1
            avg = (i + j + 2) / 2.0
            for t in range(i, j + 1):
                ranks[order[t]] = avg
            i = j + 1
        n_pos = 0
        rank_sum = 0.0
        for t in range(n):
            if labels[t] > 0:
                n_pos += 1
                rank_sum += ranks[t]
        n_neg = n - n_pos
        return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    numba_impl = SimpleNamespace(
        posterior_counts=_posterior_counts_nb,
        salt_pepper=_salt_pepper_nb,
        rank_auc=_rank_auc_nb,
    )


def use_numba() -> bool:
    return numba_impl is not None and os.environ.get("CBMLAB_NO_NUMBA", "0") in ("", "0")


def active():
    """The implementation namespace selected by the environment."""
    return numba_impl if use_numba() else numpy_impl


def posterior_counts(K: int, L: int, fixed_idx, fixed_vals) -> np.ndarray:
    return active().posterior_counts(
        int(K), int(L), np.asarray(fixed_idx, dtype=np.int64), np.asarray(fixed_vals, dtype=np.int64)
    )


def salt_pepper(x, idx_max, idx_min, fmax, fmin) -> np.ndarray:
    return active().salt_pepper(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(idx_max, dtype=np.int64),
        np.ascontiguousarray(idx_min, dtype=np.int64),
        np.ascontiguousarray(fmax, dtype=np.float64),
        np.ascontiguousarray(fmin, dtype=np.float64),
    )


def rank_auc(scores, labels) -> float:
    return float(active().rank_auc(
        np.ascontiguousarray(scores, dtype=np.float64), np.ascontiguousarray(labels, dtype=np.int64)
    ))
