import numpy as np
import pytest

from cbmlab import _kernels
from cbmlab._kernels import numba_impl, numpy_impl


@pytest.mark.parametrize("K,L,S", [(4, 16, []), (6, 7, [0, 3]), (9, 100, [1, 2, 5, 8])])
def test_posterior_counts_agree(K, L, S):
    vals = np.array([1, 0, 1, 1][: len(S)], dtype=np.int64)
    S = np.array(S, dtype=np.int64)
    np.testing.assert_array_equal(numpy_impl.posterior_counts(K, L, S, vals),
                                  numba_impl.posterior_counts(K, L, S, vals))


def test_salt_pepper_agree():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 12))
    idx_max = rng.integers(0, 12, size=(30, 2))
    idx_min = rng.integers(0, 12, size=(30, 2))
    fmax, fmin = rng.normal(size=12) + 3, rng.normal(size=12) - 3
    np.testing.assert_array_equal(numpy_impl.salt_pepper(x, idx_max, idx_min, fmax, fmin),
                                  numba_impl.salt_pepper(x, idx_max, idx_min, fmax, fmin))


@pytest.mark.parametrize("seed", range(5))
def test_rank_auc_agree_with_ties(seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 5, size=200).astype(float)
    labels = rng.integers(0, 2, size=200)
    a = numpy_impl.rank_auc(scores, labels)
    b = numba_impl.rank_auc(scores, labels)
    assert a == pytest.approx(b, abs=1e-12)


def test_env_flag_selects_numpy(monkeypatch):
    monkeypatch.setenv("CBMLAB_NO_NUMBA", "1")
    assert _kernels.active() is numpy_impl
    monkeypatch.setenv("CBMLAB_NO_NUMBA", "0")
    assert _kernels.active() is numba_impl
