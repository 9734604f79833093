"""Synthetic concept tasks with controllable completeness.

Complete concepts ``c*`` are i.i.d. fair bits; inputs are a fixed random
linear image of the ``±1``-coded concepts plus Gaussian noise; labels are
``y = (sum_i 2**i * c*_i) mod L``.  Models only see the first ``k`` of the
``K`` concepts, so ``k < K`` gives a provably incomplete concept set.

Concept indices are 0-based throughout the Python API.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels

SPLITS = ("train", "val", "test")
MAX_ENUM_BITS = 20


@dataclass(frozen=True)
class Spurious:
    n_s: int
    strength: float


@dataclass(frozen=True)
class TaskSpec:
    K: int
    k: int
    n: int
    L: int
    N: int
    sigma_x: float = 0.3
    spurious: Spurious | None = None
    seed: int = 0
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def validate(self) -> None:
        if not 2 <= self.K <= MAX_ENUM_BITS:
            raise ValueError(f"K must lie in [2, {MAX_ENUM_BITS}], got {self.K}")
        if not 1 <= self.k <= self.K:
            raise ValueError(f"k must lie in [1, K], got {self.k}")
        if self.n < 1 or self.N < 1:
            raise ValueError("n and N must be positive")
        if not 2 <= self.L <= 2 ** self.K:
            raise ValueError(f"L must lie in [2, 2**K], got {self.L}")
        if not self.sigma_x >= 0:
            raise ValueError("sigma_x must be non-negative")
        if self.spurious is not None and self.spurious.n_s < 1:
            raise ValueError("spurious.n_s must be positive")
        _check_fractions(self.fractions)

    @property
    def width(self) -> int:
        return self.n + (self.spurious.n_s if self.spurious else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        if d.get("spurious") is not None:
            d["spurious"] = Spurious(**d["spurious"])
        if "fractions" in d:
            d["fractions"] = tuple(float(f) for f in d["fractions"])
        return cls(**d)


@dataclass
class FeatureStats:
    min: np.ndarray
    max: np.ndarray


@dataclass
class ConceptDataset:
    x: np.ndarray
    c_star: np.ndarray
    c: np.ndarray
    y: np.ndarray
    split: np.ndarray
    spec: TaskSpec
    feature_stats: FeatureStats = field(repr=False)

    def rows(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.split == name)

    def subset(self, name: str) -> "Split":
        idx = self.rows(name)
        return Split(name, self.x[idx], self.c[idx], self.y[idx], self.c_star[idx])


@dataclass
class Split:
    """Row view of one split; what models and experiments consume."""
    name: str
    x: np.ndarray
    c: np.ndarray
    y: np.ndarray
    c_star: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *stream]))


def _check_fractions(fractions: Sequence[float]) -> None:
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"split fractions must be three positive numbers summing to 1, got {fractions}")


def label_rule(c_star: np.ndarray, L: int) -> np.ndarray:
    weights = 1 << np.arange(c_star.shape[1], dtype=np.int64)
    return (c_star.astype(np.int64) @ weights) % L


def mixing_matrix(spec: TaskSpec) -> np.ndarray:
    """The seed-fixed ``n x K`` map from ``±1`` concepts to inputs."""
    return _rng(spec.seed, 0).standard_normal((spec.n, spec.K)) / math.sqrt(spec.K)


def generate_task(spec: TaskSpec) -> ConceptDataset:
    spec.validate()
    c_star = _rng(spec.seed, 1).integers(0, 2, size=(spec.N, spec.K)).astype(np.int64)
    y = label_rule(c_star, spec.L)
    x = (2.0 * c_star - 1.0) @ mixing_matrix(spec).T
    if spec.sigma_x > 0:
        x = x + spec.sigma_x * _rng(spec.seed, 2).standard_normal(x.shape)
    split = assign_splits(spec.N, spec.fractions, spec.seed)
    if spec.spurious is not None:
        x = np.hstack([x, _spurious_block(spec, y, split)])
    c = c_star[:, : spec.k].copy()
    return ConceptDataset(x, c_star, c, y, split, spec, _stats(x, split))


def _spurious_block(spec: TaskSpec, y: np.ndarray, split: np.ndarray) -> np.ndarray:
    rng = _rng(spec.seed, 3)
    B = rng.standard_normal((spec.spurious.n_s, spec.L))
    perm = rng.permutation(spec.L)
    shown = np.where(split == "test", perm[y], y)
    block = spec.spurious.strength * np.eye(spec.L)[shown] @ B.T
    if spec.sigma_x > 0:
        block = block + spec.sigma_x * rng.standard_normal(block.shape)
    return block


def assign_splits(N: int, fractions: Sequence[float], seed: int) -> np.ndarray:
    _check_fractions(fractions)
    n_train = int(round(fractions[0] * N))
    n_val = int(round(fractions[1] * N))
    n_test = N - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError(f"split fractions {tuple(fractions)} leave an empty split for N={N}")
    tags = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * n_test)
    return tags[_rng(seed, 4).permutation(N)]


def _stats(x: np.ndarray, split: np.ndarray) -> FeatureStats:
    train = x[split == "train"]
    return FeatureStats(train.min(axis=0), train.max(axis=0))


def split_dataset(dataset: ConceptDataset, fractions: Sequence[float], seed: int) -> ConceptDataset:
    """Reassign split tags by a seeded shuffle and recompute training stats."""
    if dataset.spec.spurious is not None:
        raise ValueError("spurious features are tied to the generated test split; regenerate instead")
    split = assign_splits(len(dataset.y), fractions, seed)
    return replace(dataset, split=split, feature_stats=_stats(dataset.x, split),
                   spec=replace(dataset.spec, fractions=tuple(float(f) for f in fractions)))


def exact_posterior(spec: TaskSpec, S: Sequence[int], c_S: Sequence[int]) -> np.ndarray:
    """Label distribution given the observed training concepts ``S``.

    Enumerates every completion of the unobserved complete-concept bits,
    each equally likely under the uniform concept prior.
    """
    S = np.asarray(S, dtype=np.int64).reshape(-1)
    c_S = np.asarray(c_S, dtype=np.int64).reshape(-1)
    if S.size != c_S.size:
        raise ValueError("S and c_S must have equal length")
    if S.size and (S.min() < 0 or S.max() >= spec.k or np.unique(S).size != S.size):
        raise ValueError(f"S must hold distinct indices in [0, {spec.k})")
    if np.any((c_S != 0) & (c_S != 1)):
        raise ValueError("concept values must be binary")
    if spec.K - S.size > MAX_ENUM_BITS:
        raise ValueError("too many unobserved bits to enumerate")
    counts = _kernels.posterior_counts(spec.K, spec.L, S, c_S)
    return counts / counts.sum()


def inject_salt_pepper(x: np.ndarray, level: float, stats: FeatureStats, seed: int) -> np.ndarray:
    """Pin random features of each row to their training extremes.

    Per row, ``floor(level/2 * width)`` indices (drawn with replacement) go
    to the training max, then as many to the training min.
    """
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"noise level must lie in [0, 1], got {level}")
    x = np.asarray(x, dtype=np.float64)
    rows, width = x.shape
    count = int(math.floor(level / 2 * width))
    if count == 0:
        return x.copy()
    rng = _rng(seed, 5)
    idx_max = rng.integers(0, width, size=(rows, count))
    idx_min = rng.integers(0, width, size=(rows, count))
    return _kernels.salt_pepper(x, idx_max, idx_min, stats.max, stats.min)


# -- on-disk layout -----------------------------------------------------------

def _write_matrix(path: Path, arr: np.ndarray, fmt: str, header: str | None = None) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 1:
        arr = arr[:, None]
    np.savetxt(path, arr, fmt=fmt, delimiter=",", header=(header or "").lstrip("# "),
               comments="# " if header else "")


def save_dataset(dataset: ConceptDataset, directory: str | Path, header: str | None = None) -> Path:
    """Write ``x``, ``c_star``, ``c`` and ``y`` CSVs plus ``meta.json``.

    ``header`` becomes a leading ``#`` comment row in every CSV.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_matrix(directory / "x.csv", dataset.x, "%.9g", header)
    _write_matrix(directory / "c_star.csv", dataset.c_star, "%d", header)
    _write_matrix(directory / "c.csv", dataset.c, "%d", header)
    _write_matrix(directory / "y.csv", dataset.y, "%d", header)
    meta = {
        "spec": dataset.spec.to_dict(),
        "seed": dataset.spec.seed,
        "split": dataset.split.tolist(),
        "feature_stats": {"min": [float(f"{v:.9g}") for v in dataset.feature_stats.min],
                          "max": [float(f"{v:.9g}") for v in dataset.feature_stats.max]},
    }
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return directory


def load_dataset(directory: str | Path) -> ConceptDataset:
    directory = Path(directory)
    if not (directory / "meta.json").exists():
        raise FileNotFoundError(f"missing dataset: expected {directory / 'meta.json'}")
    meta = json.loads((directory / "meta.json").read_text())
    spec = TaskSpec.from_dict(meta["spec"])

    def read(name, dtype):
        return np.loadtxt(directory / name, delimiter=",", dtype=dtype, ndmin=2)

    x = read("x.csv", np.float64)
    c_star = read("c_star.csv", np.int64)
    c = read("c.csv", np.int64)
    y = read("y.csv", np.int64)[:, 0]
    stats = FeatureStats(np.array(meta["feature_stats"]["min"]), np.array(meta["feature_stats"]["max"]))
    return ConceptDataset(x, c_star, c, y, np.array(meta["split"]), spec, stats)
