"""Random-subset intervention studies and Bayes-classifier references.

For each trial a seeded permutation of the concepts fixes the intervention
order; at fraction ``f`` the first ``ceil(f * k)`` concepts of that order are
set to their ground-truth values.  Model curves, the exact enumerative Bayes
curve and the masked-MLP Bayes curve all share the same orders for a given
seed, so they are directly comparable.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datagen import ConceptDataset, FeatureStats, Split, TaskSpec, exact_posterior, inject_salt_pepper
from .models import ForwardOptions, InterventionMask, Model, forward
from .tensorcore import LEAKY_SLOPE, ValueGraph, softmax


@dataclass
class InterventionCurve:
    fractions: np.ndarray
    accuracies: np.ndarray  # trials x fractions
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)
    auc: float = field(init=False)

    def __post_init__(self):
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.accuracies = np.atleast_2d(np.asarray(self.accuracies, dtype=np.float64))
        self.mean = self.accuracies.mean(axis=0)
        self.std = self.accuracies.std(axis=0)
        self.auc = curve_auc(self.fractions, self.mean)

    def at(self, fraction: float) -> float:
        i = int(np.flatnonzero(np.isclose(self.fractions, fraction))[0])
        return float(self.mean[i])

    def write(self, path: str | Path, header: str | None = None) -> tuple[Path, Path]:
        """Long-form ``(fraction, trial, accuracy)`` CSV plus a ``*_summary.csv``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("fraction", "trial", "accuracy"))
            for j, f in enumerate(self.fractions):
                for t in range(self.accuracies.shape[0]):
                    w.writerow((repr(float(f)), t, repr(float(self.accuracies[t, j]))))
        summary = path.with_name(path.stem + "_summary.csv")
        with summary.open("w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("fraction", "mean", "std"))
            for f, mu, sd in zip(self.fractions, self.mean, self.std):
                w.writerow((repr(float(f)), repr(float(mu)), repr(float(sd))))
            w.writerow(("auc", repr(float(self.auc)), ""))
        return path, summary

    @classmethod
    def read(cls, path: str | Path) -> "InterventionCurve":
        rows = [r for r in csv.reader(Path(path).read_text().splitlines()) if r and not r[0].startswith("#")]
        body = rows[1:]
        fractions = sorted({float(r[0]) for r in body})
        trials = max(int(r[1]) for r in body) + 1
        acc = np.zeros((trials, len(fractions)))
        for f, t, a in body:
            acc[int(t), fractions.index(float(f))] = float(a)
        return cls(np.array(fractions), acc)


def curve_auc(fractions, accuracies) -> float:
    """Trapezoidal area under an accuracy-vs-fraction curve."""
    f = np.asarray(fractions, dtype=np.float64)
    a = np.asarray(accuracies, dtype=np.float64)
    if f.size < 2 or f.shape != a.shape:
        raise ValueError("need at least two (fraction, accuracy) points of matching length")
    if np.any(np.diff(f) <= 0):
        raise ValueError("fractions must be strictly ascending")
    return float(np.sum(np.diff(f) * (a[1:] + a[:-1]) / 2.0))


def validate_fractions(fractions: Sequence[float]) -> np.ndarray:
    f = np.asarray(fractions, dtype=np.float64)
    if f.ndim != 1 or f.size < 2 or f[0] != 0.0 or f[-1] != 1.0:
        raise ValueError("fraction grid must start at 0 and end at 1")
    if np.any(np.diff(f) <= 0) or np.any((f < 0) | (f > 1)):
        raise ValueError("fractions must be strictly ascending within [0, 1]")
    return f


def intervention_orders(k: int, trials: int, seed: int) -> list[np.ndarray]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    return [np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), 23, t])).permutation(k)
            for t in range(trials)]


def n_intervened(fraction: float, k: int) -> int:
    return int(math.ceil(fraction * k - 1e-9))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CBMLAB_THREADS", "1")))
    except ValueError:
        return 1


def _run_curve(k: int, fractions, trials: int, seed: int,
               score: Callable[[tuple[int, ...]], float]) -> InterventionCurve:
    """Evaluate ``score(subset)`` once per distinct subset and fill the trial matrix."""
    fractions = validate_fractions(fractions)
    orders = intervention_orders(k, trials, seed)
    subsets = [[tuple(sorted(int(i) for i in order[: n_intervened(f, k)])) for f in fractions]
               for order in orders]
    unique = sorted({s for row in subsets for s in row}, key=lambda s: (len(s), s))
    workers = min(_threads(), len(unique))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = dict(zip(unique, pool.map(score, unique)))
    else:
        scores = {s: score(s) for s in unique}
    acc = np.array([[scores[s] for s in row] for row in subsets])
    return InterventionCurve(fractions, acc)


def shifted_inputs(split: Split, shift: float | None, stats: FeatureStats | None, noise_seed: int) -> np.ndarray:
    if not shift:
        return split.x
    if stats is None:
        raise ValueError("a shift needs training feature stats")
    return inject_salt_pepper(split.x, shift, stats, noise_seed)


def intervention_curve(model: Model, split: Split, fractions, trials: int, opts: ForwardOptions,
                       shift: float | None = None, stats: FeatureStats | None = None,
                       seed: int = 0, noise_seed: int = 0) -> InterventionCurve:
    """Task accuracy as growing random concept subsets are intervened.

    With ``shift`` the inputs are salt-and-pepper corrupted first; intervention
    values always come from the clean ground-truth concepts.
    """
    x = shifted_inputs(split, shift, stats, noise_seed)

    def score(subset):
        mask = InterventionMask(subset, split.c[:, list(subset)]) if subset else None
        out = forward(model, x, ForwardOptions(
            intervention=mask, dropout_p=opts.dropout_p, mc_samples=opts.mc_samples,
            rng_seed=opts.rng_seed, calibrated=opts.calibrated))
        return float(np.mean(out.y_prob.argmax(axis=1) == split.y))

    return _run_curve(model.config.k, fractions, trials, seed, score)


def intervened_predictions(model: Model, x, c, subset: Sequence[int], opts: ForwardOptions) -> np.ndarray:
    subset = list(subset)
    mask = InterventionMask(subset, np.asarray(c)[:, subset]) if subset else None
    out = forward(model, x, ForwardOptions(intervention=mask, dropout_p=opts.dropout_p,
                                           mc_samples=opts.mc_samples, rng_seed=opts.rng_seed,
                                           calibrated=opts.calibrated))
    return out.y_prob.argmax(axis=1)


# -- exact Bayes reference ---------------------------------------------------------

def exact_bayes_predictions(spec: TaskSpec, c: np.ndarray, subset: Sequence[int]) -> np.ndarray:
    subset = list(subset)
    c = np.asarray(c, dtype=np.int64)
    patterns, inverse = np.unique(c[:, subset], axis=0, return_inverse=True) if subset else (
        np.zeros((1, 0), dtype=np.int64), np.zeros(len(c), dtype=np.int64))
    best = np.array([int(np.argmax(exact_posterior(spec, subset, pat))) for pat in patterns])
    return best[np.asarray(inverse).reshape(-1)]


def exact_bayes_accuracy(spec: TaskSpec, subset: Sequence[int]) -> float:
    """Expected accuracy of the Bayes classifier seeing only ``subset`` (uniform concepts)."""
    subset = list(subset)
    total = 0.0
    for code in range(1 << len(subset)):
        pat = [(code >> j) & 1 for j in range(len(subset))]
        total += exact_posterior(spec, subset, pat).max()
    return total / (1 << len(subset))


def exact_bayes_curve(spec: TaskSpec, split: Split, fractions, trials: int, seed: int = 0) -> InterventionCurve:
    """Bayes-classifier curve from enumerated posteriors; independent of any input shift."""

    def score(subset):
        return float(np.mean(exact_bayes_predictions(spec, split.c, subset) == split.y))

    return _run_curve(spec.k, fractions, trials, seed, score)


# -- masked-MLP Bayes approximation ------------------------------------------------------

@dataclass(frozen=True)
class BayesApproxConfig:
    hidden_widths: tuple[int, ...] = (28, 64, 32)
    mask_prob: float = 0.25
    mask_value: float = 0.5
    epochs: int = 75
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not 0 <= self.mask_prob <= 1:
            raise ValueError("mask_prob must lie in [0, 1]")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError("hidden widths must be positive")


@dataclass
class MaskedBayes:
    """MLP ``[0,1]^k -> simplex^L`` over partially observed concept vectors."""
    params: dict[str, np.ndarray]
    cfg: BayesApproxConfig

    def _graph(self, c_in: np.ndarray) -> tuple[ValueGraph, object]:
        g = ValueGraph()
        h = g.const(c_in)
        n_layers = len(self.cfg.hidden_widths) + 1
        for i in range(n_layers):
            h = g.add(g.matmul(h, g.param(f"W{i}", self.params[f"W{i}"])), g.param(f"b{i}", self.params[f"b{i}"]))
            if i < n_layers - 1:
                h = g.leaky_relu(h, LEAKY_SLOPE)
        return g, h

    def predict_proba(self, c_prime) -> np.ndarray:
        g, logits = self._graph(np.atleast_2d(np.asarray(c_prime, dtype=np.float64)))
        return softmax(g.evaluate(outputs=[logits])[logits.name])

    def masked_input(self, c, subset: Sequence[int]) -> np.ndarray:
        c = np.atleast_2d(np.asarray(c, dtype=np.float64))
        out = np.full(c.shape, self.cfg.mask_value)
        subset = list(subset)
        out[:, subset] = c[:, subset]
        return out


def train_masked_bayes(dataset: ConceptDataset, cfg: BayesApproxConfig = BayesApproxConfig()) -> MaskedBayes:
    train = dataset.subset("train")
    if len(train) == 0:
        raise ValueError("dataset has no training rows")
    k, L = train.c.shape[1], dataset.spec.L
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & (2**64 - 1), 29]))
    widths = (k, *cfg.hidden_widths, L)
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"W{i}"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    model = MaskedBayes(params, cfg)
    velocity = {n: np.zeros_like(v) for n, v in params.items()}
    c_all = train.c.astype(np.float64)
    onehot_all = np.eye(L)[train.y]
    n = len(train)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            c_in = np.where(rng.random((len(idx), k)) < cfg.mask_prob, cfg.mask_value, c_all[idx])
            g, logits = model._graph(c_in)
            loss = g.neg(g.mean(g.row_sum(g.mul(g.const(onehot_all[idx]), g.log(g.softmax(logits))))))
            g.evaluate()
            for name, grad in g.backward(loss).items():
                v = velocity[name]
                v *= cfg.momentum
                v += grad
                params[name] -= cfg.lr * v
    return model


def masked_bayes_curve(bayes: MaskedBayes, split: Split, fractions, trials: int, seed: int = 0) -> InterventionCurve:
    def score(subset):
        pred = bayes.predict_proba(bayes.masked_input(split.c, subset)).argmax(axis=1)
        return float(np.mean(pred == split.y))

    return _run_curve(split.c.shape[1], fractions, trials, seed, score)


def save_masked_bayes(bayes: MaskedBayes, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = {**bayes.cfg.__dict__, "hidden_widths": list(bayes.cfg.hidden_widths)}
    doc = {"config": cfg,
           "arrays": {n: {"shape": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}
                      for n, a in bayes.params.items()}}
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def load_masked_bayes(path: str | Path) -> MaskedBayes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing Bayes model: expected {path}")
    doc = json.loads(path.read_text())
    params = {n: np.array(a["data"], dtype=np.float64).reshape(a["shape"]) for n, a in doc["arrays"].items()}
    return MaskedBayes(params, BayesApproxConfig(**doc["config"]))
