"""Task accuracy, concept ROC-AUC, entropy statistics and bottleneck shift."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .datagen import FeatureStats, Split, inject_salt_pepper
from .models import ForwardOptions, Model, bernoulli_entropy, forward

QUANTILES = (5, 25, 50, 75, 95)
REPORT_COLUMNS = ("model", "split", "shift", "sample_count", "task_accuracy", "mean_concept_auc",
                  "excluded_concepts", "mean_entropy", "entropy_q05", "entropy_q25", "entropy_q50",
                  "entropy_q75", "entropy_q95", "bottleneck_shift", "per_concept_auc")


def concept_roc_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC (ties count 1/2); ``None`` when labels hold one class."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(np.count_nonzero(labels))
    if n_pos == 0 or n_pos == labels.size:
        return None
    return _kernels.rank_auc(scores, labels)


def per_concept_auc(scores: np.ndarray, labels: np.ndarray) -> list[float | None]:
    return [concept_roc_auc(scores[:, i], labels[:, i]) for i in range(labels.shape[1])]


def mean_auc(aucs) -> tuple[float | None, int]:
    """Mean over defined AUCs and the number of excluded (undefined) concepts."""
    defined = [a for a in aucs if a is not None]
    return (float(np.mean(defined)) if defined else None), len(aucs) - len(defined)


def bottleneck_shift(id_bottlenecks, ood_bottlenecks) -> float:
    """Centroid displacement between OOD and ID rows, in units of mean ID spread."""
    a = np.asarray(id_bottlenecks, dtype=np.float64)
    b = np.asarray(ood_bottlenecks, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("bottleneck sets must be matrices of equal width")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each bottleneck set needs at least two rows")
    mu = a.mean(axis=0)
    spread = np.linalg.norm(a - mu, axis=1).mean()
    if spread == 0:
        raise ValueError("ID bottlenecks have zero spread; shift is undefined")
    return float(np.linalg.norm(b.mean(axis=0) - mu) / spread)


def entropy_summary(p_hat) -> tuple[float, np.ndarray]:
    h = bernoulli_entropy(np.asarray(p_hat, dtype=np.float64))
    h = np.atleast_1d(h).reshape(-1)
    return float(h.mean()), np.percentile(h, QUANTILES, method="linear")


@dataclass
class EvalReport:
    task_accuracy: float
    mean_concept_auc: float | None
    per_concept_auc: list[float | None]
    excluded_concepts: int
    mean_entropy: float
    entropy_quantiles: np.ndarray
    bottleneck_shift: float | None
    sample_count: int

    def row(self, model: str, split: str, shift: float) -> list[str]:
        def f(v):
            return "" if v is None else repr(float(v))
        return [model, split, repr(float(shift)), str(self.sample_count), f(self.task_accuracy),
                f(self.mean_concept_auc), str(self.excluded_concepts), f(self.mean_entropy),
                *[f(q) for q in self.entropy_quantiles], f(self.bottleneck_shift),
                ";".join(f(a) or "NA" for a in self.per_concept_auc)]


def evaluate(model: Model, split: Split, opts: ForwardOptions, shift: float | None = None,
             stats: FeatureStats | None = None, noise_seed: int = 0) -> EvalReport:
    """Metrics on ``split``; with ``shift`` the metrics describe the noised rows.

    Per-concept AUCs are computed on concept logits, which avoids ties from
    saturated probabilities.
    """
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    clean = forward(model, split.x, opts)
    out, shift_stat = clean, None
    if shift is not None:
        if stats is None:
            raise ValueError("a shift needs training feature stats")
        noisy = forward(model, inject_salt_pepper(split.x, shift, stats, noise_seed), opts)
        shift_stat = bottleneck_shift(clean.bottleneck, noisy.bottleneck)
        out = noisy
    aucs = per_concept_auc(out.logits, split.c)
    mean, excluded = mean_auc(aucs)
    ent_mean, ent_q = entropy_summary(out.p_hat)
    return EvalReport(
        task_accuracy=float(np.mean(out.y_prob.argmax(axis=1) == split.y)),
        mean_concept_auc=mean, per_concept_auc=aucs, excluded_concepts=excluded,
        mean_entropy=ent_mean, entropy_quantiles=ent_q, bottleneck_shift=shift_stat,
        sample_count=len(split),
    )


def write_reports(path: str | Path, rows: list[list[str]], header: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(rows)
    return path
