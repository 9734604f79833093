"""Objectives and the SGD training loop.

MixCEM minimises ``task + lambda_c * bce + lambda_p * prior`` where the task
term is computed on the contextual bottleneck under random training-time
interventions (RandInt) and residual dropout, and the prior term scores the
label head on global embeddings mixed by the ground-truth concepts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import ConceptDataset, Split
from .models import Builder, ForwardOptions, Model, forward
from .tensorcore import NonFiniteError, ValueGraph

HISTORY_COLUMNS = ("epoch", "lr", "total", "task", "bce", "prior", "val_loss", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    lambda_c: float = 1.0
    lambda_p: float = 1.0
    p_int: float = 0.25
    p_drop: float = 0.5
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 4e-6
    batch_size: int = 64
    max_epochs: int = 150
    patience: int = 5
    val_freq: int = 5
    lr_decay_factor: float = 0.1
    plateau_epochs: int = 10
    class_weighted_bce: bool = False
    val_mc_samples: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_p < 0:
            raise ValueError("loss weights must be non-negative")
        if not (0 <= self.p_int <= 1 and 0 <= self.p_drop <= 1):
            raise ValueError("p_int and p_drop must lie in [0, 1]")
        if not self.lr > 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("need lr > 0, momentum in [0, 1) and weight_decay >= 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1 or self.val_freq < 1:
            raise ValueError("batch_size, patience and val_freq must be positive; max_epochs >= 0")
        if not 0 < self.lr_decay_factor <= 1 or self.plateau_epochs < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1] and plateau_epochs >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossResult:
    total: float
    task: float
    bce: float
    prior: float
    graph: ValueGraph
    loss: object

    def gradients(self) -> dict[str, np.ndarray]:
        return self.graph.backward(self.loss)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    stop_epoch: int = 0
    stop_reason: str = ""
    best_epoch: int | None = None

    def checkpoints(self) -> list[dict]:
        return [r for r in self.rows if r["val_loss"] is not None]

    def write_csv(self, path: str | Path, header: str | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in HISTORY_COLUMNS])
        return path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# -- loss pieces -------------------------------------------------------------

def _check_batch(c, y):
    c = np.asarray(c)
    if c.size == 0 or len(y) == 0:
        raise ValueError("batch must be non-empty")
    if np.any((c != 0) & (c != 1)):
        raise ValueError("concept labels must be binary")
    return c.astype(np.float64), np.asarray(y, dtype=np.int64)


def _cross_entropy(g: ValueGraph, y_prob, onehot, name):
    return g.neg(g.mean(g.row_sum(g.mul(g.const(onehot), g.log(y_prob)))), name=name)


def _bce(b: Builder, p, q, c, pos_weight=None, name="bce"):
    g = b.g
    pos = g.mul(g.const(c), b.log_prob(p))
    if pos_weight is not None:
        pos = g.mul(pos, g.const(pos_weight))
    neg = g.mul(g.const(1.0 - c), b.log_prob(q))
    return g.neg(g.mean(g.add(pos, neg)), name=name)


def _total(g, task, bce, prior, cfg: TrainConfig):
    total = g.add(task, g.scale(bce, cfg.lambda_c))
    if prior is not None:
        total = g.add(total, g.scale(prior, cfg.lambda_p))
    return g.add(total, g.const(0.0), name="total")


def _result(g: ValueGraph, total, task, bce, prior) -> LossResult:
    nodes = [total, task, bce] + ([prior] if prior is not None else [])
    vals = g.evaluate(outputs=nodes)
    f = {n.name: float(v) for n, v in zip(nodes, vals.values())}
    return LossResult(f["total"], f["task"], f["bce"], f.get("prior", 0.0), g, total)


def mixcem_loss(model: Model, batch, cfg: TrainConfig, rng: np.random.Generator,
                pos_weight=None, gate_open: bool = False) -> LossResult:
    """Three-term MixCEM objective on one batch.

    RandInt replaces each mixing coefficient with its label with probability
    ``p_int``; each concept's residual pair is dropped with probability
    ``p_drop``.  ``gate_open`` pins the entropy gate at 1 (used to compare
    against CEMs).
    """
    x, c, y = batch
    c, y = _check_batch(c, y)
    B, k = c.shape
    int_mask = (rng.random((B, k)) < cfg.p_int).astype(np.float64)
    keep = (rng.random((B, k)) >= cfg.p_drop).astype(np.float64)
    onehot = np.eye(model.config.L)[y]

    b = Builder(model)
    g = b.g
    nodes = b.mixcem_concepts(b.backbone(g.const(x)), calibrated=False)
    gate = None if gate_open else b.mixcem_gate(nodes["p"], nodes["q"])
    bn = b.mixcem_bottleneck(nodes["r_pos"], nodes["r_neg"], gate, nodes["p"], keep, int_mask, c)
    task = _cross_entropy(g, b.label_head(bn), onehot, "task")
    bce = _bce(b, nodes["p"], nodes["q"], c, pos_weight)
    prior = _cross_entropy(g, b.label_head(b.prior_bottleneck(c), name="y_prior"), onehot, "prior")
    return _result(g, _total(g, task, bce, prior, cfg), task, bce, prior)


def baseline_loss(model: Model, batch, cfg: TrainConfig, rng: np.random.Generator,
                  pos_weight=None) -> LossResult:
    """Joint objective ``task + lambda_c * bce`` for vanilla/hybrid CBMs and CEMs.

    CEMs additionally train with RandInt at ``p_int``.
    """
    x, c, y = batch
    c, y = _check_batch(c, y)
    B, k = c.shape
    onehot = np.eye(model.config.L)[y]
    b = Builder(model)
    g = b.g
    h = b.backbone(g.const(x))
    kind = model.config.kind
    if kind == "cem":
        int_mask = (rng.random((B, k)) < cfg.p_int).astype(np.float64)
        nodes = b.cem_concepts(h)
        bn = b.mix(b.mixing_coefficients(nodes["p"], int_mask, c), nodes["e_pos"], nodes["e_neg"])
    elif kind in ("vanilla_cbm", "hybrid_cbm"):
        nodes = b.sigmoid_concepts(h)
        bn = b.sigmoid_bottleneck(h, nodes["p"], None, None)
    else:
        raise ValueError("use mixcem_loss for mixcem models")
    task = _cross_entropy(g, b.label_head(bn), onehot, "task")
    bce = _bce(b, nodes["p"], nodes["q"], c, pos_weight)
    return _result(g, _total(g, task, bce, None, cfg), task, bce, None)


def loss_for(model: Model, batch, cfg: TrainConfig, rng, pos_weight=None) -> LossResult:
    fn = mixcem_loss if model.config.kind == "mixcem" else baseline_loss
    return fn(model, batch, cfg, rng, pos_weight)


def concept_pos_weight(c: np.ndarray) -> np.ndarray:
    """Per-concept weight ``n_neg / n_pos`` on the positive BCE term."""
    pos = c.sum(axis=0)
    neg = c.shape[0] - pos
    return np.where(pos > 0, neg / np.maximum(pos, 1), 1.0)


# -- loop -----------------------------------------------------------------------

def inference_options(model: Model, mc_samples: int = 50, rng_seed: int = 0, **kw) -> ForwardOptions:
    """Forward options matching how ``model`` was trained."""
    p_drop = float(model.meta.get("train", {}).get("p_drop", 0.0)) if model.config.kind == "mixcem" else 0.0
    calibrated = bool(model.meta.get("calibrated", False))
    return ForwardOptions(dropout_p=p_drop, mc_samples=mc_samples if model.config.kind == "mixcem" else 1,
                          rng_seed=rng_seed, calibrated=calibrated, **kw)


def accuracy(model: Model, split: Split, opts: ForwardOptions) -> float:
    out = forward(model, split.x, opts)
    return float(np.mean(out.y_prob.argmax(axis=1) == split.y))


def fingerprint(model: Model, cfg: TrainConfig, dataset_id: str = "") -> str:
    blob = json.dumps({"config": model.config.to_dict(), "train": cfg.to_dict(), "data": dataset_id},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train(model: Model, dataset: ConceptDataset, cfg: TrainConfig,
          dataset_id: str = "") -> tuple[Model, TrainHistory]:
    """SGD with momentum, plateau learning-rate decay and early stopping.

    Returns a new model holding the parameters of the best validation
    checkpoint, and the per-epoch history.
    """
    train_split, val_split = dataset.subset("train"), dataset.subset("val")
    if len(train_split) == 0 or len(val_split) == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    model = model.copy()
    model.meta["train"] = cfg.to_dict()
    model.meta["fingerprint"] = fingerprint(model, cfg, dataset_id)
    model.meta["calibrated"] = False
    history = TrainHistory()
    if cfg.max_epochs == 0:
        history.stop_reason = "max_epochs"
        return model, history

    pos_weight = concept_pos_weight(train_split.c) if cfg.class_weighted_bce else None
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & (2**64 - 1), 13]))
    velocity = {name: np.zeros_like(v) for name, v in model.params.items()}
    lr = cfg.lr
    best_train, since_improved = math.inf, 0
    best_val, best_params = math.inf, None
    val_opts = inference_options(model, mc_samples=cfg.val_mc_samples, rng_seed=cfg.seed)
    n = len(train_split)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(4)
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = (train_split.x[idx], train_split.c[idx], train_split.y[idx])
            try:
                res = loss_for(model, batch, cfg, rng, pos_weight)
                grads = res.gradients()
            except NonFiniteError as exc:
                history.stop_epoch, history.stop_reason = epoch, f"non-finite loss at epoch {epoch} batch {bi}"
                raise TrainingError(history.stop_reason) from exc
            for name, grad in grads.items():
                p = model.params[name]
                v = velocity[name]
                v *= cfg.momentum
                v += grad.reshape(p.shape) + cfg.weight_decay * p
                p -= lr * v
            sums += len(idx) * np.array([res.total, res.task, res.bce, res.prior])
        total, task, bce, prior = sums / n
        row = {"epoch": epoch, "lr": lr, "total": total, "task": task, "bce": bce, "prior": prior,
               "val_loss": None, "val_acc": None}
        history.rows.append(row)

        if total < best_train * (1 - 1e-4):
            best_train, since_improved = total, 0
        else:
            since_improved += 1
            if since_improved >= cfg.plateau_epochs:
                lr *= cfg.lr_decay_factor
                since_improved = 0
                history.events.append(f"epoch {epoch}: lr -> {lr!r}")

        if epoch % cfg.val_freq == 0 or epoch == cfg.max_epochs:
            val_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & (2**64 - 1), 17]))
            vres = loss_for(model, (val_split.x, val_split.c, val_split.y), cfg, val_rng, pos_weight)
            row["val_loss"] = vres.total
            row["val_acc"] = accuracy(model, val_split, val_opts)
            if vres.total < best_val:
                best_val = vres.total
                best_params = {k: v.copy() for k, v in model.params.items()}
                history.best_epoch = epoch
            elif epoch - history.best_epoch >= cfg.patience * cfg.val_freq:
                history.stop_epoch, history.stop_reason = epoch, "early_stopping"
                break
    else:
        history.stop_epoch, history.stop_reason = cfg.max_epochs, "max_epochs"

    if best_params is not None:
        model.params = best_params
    model.meta["best_epoch"] = history.best_epoch
    return model, history
