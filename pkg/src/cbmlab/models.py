"""Forward semantics of MixCEM and the baseline concept models.

Every model is a dict of named float64 arrays plus a :class:`ModelConfig`.
Forward passes are expressed as :class:`~cbmlab.tensorcore.ValueGraph`
programs so the same builders serve inference and training.

Kinds
-----
``vanilla_cbm``  sigmoid concept bottleneck, linear label head.
``hybrid_cbm``   vanilla bottleneck concatenated with ``k_prime`` free units.
``cem``          per-concept embedding generators mixed by concept probability.
``mixcem``       global embeddings plus entropy-gated residuals, with residual
                 dropout and Monte-Carlo inference.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensorcore import ValueGraph, sigmoid

KINDS = ("vanilla_cbm", "hybrid_cbm", "cem", "mixcem")
FORMAT_TAG = "cbmlab-model-v1"
EMBEDDING_KINDS = ("cem", "mixcem")


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    n_in: int
    k: int
    L: int
    m: int = 16
    backbone_widths: tuple[int, ...] = (64, 64)
    k_prime: int = 0
    seed: int = 0
    embedding_activation: str = "leaky_relu"

    def __post_init__(self):
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.m < 1 or self.k < 1 or self.L < 2 or self.n_in < 1:
            raise ValueError("m, k, n_in must be positive and L >= 2")
        if not self.backbone_widths or min(self.backbone_widths) < 1:
            raise ValueError("backbone needs at least one positive width")
        if self.k_prime < 0 or (self.k_prime and self.kind != "hybrid_cbm"):
            raise ValueError("k_prime must be >= 0 and is only meaningful for hybrid_cbm")
        if self.embedding_activation not in ("leaky_relu", "linear"):
            raise ValueError("embedding_activation must be 'leaky_relu' or 'linear'")

    @property
    def width(self) -> int:
        """Embedding width per concept (1 for the sigmoid bottlenecks)."""
        return self.m if self.kind in EMBEDDING_KINDS else 1

    @property
    def a(self) -> int:
        return self.backbone_widths[-1]

    @property
    def bottleneck_size(self) -> int:
        return self.k * self.width + (self.k_prime if self.kind == "hybrid_cbm" else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, json.loads(json.dumps(self.meta)))

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


@dataclass(frozen=True)
class InterventionMask:
    """Concepts ``concepts`` set to ``values`` (one value per concept, or one row per sample)."""
    concepts: tuple[int, ...]
    values: np.ndarray

    def __init__(self, concepts: Sequence[int], values):
        concepts = tuple(int(i) for i in concepts)
        values = np.asarray(values, dtype=np.float64)
        if len(set(concepts)) != len(concepts):
            raise ValueError("intervened concepts must be unique")
        if values.shape[-1:] != (len(concepts),) and not (values.size == 0 and not concepts):
            raise ValueError("need one intervention value per intervened concept")
        if np.any((values != 0) & (values != 1)):
            raise ValueError("intervention values must be binary")
        object.__setattr__(self, "concepts", concepts)
        object.__setattr__(self, "values", values)

    def dense(self, rows: int, k: int) -> tuple[np.ndarray, np.ndarray]:
        mask = np.zeros((rows, k))
        vals = np.zeros((rows, k))
        if self.concepts:
            idx = list(self.concepts)
            mask[:, idx] = 1.0
            vals[:, idx] = np.broadcast_to(self.values, (rows, len(idx)))
        return mask, vals


@dataclass(frozen=True)
class ForwardOptions:
    intervention: InterventionMask | None = None
    dropout_p: float = 0.0
    mc_samples: int = 1
    rng_seed: int = 0
    calibrated: bool = False
    keep_samples: bool = False

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout_p must lie in [0, 1]")


@dataclass
class ForwardOutput:
    p_hat: np.ndarray
    logits: np.ndarray
    entropy: np.ndarray
    bottleneck: np.ndarray
    y_prob: np.ndarray
    per_sample_bottlenecks: np.ndarray | None = None


# -- parameters ---------------------------------------------------------------

def param_shapes(config: ModelConfig) -> dict[str, tuple[tuple[int, ...], int | None]]:
    """``name -> (shape, fan_in)``; ``fan_in=None`` marks zero-initialised biases."""
    k, m, L, a = config.k, config.m, config.L, config.a
    shapes: dict[str, tuple[tuple[int, ...], int | None]] = {}
    fan = config.n_in
    for i, w in enumerate(config.backbone_widths):
        shapes[f"psi.W{i}"] = ((fan, w), fan)
        shapes[f"psi.b{i}"] = ((w,), None)
        fan = w
    if config.kind in ("vanilla_cbm", "hybrid_cbm"):
        shapes["concept.W"] = ((a, k), a)
        shapes["concept.b"] = ((k,), None)
        if config.kind == "hybrid_cbm" and config.k_prime:
            shapes["extra.W"] = ((a, config.k_prime), a)
            shapes["extra.b"] = ((config.k_prime,), None)
    elif config.kind == "cem":
        for sign in ("pos", "neg"):
            shapes[f"emb_{sign}.W"] = ((a, k * m), a)
            shapes[f"emb_{sign}.b"] = ((k * m,), None)
        shapes["v_s"] = ((2 * m,), 2 * m)
    else:
        # R_<sign>[:, i*m:(i+1)*m] holds the transposed residual map of concept i
        for sign in ("pos", "neg"):
            shapes[f"c_{sign}"] = ((k, m), m)
            shapes[f"R_{sign}"] = ((a, k * m), a)
            shapes[f"b_{sign}"] = ((k, m), None)
        shapes["v_s"] = ((2 * m,), 2 * m)
    D = config.bottleneck_size
    shapes["f.W"] = ((D, L), D)
    shapes["f.b"] = ((L,), None)
    if config.kind == "mixcem":
        shapes["platt_a"] = ((k,), None)
        shapes["platt_b"] = ((k,), None)
    return shapes


def init_model(config: ModelConfig) -> Model:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed & (2**64 - 1), 7]))
    params = {}
    for name, (shape, fan_in) in param_shapes(config).items():
        if fan_in is None:
            params[name] = np.ones(shape) if name == "platt_a" else np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
    return Model(config, params)


# -- constant routing matrices --------------------------------------------------

@lru_cache(maxsize=64)
def _routing(k: int, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``expand`` (k, km), ``collapse`` (km, k) and ``tile`` (m, km) 0/1 matrices."""
    expand = np.kron(np.eye(k), np.ones((1, m)))
    tile = np.tile(np.eye(m), (1, k))
    for arr in (expand, tile):
        arr.flags.writeable = False
    return expand, expand.T, tile


def bernoulli_entropy(p):
    """Base-2 entropy of a Bernoulli variable, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log2(p), 0.0) + np.where(p < 1, (1 - p) * np.log2(1 - p), 0.0))
    return h if h.ndim else float(h)


# -- graph builders ---------------------------------------------------------------

class Builder:
    """Adds a model's parameters and layers to a graph."""

    def __init__(self, model: Model, g: ValueGraph | None = None):
        self.model = model
        self.cfg = model.config
        self.g = g if g is not None else ValueGraph()
        self._nodes: dict[str, object] = {}
        self._logit_of: dict[str, object] = {}

    def p(self, name: str, flat: bool = False):
        if name not in self._nodes:
            arr = self.model.params[name]
            self._nodes[name] = self.g.param(name, arr.reshape(-1) if flat else arr)
        return self._nodes[name]

    def dense(self, h, prefix: str):
        return self.g.add(self.g.matmul(h, self.p(f"{prefix}.W")), self.p(f"{prefix}.b"))

    def backbone(self, x):
        h = x
        for i in range(len(self.cfg.backbone_widths)):
            h = self.g.leaky_relu(self.g.add(self.g.matmul(h, self.p(f"psi.W{i}")), self.p(f"psi.b{i}")))
        return h

    def routing(self):
        expand, collapse, tile = _routing(self.cfg.k, self.cfg.width)
        g = self.g
        if "_expand" not in self._nodes:
            self._nodes["_expand"] = g.const(expand)
            self._nodes["_collapse"] = g.const(collapse)
            self._nodes["_tile"] = g.const(tile)
        return self._nodes["_expand"], self._nodes["_collapse"], self._nodes["_tile"]

    def scorer(self, e_pos, e_neg):
        """Shared linear score ``v_s . [e_pos_i, e_neg_i]`` for every concept."""
        g, m = self.g, self.cfg.m
        _, collapse, tile = self.routing()
        v = self.p("v_s")
        v_pos = g.matmul(g.slice(v, 0, m), tile)
        v_neg = g.matmul(g.slice(v, m, 2 * m), tile)
        return g.add(g.matmul(g.mul(e_pos, v_pos), collapse), g.matmul(g.mul(e_neg, v_neg), collapse))

    def calibrate(self, z, calibrated: bool):
        if not calibrated or self.cfg.kind != "mixcem":
            return z
        g = self.g
        return g.add(g.mul(z, g.const(self.model.params["platt_a"])), g.const(self.model.params["platt_b"]))

    def probabilities(self, logit):
        """``p = sigmoid(z)`` and ``q = 1 - p``, both computed without cancellation."""
        g = self.g
        neg_logit = g.neg(logit)
        p = g.sigmoid(logit, name="p_hat")
        q = g.sigmoid(neg_logit)
        self._logit_of.update({p.name: logit, q.name: neg_logit})
        return p, q

    def log_prob(self, prob):
        """``log`` of a probability made by ``probabilities``, via log-sigmoid of its logit."""
        return self.g.log_sigmoid(self._logit_of[prob.name])

    def entropy(self, p, q):
        g = self.g
        nats = g.neg(g.add(g.mul(p, self.log_prob(p)), g.mul(q, self.log_prob(q))))
        return g.scale(nats, 1.0 / math.log(2.0), name="entropy")

    def mixing_coefficients(self, p, int_mask, int_vals):
        if int_mask is None:
            return p
        g = self.g
        return g.select(g.const(int_mask), g.const(int_vals), p, name="q_mix")

    def mix(self, q, c_pos, c_neg, name="bottleneck"):
        g = self.g
        expand, _, _ = self.routing()
        qe = g.matmul(q, expand)
        return g.add(g.mul(qe, c_pos), g.mul(g.one_minus(qe), c_neg), name=name)

    def label_head(self, bottleneck, name="y_prob"):
        return self.g.softmax(self.dense(bottleneck, "f"), name=name)

    def embedding_activation(self, z):
        if self.cfg.embedding_activation == "linear":
            return z
        return self.g.leaky_relu(z)

    def mixcem_concepts(self, h, calibrated: bool):
        g = self.g
        r_pos = g.add(g.matmul(h, self.p("R_pos")), self.p("b_pos", flat=True), name="r_pos")
        r_neg = g.add(g.matmul(h, self.p("R_neg")), self.p("b_neg", flat=True), name="r_neg")
        c_pos, c_neg = self.p("c_pos", flat=True), self.p("c_neg", flat=True)
        logit = self.calibrate(self.scorer(g.add(c_pos, r_pos), g.add(c_neg, r_neg)), calibrated)
        p, q = self.probabilities(logit)
        return {"r_pos": r_pos, "r_neg": r_neg, "logit": logit, "p": p, "q": q}

    def mixcem_gate(self, p, q):
        return self.g.one_minus(self.entropy(p, q), name="gate")

    def mixcem_bottleneck(self, r_pos, r_neg, gate, p, keep, int_mask, int_vals):
        """Contextual embeddings ``c_bar + gate * keep * r`` mixed by ``q``.

        ``gate=None`` holds the gate open at 1.
        """
        g = self.g
        expand, _, _ = self.routing()
        scale = g.const(keep) if gate is None else g.mul(gate, g.const(keep))
        se = g.matmul(scale, expand)
        c_pos = g.add(self.p("c_pos", flat=True), g.mul(se, r_pos))
        c_neg = g.add(self.p("c_neg", flat=True), g.mul(se, r_neg))
        return self.mix(self.mixing_coefficients(p, int_mask, int_vals), c_pos, c_neg)

    def prior_bottleneck(self, c, name="prior_bottleneck"):
        """Global embeddings mixed by ground-truth concepts; no input dependence."""
        return self.mix(self.g.const(c), self.p("c_pos", flat=True), self.p("c_neg", flat=True), name=name)

    def sigmoid_concepts(self, h):
        logit = self.dense(h, "concept")
        p, q = self.probabilities(logit)
        return {"logit": logit, "p": p, "q": q}

    def sigmoid_bottleneck(self, h, p, int_mask, int_vals):
        g = self.g
        q_mix = self.mixing_coefficients(p, int_mask, int_vals)
        if self.cfg.kind == "hybrid_cbm" and self.cfg.k_prime:
            extra = g.leaky_relu(self.dense(h, "extra"))
            return g.concat([q_mix, extra], name="bottleneck")
        return q_mix

    def cem_concepts(self, h):
        e_pos = self.embedding_activation(self.dense(h, "emb_pos"))
        e_neg = self.embedding_activation(self.dense(h, "emb_neg"))
        logit = self.scorer(e_pos, e_neg)
        p, q = self.probabilities(logit)
        return {"e_pos": e_pos, "e_neg": e_neg, "logit": logit, "p": p, "q": q}


def _check_intervention(config: ModelConfig, intervention: InterventionMask | None) -> None:
    if intervention is None:
        return
    for i in intervention.concepts:
        if config.kind == "hybrid_cbm" and config.k <= i < config.k + config.k_prime:
            raise ValueError(f"concept {i} is in the unaligned slice of the hybrid bottleneck and cannot be intervened")
        if not 0 <= i < config.k:
            raise ValueError(f"intervention index {i} out of range [0, {config.k})")


def _dense_intervention(config, intervention, rows):
    if intervention is None:
        return None, None
    return intervention.dense(rows, config.k)


def dropout_keep(rng_seed: int, sample: int, rows: int, k: int, dropout_p: float) -> np.ndarray:
    """Per-concept keep mask for one Monte-Carlo sample (stream keyed by seed and sample)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed) & (2**64 - 1), 11, int(sample)]))
    return (rng.random((rows, k)) >= dropout_p).astype(np.float64)


def forward(model: Model, x, opts: ForwardOptions | None = None) -> ForwardOutput:
    """Run any model kind on a batch ``x`` (rows are samples)."""
    opts = opts or ForwardOptions()
    cfg = model.config
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != cfg.n_in:
        raise ValueError(f"input width {x.shape[1]} does not match model width {cfg.n_in}")
    _check_intervention(cfg, opts.intervention)
    if cfg.kind == "mixcem":
        return mixcem_forward(model, x, opts)
    return baseline_forward(model, x, opts)


def _output(p, logit, bottleneck, y_prob, samples=None) -> ForwardOutput:
    return ForwardOutput(p_hat=p, logits=logit, entropy=bernoulli_entropy(p), bottleneck=bottleneck,
                         y_prob=y_prob, per_sample_bottlenecks=samples)


def mixcem_forward(model: Model, x, opts: ForwardOptions) -> ForwardOutput:
    cfg = model.config
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_intervention(cfg, opts.intervention)
    rows = x.shape[0]
    b = Builder(model)
    nodes = b.mixcem_concepts(b.backbone(b.g.input("x")), opts.calibrated)
    gate = b.mixcem_gate(nodes["p"], nodes["q"])
    out = b.g.evaluate({"x": x}, [nodes["r_pos"], nodes["r_neg"], nodes["p"], nodes["logit"], gate])
    r_pos, r_neg = out[nodes["r_pos"].name], out[nodes["r_neg"].name]
    p, logit, gate_v = out["p_hat"], out[nodes["logit"].name], out["gate"]
    int_mask, int_vals = _dense_intervention(cfg, opts.intervention, rows)

    # the concept stage is sample-independent; only the mixing stage is resampled
    bindings = {"r_pos": r_pos, "r_neg": r_neg, "gate": gate_v, "p": p}
    bsum = np.zeros((rows, cfg.bottleneck_size))
    ysum = np.zeros((rows, cfg.L))
    samples = np.empty((opts.mc_samples, rows, cfg.bottleneck_size)) if opts.keep_samples else None
    for s in range(opts.mc_samples):
        keep = dropout_keep(opts.rng_seed, s, rows, cfg.k, opts.dropout_p)
        head = Builder(model)
        g = head.g
        bn = head.mixcem_bottleneck(g.input("r_pos"), g.input("r_neg"), g.input("gate"), g.input("p"),
                                    keep, int_mask, int_vals)
        yp = head.label_head(bn)
        res = g.evaluate(bindings, [bn, yp])
        bsum += res["bottleneck"]
        ysum += res["y_prob"]
        if samples is not None:
            samples[s] = res["bottleneck"]
    M = opts.mc_samples
    return _output(p, logit, bsum / M, ysum / M, samples)


def baseline_forward(model: Model, x, opts: ForwardOptions) -> ForwardOutput:
    """Deterministic forward for vanilla/hybrid CBMs and CEMs (no MC sampling)."""
    cfg = model.config
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_intervention(cfg, opts.intervention)
    int_mask, int_vals = _dense_intervention(cfg, opts.intervention, x.shape[0])
    b = Builder(model)
    h = b.backbone(b.g.input("x"))
    if cfg.kind == "cem":
        nodes = b.cem_concepts(h)
        bn = b.mix(b.mixing_coefficients(nodes["p"], int_mask, int_vals), nodes["e_pos"], nodes["e_neg"])
    elif cfg.kind in ("vanilla_cbm", "hybrid_cbm"):
        nodes = b.sigmoid_concepts(h)
        bn = b.sigmoid_bottleneck(h, nodes["p"], int_mask, int_vals)
    else:
        raise ValueError("use mixcem_forward for mixcem models")
    yp = b.label_head(bn)
    out = b.g.evaluate({"x": x}, [nodes["p"], nodes["logit"], bn, yp])
    samples = None
    if opts.keep_samples:
        samples = np.broadcast_to(out[bn.name], (opts.mc_samples,) + out[bn.name].shape).copy()
    return _output(out["p_hat"], out[nodes["logit"].name], out[bn.name], out["y_prob"], samples)


def prior_bottleneck(model: Model, c) -> np.ndarray:
    """``[c_i * cbar_i+ + (1 - c_i) * cbar_i-]_i`` for binary concept vector(s) ``c``."""
    c = np.asarray(c, dtype=np.float64)
    if np.any((c != 0) & (c != 1)):
        raise ValueError("prior bottleneck needs binary concepts")
    if model.config.kind != "mixcem":
        raise ValueError("prior bottleneck is defined for mixcem models")
    single = c.ndim == 1
    c2 = np.atleast_2d(c)
    k, m = model.config.k, model.config.m
    pos, neg = model.params["c_pos"], model.params["c_neg"]
    out = (c2[:, :, None] * pos[None] + (1.0 - c2[:, :, None]) * neg[None]).reshape(c2.shape[0], k * m)
    return out[0] if single else out


def apply_platt(z, a, b):
    """Platt-scaled probability ``sigmoid(a * z + b)``."""
    return sigmoid(np.asarray(a) * np.asarray(z) + np.asarray(b))


# -- model files -----------------------------------------------------------------

def save_model(model: Model, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "meta": {"format": FORMAT_TAG, "kind": model.config.kind, "config": model.config.to_dict(),
                 **model.meta},
        "arrays": {name: {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}
                   for name, arr in model.params.items()},
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def load_model(path: str | Path) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing model file: expected {path}")
    doc = json.loads(path.read_text())
    meta = dict(doc["meta"])
    if meta.pop("format", None) != FORMAT_TAG:
        raise ValueError(f"{path} is not a {FORMAT_TAG} file")
    meta.pop("kind", None)
    config = ModelConfig(**meta.pop("config"))
    params = {name: np.array(a["data"], dtype=np.float64).reshape(a["shape"]) for name, a in doc["arrays"].items()}
    return Model(config, params, meta)
