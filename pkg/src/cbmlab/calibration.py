"""Post-training Platt scaling of MixCEM concept logits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import Split
from .models import Model, apply_platt, forward, ForwardOptions
from .tensorcore import sigmoid

__all__ = ["PlattParams", "fit_platt", "fit_platt_logits", "apply_platt", "expected_calibration_error", "concept_logits",
           "calibrate_model"]


@dataclass
class PlattParams:
    a: np.ndarray
    b: np.ndarray
    losses: list[float] = field(default_factory=list)

    @classmethod
    def identity(cls, k: int) -> "PlattParams":
        return cls(np.ones(k), np.zeros(k))


def concept_logits(model: Model, x) -> np.ndarray:
    """Raw (uncalibrated) concept logits; they do not depend on residual dropout."""
    return forward(model, x, ForwardOptions(calibrated=False)).logits


def _mean_bce(z, c, a, b) -> float:
    u = a * z + b
    # log(1 + exp(-|u|)) form keeps saturated logits finite
    loss = np.logaddexp(0.0, u) - c * u
    return float(loss.mean())


def fit_platt(model: Model, val: Split, epochs: int = 30, lr: float = 0.01) -> PlattParams:
    """Fit per-concept ``(a, b)`` by full-batch gradient descent on validation BCE.

    All other model parameters stay frozen; ``epochs=0`` returns the identity.
    ``losses[e]`` is the validation BCE before epoch ``e`` (plus the final one).
    """
    if len(val) == 0:
        raise ValueError("validation split is empty")
    return fit_platt_logits(concept_logits(model, val.x), val.c, epochs, lr)


def fit_platt_logits(z, c, epochs: int = 30, lr: float = 0.01) -> PlattParams:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    c = np.asarray(c, dtype=np.float64).reshape(z.shape)
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if z.shape[0] == 0:
        raise ValueError("no calibration rows")
    params = PlattParams.identity(z.shape[1])
    params.losses.append(_mean_bce(z, c, params.a, params.b))
    n = z.shape[0]
    for _ in range(epochs):
        resid = sigmoid(params.a * z + params.b) - c
        params.a = params.a - lr * (resid * z).sum(axis=0) / n
        params.b = params.b - lr * resid.sum(axis=0) / n
        params.losses.append(_mean_bce(z, c, params.a, params.b))
    return params


def calibrate_model(model: Model, platt: PlattParams) -> Model:
    """Copy of ``model`` with Platt parameters installed and marked calibrated."""
    out = model.copy()
    out.params["platt_a"] = np.asarray(platt.a, dtype=np.float64).copy()
    out.params["platt_b"] = np.asarray(platt.b, dtype=np.float64).copy()
    out.meta["calibrated"] = True
    return out


def expected_calibration_error(probs, labels, bins: int = 10) -> float:
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if probs.shape != labels.shape:
        raise ValueError("probs and labels must have the same length")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if probs.size == 0:
        return 0.0
    which = np.minimum((probs * bins).astype(np.int64), bins - 1)
    ece = 0.0
    for i in range(bins):
        sel = which == i
        if sel.any():
            ece += sel.mean() * abs(labels[sel].mean() - probs[sel].mean())
    return float(ece)
