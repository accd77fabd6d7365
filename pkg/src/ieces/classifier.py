"""Softmax classification head over feature codes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import fan_in_uniform
from .tensor import Tensor


@dataclass
class ClassifierParams:
    weight: Tensor  # C x code_length
    bias: Tensor  # C

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"classifier weight {self.weight.shape} and bias {self.bias.shape} disagree")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def tensors(self) -> dict[str, Tensor]:
        return {"classifier.weight": self.weight, "classifier.bias": self.bias}


@dataclass(frozen=True)
class Prediction:
    class_index: int
    probabilities: np.ndarray
    max_probability: float


def build_classifier(num_classes: int, code_length: int = 256, seed=0, dtype=None) -> ClassifierParams:
    if num_classes < 1 or code_length < 1:
        raise ValueError("classifier needs at least one class and one code dimension")
    dtype = np.dtype(dtype or T.get_default_dtype())
    rng = np.random.default_rng(seed)
    w = fan_in_uniform((num_classes, code_length), rng, dtype)
    return ClassifierParams(Tensor(w, requires_grad=True, name="classifier.weight"),
                            Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True, name="classifier.bias"))


def classify_logits(params: ClassifierParams, code) -> Tensor:
    """Z = W code + b, for one code or a batch of codes."""
    code = code if isinstance(code, Tensor) else Tensor(np.asarray(code), dtype=params.weight.dtype)
    return T.linear(code, params.weight, params.bias)


def prediction_from_logits(logits: np.ndarray) -> Prediction:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    p = e / e.sum()
    idx = int(np.argmax(p))  # first index on ties
    return Prediction(idx, p, float(p[idx]))


def predict(params: ClassifierParams, code) -> Prediction:
    with T.no_grad():
        z = classify_logits(params, code).data
    if z.ndim != 1:
        raise ValueError("predict takes a single code; use predict_batch for batches")
    return prediction_from_logits(z)


def predict_batch(params: ClassifierParams, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax classes and probability rows for a batch of codes."""
    with T.no_grad():
        z = classify_logits(params, Tensor(codes, dtype=params.weight.dtype)).data.astype(np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return p.argmax(axis=1), p


def class_loss(params: ClassifierParams, code, target) -> Tensor:
    """Mean cross-entropy of softmax(W code + b) against integer target(s)."""
    logits = classify_logits(params, code)
    return T.cross_entropy(T.softmax(logits), target)
