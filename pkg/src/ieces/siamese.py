"""Weight-shared sample/template branches, code distance and the margin loss.

The template branch is always evaluated without gradient recording, so the
per-class template codes behave as constants during the backward pass of the
sample branch.  Losses are written in terms of the squared distance, which
keeps them smooth at zero distance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .encoder import EncoderParams, EncodeTrace, encode_batched
from .tensor import Tensor

TEMPLATE_MODE = "template"
EMA_MODE = "ema"


@dataclass(frozen=True)
class SiameseConfig:
    margin: float = 6.25  # squared-distance units
    alpha: float = 0.1
    negatives: int = 1
    mode: str = TEMPLATE_MODE
    ema_decay: float = 0.99
    refresh: str = "epoch"  # "step" re-encodes templates before every update

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.negatives < 1:
            raise ValueError(f"need at least one negative per sample, got {self.negatives}")
        if self.mode not in (TEMPLATE_MODE, EMA_MODE):
            raise ValueError(f"unknown template mode {self.mode!r}")
        if not 0 < self.ema_decay < 1:
            raise ValueError(f"EMA decay must lie in (0, 1), got {self.ema_decay}")
        if self.refresh not in ("step", "epoch"):
            raise ValueError(f"refresh must be 'step' or 'epoch', got {self.refresh!r}")


@dataclass(frozen=True)
class SamplePair:
    sample_code: np.ndarray
    template_code: np.ndarray
    gamma: int  # 0 = same class, 1 = different class
    sample_index: int = -1
    template_class: int = -1


class TemplateCodebook:
    """One code per class, stored as a constant C x code_length array."""

    def __init__(self, codes: np.ndarray):
        codes = np.asarray(codes)
        if codes.ndim != 2 or len(codes) < 1:
            raise ValueError(f"codebook must be C x code_length, got shape {codes.shape}")
        self.codes = codes

    @property
    def num_classes(self) -> int:
        return len(self.codes)

    def __getitem__(self, cls: int) -> np.ndarray:
        if not 0 <= cls < len(self.codes):
            raise KeyError(f"class {cls} has no template code")
        return self.codes[cls]

    def copy(self) -> "TemplateCodebook":
        return TemplateCodebook(self.codes.copy())


def distance(a, b) -> float:
    """Euclidean distance between two codes."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"code length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def contrastive_loss(d: float, gamma: int, margin: float) -> float:
    """Margin loss on one distance: D^2 for positives, max(0, m - D^2) for negatives."""
    if gamma not in (0, 1):
        raise ValueError(f"gamma must be 0 or 1, got {gamma!r}")
    if d < 0 or not margin > 0:
        raise ValueError("distance must be non-negative and margin positive")
    sq = d * d
    if gamma == 0:
        return sq
    return margin - sq if sq < margin else 0.0


def squared_distances(a: Tensor, b) -> Tensor:
    """Row-wise squared distance between a B x K tensor and a B x K constant/tensor."""
    diff = a - b
    return (diff * diff).sum(axis=-1)


def contrastive_loss_batch(sample_codes: Tensor, template_codes, gamma: np.ndarray, margin: float) -> Tensor:
    """Mean margin loss over aligned rows of sample and template codes."""
    gamma = np.asarray(gamma)
    if np.any((gamma != 0) & (gamma != 1)):
        raise ValueError("gamma entries must be 0 or 1")
    sq = squared_distances(sample_codes, template_codes)
    g = gamma.astype(sq.dtype)
    hinge = T.relu(margin - sq)
    return ((1.0 - g) * sq + g * hinge).mean()


def pair_indices(labels: Sequence[int], num_classes: int, k: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index form of the pairing: (sample row, template class, gamma) arrays.

    Each sample yields its own-class positive followed by ``k`` distinct
    negative classes drawn uniformly without replacement.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes < k + 1:
        raise ValueError(f"{num_classes} templates cannot supply {k} negatives per sample")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"sample classes {sorted(set(labels.tolist()))} not all templated (C={num_classes})")
    rng = np.random.default_rng(rng)
    rows, classes, gammas = [], [], []
    for i, y in enumerate(labels):
        others = np.delete(np.arange(num_classes), y)
        neg = rng.choice(others, size=k, replace=False)
        rows.extend([i] * (k + 1))
        classes.append(y)
        classes.extend(neg.tolist())
        gammas.extend([0] + [1] * k)
    return np.asarray(rows, dtype=np.int64), np.asarray(classes, dtype=np.int64), np.asarray(gammas, dtype=np.int64)


def pair_batch(batch: Sequence[tuple[np.ndarray, int]], codebook: TemplateCodebook, k: int, seed) -> list[SamplePair]:
    labels = [int(c) for _, c in batch]
    missing = sorted({c for c in labels if not 0 <= c < codebook.num_classes})
    if missing:
        raise ValueError(f"no template for classes {missing}")
    rows, classes, gammas = pair_indices(labels, codebook.num_classes, k, seed)
    return [SamplePair(np.asarray(batch[r][0]), codebook[c], int(g), int(r), int(c))
            for r, c, g in zip(rows, classes, gammas)]


def encode_templates(params: EncoderParams, templates, trace: EncodeTrace | None = None) -> TemplateCodebook:
    """Encode one template per class through the shared encoder with recording off.

    ``templates`` is a class-indexed sequence of images or a mapping class -> image
    that must cover 0..C-1.
    """
    if isinstance(templates, Mapping):
        expected = list(range(len(templates)))
        if sorted(templates) != expected:
            missing = sorted(set(expected) - set(templates))
            raise ValueError(f"template set is missing classes {missing or sorted(templates)}")
        images = [templates[c] for c in expected]
    else:
        images = list(templates)
    if not images:
        raise ValueError("template set is empty")
    pixels = np.stack([getattr(im, "pixels", im) for im in images])
    return TemplateCodebook(encode_batched(params, pixels, trace=trace, role="template"))


def update_prototypes_ema(codebook: TemplateCodebook, cls: int, code, decay: float) -> TemplateCodebook:
    """Exponential moving average of one class prototype towards ``code``; returns a new codebook."""
    if not 0 < decay < 1:
        raise ValueError(f"decay must lie in (0, 1), got {decay}")
    if not 0 <= cls < codebook.num_classes:
        raise KeyError(f"class {cls} has no prototype")
    out = codebook.copy()
    code = np.asarray(code.data if isinstance(code, Tensor) else code, dtype=out.codes.dtype)
    out.codes[cls] = decay * out.codes[cls] + (1.0 - decay) * code
    return out


def combined_loss(sim, cls, alpha: float):
    """alpha * L_sim + L_class (works on floats and on tensors)."""
    return alpha * sim + cls
