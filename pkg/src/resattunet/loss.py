"""Class-imbalance-aware segmentation losses over raw logits.

Label 0 marks unannotated pixels; labels 1..K map to logit channels 0..K-1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, record

IGNORE_INDEX = 0


class LossError(ValueError):
    pass


@dataclass
class ClassWeights:
    names: list[str]
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.names) != len(self.weights):
            raise ValueError("names and weights differ in length")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights <= 0):
            raise ValueError("class weights must be finite and positive")

    def to_json(self) -> str:
        return json.dumps({n: float(w) for n, w in zip(self.names, self.weights)}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ClassWeights":
        d = json.loads(text)
        return cls(list(d), np.array(list(d.values()), dtype=np.float64))


@dataclass
class LossValue:
    tensor: Tensor
    valid_pixel_count: int
    normalizer: float

    @property
    def value(self) -> float:
        return float(self.tensor.data.reshape(-1)[0])


def class_weights_from_counts(counts, names=None) -> ClassWeights:
    """Inverse-log-frequency weights ``1 / ln(1.02 + count / total)``."""
    if isinstance(counts, dict):
        names = list(counts) if names is None else names
        counts = [counts[n] for n in names]
    c = np.asarray(counts, dtype=np.float64)
    if np.any(c < 0):
        raise LossError("class counts must be nonnegative")
    total = c.sum()
    if total <= 0:
        raise LossError("class counts sum to zero")
    names = [str(i + 1) for i in range(len(c))] if names is None else list(names)
    return ClassWeights(names, 1.0 / np.log(1.02 + c / total))


def omega_weight(p) -> float:
    """Binary positive-class weight ``(N - sum p) / sum p``."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    s = p.sum()
    if s == 0:
        raise LossError("omega undefined: predictions sum to zero")
    return float((p.size - s) / s)


def _valid_logits(logits: Tensor, labels: np.ndarray):
    if logits.data.ndim != 4:
        raise LossError(f"logits must be (B, K, H, W), got {logits.shape}")
    B, K, H, W = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B, H, W):
        raise LossError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > K):
        bad = np.argwhere((labels < 0) | (labels > K))[0]
        raise LossError(f"label {labels[tuple(bad)]} at {tuple(bad)} outside 0..{K}")
    valid = labels != IGNORE_INDEX
    n = int(valid.sum())
    if n == 0:
        raise LossError("every pixel is ignored")
    z = np.moveaxis(logits.data, 1, -1)[valid]
    target = labels[valid].astype(np.intp) - 1
    return z, target, valid


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _scatter(logits: Tensor, valid: np.ndarray, gz: np.ndarray) -> np.ndarray:
    full = np.zeros(np.moveaxis(logits.data, 1, -1).shape, dtype=logits.dtype)
    full[valid] = gz
    return np.ascontiguousarray(np.moveaxis(full, -1, 1))


def _emit(logits, valid, value, gz, n, normalizer) -> LossValue:
    out = Tensor(np.asarray(value, dtype=logits.dtype), dtype=logits.dtype)
    record((logits,), (out,), lambda g: (_scatter(logits, valid, gz * g),))
    return LossValue(out, n, normalizer)


def _weighted_mean(values: np.ndarray, pixel_weights: np.ndarray):
    norm = pixel_weights.sum()
    return (pixel_weights * values).sum() / norm, norm


def weighted_cross_entropy(logits: Tensor, labels, weights=None) -> LossValue:
    """Weighted mean of ``-log softmax(logits)[true class]`` over valid pixels.

    The mean is normalized by the sum of applied weights. Weights are scaled
    by their maximum first, which leaves the value unchanged but makes
    uniform weights reduce exactly to the unweighted loss.
    """
    z, t, valid = _valid_logits(logits, labels)
    K = logits.shape[1]
    if weights is None:
        w = np.ones(K, dtype=z.dtype)
    else:
        w = np.asarray(weights.weights if isinstance(weights, ClassWeights) else weights, dtype=np.float64)
        if w.shape != (K,):
            raise LossError(f"expected {K} class weights, got {w.shape}")
        w = (w / w.max()).astype(z.dtype)
    logp = _log_softmax(z)
    rows = np.arange(t.size)
    nll = -logp[rows, t]
    pw = w[t]
    value, norm = _weighted_mean(nll, pw)
    gz = np.exp(logp)
    gz[rows, t] -= 1
    gz *= (pw / norm)[:, None]
    return _emit(logits, valid, value, gz, t.size, float(norm))


def cross_entropy(logits: Tensor, labels) -> LossValue:
    return weighted_cross_entropy(logits, labels, None)


def focal_loss(logits: Tensor, labels, gamma: float = 2.0) -> LossValue:
    """Mean of ``-(1 - p_t)^gamma log p_t`` over valid pixels."""
    if gamma < 0:
        raise LossError("gamma must be >= 0")
    z, t, valid = _valid_logits(logits, labels)
    logp = _log_softmax(z)
    rows = np.arange(t.size)
    nll = -logp[rows, t]
    pt = np.exp(-nll)
    q = 1 - pt
    g = z.dtype.type(gamma)
    mod = q ** g
    value, norm = _weighted_mean(mod * nll, np.ones_like(nll))
    # d/dz_j = [gamma (1-p)^(gamma-1) p log p - (1-p)^gamma] (delta_tj - p_j)
    with np.errstate(divide="ignore", invalid="ignore"):
        extra = np.where(q > 0, g * q ** (g - 1) * pt * (-nll), 0) if gamma else np.zeros_like(q)
    coef = (extra - mod) / norm
    gz = -np.exp(logp)
    gz[rows, t] += 1
    gz *= coef[:, None]
    return _emit(logits, valid, value, gz.astype(z.dtype), t.size, float(norm))


def dice_loss(logits: Tensor, labels, eps: float = 1.0) -> LossValue:
    """Mean soft-dice loss over the classes present in ``labels``."""
    z, t, valid = _valid_logits(logits, labels)
    K = logits.shape[1]
    p = np.exp(_log_softmax(z))
    y = np.zeros_like(p)
    y[np.arange(t.size), t] = 1
    present = np.bincount(t, minlength=K) > 0
    inter = (p * y).sum(axis=0)
    denom = p.sum(axis=0) + y.sum(axis=0) + eps
    d = 1 - (2 * inter + eps) / denom
    n_present = int(present.sum())
    value = d[present].sum() / n_present
    # dL/dp_{n,c} for present classes, then through the softmax Jacobian
    gp = -(2 * y * denom - (2 * inter + eps)) / denom**2
    gp[:, ~present] = 0
    gp /= n_present
    gz = p * (gp - (p * gp).sum(axis=1, keepdims=True))
    return _emit(logits, valid, value, gz.astype(z.dtype), t.size, float(t.size))


def xent_plus_dice(logits: Tensor, labels, weights=None, eps: float = 1.0) -> LossValue:
    ce = weighted_cross_entropy(logits, labels, weights)
    dl = dice_loss(logits, labels, eps)
    value = ce.tensor.data + dl.tensor.data
    out = Tensor(np.asarray(value, dtype=logits.dtype), dtype=logits.dtype)
    record((ce.tensor, dl.tensor), (out,), lambda g: (g, g))
    return LossValue(out, ce.valid_pixel_count, ce.normalizer)
