"""Loss terms of regularized self-training and their analytic gradients.

Every loss is a batch mean. Gradients are returned w.r.t. logits / features
/ prototypes; :func:`total_loss` backpropagates them into the network.

The pseudo-label switch ``g`` and the auxiliary targets ``q`` are treated as
constants (no gradient flows through them).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .model import PrototypeBank, TargetModel, backward, forward_batch
from .numerics import EPS, DegenerateInput, InvalidInput, log_softmax, softmax


@dataclass(frozen=True)
class PseudoLabelConfig:
    rho: float
    k: int

    def __post_init__(self):
        if self.k < 2:
            raise InvalidInput("need at least 2 classes")
        if self.rho < 0:
            raise InvalidInput("rho must be non-negative")

    @property
    def center(self) -> float:
        return float(np.log(self.k) / 2)

    @property
    def upper(self) -> float:
        return self.center + self.rho

    @property
    def lower(self) -> float:
        return self.center - self.rho


@dataclass(frozen=True)
class ObjectiveWeights:
    alpha: float
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInput(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0:
            raise InvalidInput(f"beta must be >= 0, got {self.beta}")


def pseudo_label_from_entropy(h, cfg: PseudoLabelConfig):
    h = np.asarray(h, dtype=np.float64)
    g = np.where(h > cfg.upper, -1, np.where(h < cfg.lower, 1, 0))
    return int(g) if g.ndim == 0 else g


def _entropy_from_logits(logits: np.ndarray):
    logp = log_softmax(logits)
    p = np.exp(logp)
    return -(p * logp).sum(axis=-1), p, logp


def pseudo_label(logits, cfg: PseudoLabelConfig):
    """-1 (push entropy up), +1 (push entropy down) or 0 (no pressure)."""
    h, _, _ = _entropy_from_logits(np.asarray(logits, dtype=np.float64))
    return pseudo_label_from_entropy(h, cfg)


def _check_batch(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise InvalidInput("expected an (n, K) batch of logits")
    return z


def distillation_loss(logits, source_probs, temperature: float = 1.0) -> Tuple[float, np.ndarray]:
    """Mean cross entropy from cached source probabilities to the model's softmax.

    With ``temperature != 1`` both sides are tempered: the model's logits are
    divided by T and the source probabilities are raised to 1/T and
    renormalized.
    """
    z = _check_batch(logits)
    t = np.asarray(source_probs, dtype=np.float64)
    if t.shape != z.shape:
        raise InvalidInput(f"length mismatch: logits {z.shape} vs targets {t.shape}")
    n = z.shape[0]
    if temperature != 1.0:
        t = np.power(np.maximum(t, EPS), 1.0 / temperature)
        t = t / t.sum(axis=1, keepdims=True)
        z = z / temperature
    logp = np.maximum(log_softmax(z), np.log(EPS))
    loss = float(-(t * logp).sum() / n)
    grad = (np.exp(log_softmax(z)) * t.sum(axis=1, keepdims=True) - t) / (n * temperature)
    return loss, grad


def self_training_loss(logits, cfg: PseudoLabelConfig) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean of ``g_i * H(softmax(z_i))`` with ``g`` from the current logits.

    Returns ``(loss, grad_logits, g)``.
    """
    z = _check_batch(logits)
    if z.shape[1] != cfg.k:
        raise InvalidInput(f"logits have {z.shape[1]} classes, config says {cfg.k}")
    n = z.shape[0]
    h, p, logp = _entropy_from_logits(z)
    g = pseudo_label_from_entropy(h, cfg)
    loss = float((g * h).sum() / n)
    # dH/dz_j = -p_j (ln p_j + H)
    dh = -p * (logp + h[:, None])
    grad = g[:, None] * dh / n
    return loss, grad, g


def _unit_rows(a: np.ndarray, what: str):
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0):
        raise DegenerateInput(f"zero-norm {what}")
    return a / norms[:, None], norms


def prototype_affinities(features, prototypes) -> np.ndarray:
    """Row-wise softmax over prototypes of the cosine similarity."""
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    W = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    fu, _ = _unit_rows(F, "feature")
    wu, _ = _unit_rows(W, "prototype")
    return softmax(fu @ wu.T)


def auxiliary_targets(p) -> np.ndarray:
    """Sharpen affinities by dividing each column by the sqrt of its mass, then renormalize rows."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    col = p.sum(axis=0)
    assert np.all(col >= 0)
    scale = np.zeros_like(col)
    pos = col > 0
    scale[pos] = 1.0 / np.sqrt(col[pos])
    w = p * scale[None, :]
    return w / w.sum(axis=1, keepdims=True)


def consistency_regularizer(features, prototypes, q) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean ``CE(q_i, p_i)``; returns ``(loss, grad_features, grad_prototypes)``."""
    F = np.asarray(features, dtype=np.float64)
    W = np.asarray(prototypes, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = F.shape[0]
    if q.shape != (n, W.shape[0]):
        raise InvalidInput(f"q has shape {q.shape}, expected {(n, W.shape[0])}")
    fu, fn = _unit_rows(F, "feature")
    wu, wn = _unit_rows(W, "prototype")
    d = fu @ wu.T
    logp = np.maximum(log_softmax(d), np.log(EPS))
    loss = float(-(q * logp).sum() / n)
    gd = (np.exp(log_softmax(d)) * q.sum(axis=1, keepdims=True) - q) / n
    g_fu = gd @ wu
    g_wu = gd.T @ fu
    # through x / ||x||
    g_f = (g_fu - fu * (fu * g_fu).sum(axis=1, keepdims=True)) / fn[:, None]
    g_w = (g_wu - wu * (wu * g_wu).sum(axis=1, keepdims=True)) / wn[:, None]
    return loss, g_f, g_w


@dataclass
class LossParts:
    distill: float
    self_train: float
    reg: float
    total: float


def total_loss(model: TargetModel, X, source_probs, weights: ObjectiveWeights,
               cfg: PseudoLabelConfig, bank: Optional[PrototypeBank] = None,
               q=None, temperature: float = 1.0) -> Tuple[LossParts, List[np.ndarray]]:
    """Weighted objective ``alpha*distill + (1-alpha)*self + beta*reg`` on one batch.

    Returns the loss parts and gradients in the order of
    ``model.arrays()`` followed by the prototypes when ``bank`` is given.
    Without a bank the regularizer is reported as 0.
    """
    feats, logits, acts = forward_batch(model, X)
    l_d, g_d = distillation_loss(logits, source_probs, temperature)
    l_s, g_s, _ = self_training_loss(logits, cfg)
    a, b = weights.alpha, weights.beta
    d_logits = a * g_d + (1.0 - a) * g_s
    d_feats = None
    l_r = 0.0
    g_w = None
    if bank is not None:
        if q is None:
            raise InvalidInput("q targets required with a prototype bank")
        l_r, g_f, g_w = consistency_regularizer(feats, bank.prototypes, q)
        d_feats = b * g_f
        g_w = b * g_w
    grads = backward(model, acts, d_logits, d_feats)
    if bank is not None:
        grads.append(g_w)
    total = a * l_d + (1.0 - a) * l_s + b * l_r
    return LossParts(l_d, l_s, l_r, total), grads
