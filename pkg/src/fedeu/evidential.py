"""Dirichlet evidential losses and uncertainty.

Class axis is 1 throughout: evidence, alpha and labels are [B, C, H, W].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, tensor as T
from .errors import ConfigError, DomainError, LabelError, ShapeError
from .tensor import Tensor


@dataclass
class DirichletOutput:
    evidence: Tensor
    alpha: Tensor
    strength: Tensor  # [B, 1, H, W]; kept with the class axis for broadcasting

    @classmethod
    def from_evidence(cls, evidence):
        evidence = T.as_tensor(evidence)
        if evidence.ndim != 4:
            raise ShapeError(f"evidence must be [B, C, H, W], got {evidence.shape}")
        if np.any(evidence.data < 0):
            raise DomainError("evidence must be non-negative")
        alpha = T.add(evidence, 1.0)
        return cls(evidence, alpha, T.sum(alpha, axis=1, keepdims=True))

    @property
    def num_classes(self):
        return self.alpha.shape[1]

    def expected_probability(self):
        return T.div(self.alpha, self.strength)


@dataclass(frozen=True)
class LossConfig:
    mu: float = 0.8
    anneal_rounds: int = 10
    tau_fraction: float = 0.1

    def __post_init__(self):
        if self.mu < 0:
            raise ConfigError("loss.mu must be >= 0")
        if self.anneal_rounds < 0:
            raise ConfigError("loss.anneal_rounds must be >= 0")
        if not 0 < self.tau_fraction <= 1:
            raise ConfigError("loss.tau_fraction must lie in (0, 1]")

    def kl_weight(self, t):
        """KL annealing coefficient: min(1, t / anneal_rounds)."""
        if self.anneal_rounds == 0:
            return 1.0
        return min(1.0, t / self.anneal_rounds)


def uncertainty(out: DirichletOutput) -> Tensor:
    """Per-pixel U = C / S, shape [B, H, W]."""
    s = out.strength.data[:, 0]
    return Tensor(out.num_classes / s)


def one_hot_labels(mask, num_classes):
    """Integer mask [B, H, W] -> float32 one-hot [B, C, H, W]."""
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) >= num_classes:
        raise LabelError(f"mask labels must lie in [0, {num_classes})")
    return (np.arange(num_classes)[None, :, None, None] == mask[:, None]).astype(np.float32)


def _check_one_hot(y, like):
    y = T.as_tensor(y, like=like)
    if y.shape != like.shape:
        raise ShapeError(f"labels shape {y.shape} != {like.shape}")
    d = y.data
    if not (np.all((d == 0) | (d == 1)) and np.all(d.sum(axis=1) == 1)):
        raise LabelError("labels must be one-hot over the class axis")
    return y


def bayes_risk_loss(out: DirichletOutput, y) -> Tensor:
    """Mean over pixels of E_{p~Dir(alpha)} ||y - p||^2 in closed form."""
    y = _check_one_hot(y, out.alpha)
    alpha, s = out.alpha, out.strength
    p = T.div(alpha, s)
    err = T.mul(T.sub(y, p), T.sub(y, p))
    var = T.div(T.mul(alpha, T.sub(s, alpha)), T.mul(T.mul(s, s), T.add(s, 1.0)))
    per_pixel = T.sum(T.add(err, var), axis=1)
    return T.mean(per_pixel)


def tilde_alpha(out: DirichletOutput, y) -> Tensor:
    """Alpha with the true-class evidence removed: y + (1 - y) * alpha."""
    y = _check_one_hot(y, out.alpha)
    return T.add(y, T.mul(T.sub(1.0, y), out.alpha))


def kl_to_uniform(alpha_tilde) -> Tensor:
    """Mean over pixels of KL(Dir(alpha_tilde) || Dir(1, ..., 1))."""
    a = T.as_tensor(alpha_tilde)
    if a.ndim < 2:
        raise ShapeError(f"alpha must have a class axis at position 1, got {a.shape}")
    if np.any(a.data < 1):
        raise DomainError("kl_to_uniform requires alpha >= 1 everywhere")
    c = a.shape[1]
    s = T.sum(a, axis=1, keepdims=True)
    log_norm = T.sub(T.lgamma(s), T.sum(T.lgamma(a), axis=1, keepdims=True))
    log_norm = T.sub(log_norm, float(_lgamma_int(c)))
    digamma_term = T.mul(T.sub(a, 1.0), T.sub(T.digamma(a), T.digamma(s)))
    per_pixel = T.add(log_norm, T.sum(digamma_term, axis=1, keepdims=True))
    return T.mean(per_pixel)


def _lgamma_int(c):
    # same kernel as T.lgamma so that KL(Dir(1) || Dir(1)) cancels to exactly 0
    return float(kernels.lgamma(np.array([float(c)]))[0])


def evidential_loss(out: DirichletOutput, y, t: int, cfg: LossConfig) -> Tensor:
    risk = bayes_risk_loss(out, y)
    lam = cfg.kl_weight(t)
    if lam == 0.0:
        return risk
    return T.add(risk, T.mul(kl_to_uniform(tilde_alpha(out, y)), lam))


@dataclass
class LossTerms:
    total: Tensor
    seg: Tensor
    eu: Tensor


def segmentation_loss(seg_logits, y) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against one-hot labels."""
    return T.mean(T.bce_with_logits(seg_logits, y))


def combined_loss(seg_logits, out: DirichletOutput, y, t: int, cfg: LossConfig) -> LossTerms:
    """L_seg + mu * L_eu.

    The two terms read disjoint heads, so backpropagating the sum routes the
    seg gradient away from the EU head and vice versa; the frozen encoder is
    never a gradient leaf.
    """
    seg = segmentation_loss(seg_logits, y)
    eu = evidential_loss(out, y, t, cfg)
    return LossTerms(T.add(seg, T.mul(eu, cfg.mu)), seg, eu)
