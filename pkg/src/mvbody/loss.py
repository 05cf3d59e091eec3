"""Soft-margin triplet-center loss (SMTCL) combined with cross-entropy.

SMTCL pulls each sample's fused feature vector toward its own trainable class
center and away from the opposite one. The per-sample weight is
sigmoid(beta * (D_own - D_other)): smooth, bounded, exactly 0.5 when the
sample is equidistant, and > 0.5 for hard samples sitting closer to the wrong
center. The loss is differentiable w.r.t. features and centers; a 1e-12
epsilon inside the square root keeps gradients finite when a feature
coincides with a center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

DIST_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda_smtcl: float = 0.1
    beta: float = 1.0
    class_weights: tuple | None = None  # None -> inverse prevalence at train time

    def validate(self) -> "LossConfig":
        if self.lambda_smtcl < 0:
            raise ValueError(f"lambda_smtcl must be >= 0, got {self.lambda_smtcl}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        return self


def init_centers(width: int, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Trainable class centers, one per class, normal(0, 0.02)."""
    return Tensor((rng.standard_normal((2, width)) * 0.02).astype(dtype), requires_grad=True)


def _center_distances(features: Tensor, labels: np.ndarray, centers: Tensor):
    m, w = features.shape
    if centers.shape != (2, w):
        raise ShapeError(f"centers {centers.shape} incompatible with features ({m}, {w})")
    own = np.zeros((m, 2), dtype=features.data.dtype)
    own[np.arange(m), labels] = 1.0
    other = 1.0 - own
    d_own = ad.power(ad.add(ad.sum_(ad.power(ad.sub(features, ad.matmul(Tensor(own), centers)), 2.0), axis=1), DIST_EPS), 0.5)
    d_other = ad.power(ad.add(ad.sum_(ad.power(ad.sub(features, ad.matmul(Tensor(other), centers)), 2.0), axis=1), DIST_EPS), 0.5)
    return d_own, d_other


def smtcl(features: Tensor, labels, centers: Tensor, beta: float = 1.0):
    """Returns (scalar loss Tensor, per-sample weights omega as ndarray)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
        raise ShapeError(f"labels {labels.shape} incompatible with features {features.shape}")
    d_own, d_other = _center_distances(features, labels, centers)
    delta = ad.sub(d_own, d_other)
    omega = ad.sigmoid(ad.mul(delta, beta))
    loss = ad.mean_(ad.mul(omega, delta))
    return loss, omega.data.copy()


def cross_entropy(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Mean cross-entropy over two-logit rows; optional per-class weights."""
    labels = np.asarray(labels, dtype=np.int64)
    m = logits.shape[0]
    if logits.shape != (m, 2) or labels.shape != (m,):
        raise ShapeError(f"logits {logits.shape} / labels {labels.shape} mismatch")
    onehot = np.zeros((m, 2), dtype=logits.data.dtype)
    onehot[np.arange(m), labels] = 1.0
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=logits.data.dtype)
        onehot *= w[labels][:, None]
    ls = ad.log_softmax(logits, axis=-1)
    return ad.mul(ad.neg(ad.mean_(ad.sum_(ad.mul(ls, Tensor(onehot)), axis=1))), 1.0)


def inverse_prevalence_weights(labels) -> np.ndarray:
    """w_c = n / (2 * n_c): balanced contribution from each class."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    counts = np.bincount(labels, minlength=2)
    if counts.min() == 0:
        return np.ones(2)
    return n / (2.0 * counts)


def total_loss(logits: Tensor, labels, features: Tensor, centers: Tensor, cfg: LossConfig):
    """CE + lambda * SMTCL. Returns (scalar Tensor, parts dict)."""
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    ce = cross_entropy(logits, labels, cfg.class_weights)
    if cfg.lambda_smtcl == 0.0:
        parts = {"ce": float(ce.data), "smtcl": 0.0, "mean_omega": float("nan")}
        return ce, parts
    sm, omega = smtcl(features, labels, centers, cfg.beta)
    total = ad.add(ce, ad.mul(sm, cfg.lambda_smtcl))
    parts = {"ce": float(ce.data), "smtcl": float(sm.data), "mean_omega": float(omega.mean())}
    return total, parts
