"""Composite discrete-regression loss over 21 response-count classes.

total = alpha * FL + (1 - alpha) * (beta * ORL + (1 - beta) * DBL)

FL is inverse-frequency-weighted focal loss over softmax probabilities,
DBL the expected absolute class-index distance under the same softmax, and
ORL a per-class binary cross-entropy of the raw logits against cumulative
"true class >= index" targets, averaged over the K binary terms so its
magnitude stays comparable to FL and DBL.  All three come with analytic
gradients w.r.t. the logits; tests check them against central finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

K_CLASSES = 21
PROB_FLOOR = 1e-12  # applied before logarithms


def _unit_weights() -> np.ndarray:
    return np.ones(K_CLASSES, dtype=np.float64)


@dataclass(frozen=True)
class LossParams:
    """Mixing weights alpha/beta, focal exponent gamma, per-class weights."""

    alpha: float = 0.7
    beta: float = 0.4
    gamma: float = 2.0
    class_weights: np.ndarray = field(default_factory=_unit_weights)

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not (0.0 <= self.beta <= 1.0):
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        w = np.asarray(self.class_weights, dtype=np.float64)
        if w.shape != (K_CLASSES,):
            raise ConfigError(f"class_weights must have shape ({K_CLASSES},), got {w.shape}")
        if not (w > 0).all():
            raise ConfigError("class_weights must all be > 0")
        object.__setattr__(self, "class_weights", w)


@dataclass
class LossOutput:
    total: float
    fl: float
    dbl: float
    orl: float
    grad: np.ndarray  # d total / d logits


def class_weights(label_histogram) -> np.ndarray:
    """Inverse-frequency class weights from a K-bin label histogram.

    w(y) = total / (K * count_y) for observed classes; unobserved classes get
    the largest observed weight (instead of an infinite one).  The vector is
    rescaled so its mean is 1, which keeps the focal term's magnitude stable
    across datasets.
    """
    counts = np.asarray(label_histogram, dtype=np.float64)
    if counts.shape != (K_CLASSES,):
        raise ConfigError(f"label histogram must have {K_CLASSES} bins, got {counts.shape}")
    if (counts < 0).any():
        raise ConfigError("label histogram counts must be >= 0")
    total = counts.sum()
    if total == 0:
        raise ConfigError("label histogram is all zero")
    w = np.zeros(K_CLASSES, dtype=np.float64)
    active = counts > 0
    w[active] = total / (K_CLASSES * counts[active])
    w[~active] = w[active].max()
    return w / w.mean()


def _check_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.shape != (K_CLASSES,):
        raise ConfigError(f"logits must have shape ({K_CLASSES},), got {z.shape}")
    if not np.isfinite(z).all():
        raise ConfigError("logits must be finite")
    return z


def _check_label(y: int) -> int:
    y = int(y)
    if not (0 <= y < K_CLASSES):
        raise ConfigError(f"label must be in 0..{K_CLASSES - 1}, got {y}")
    return y


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def focal_loss(logits, y: int, params: LossParams) -> tuple[float, np.ndarray]:
    """Weighted focal loss -w(y) * (1 - p_y)^gamma * log(p_y) and its gradient.

    With s = p_y:  d/ds [-w (1-s)^g log s] = w*g*(1-s)^(g-1)*log s - w*(1-s)^g / s
    and ds/dz_j = s * ([j == y] - p_j).
    """
    z = _check_logits(logits)
    y = _check_label(y)
    w = float(params.class_weights[y])
    g = float(params.gamma)
    p = softmax(z)
    s = float(p[y])
    s_safe = max(s, PROB_FLOOR)
    one_minus = 1.0 - s

    value = -w * one_minus**g * np.log(s_safe)

    if one_minus <= 0.0:
        # p_y saturated at 1: the loss and its gradient vanish for gamma > 0,
        # and for gamma == 0 the cross-entropy gradient is exactly zero too.
        return float(value), np.zeros(K_CLASSES)

    if g == 0.0:
        dvalue_ds = -w / s_safe
    else:
        dvalue_ds = w * g * one_minus ** (g - 1.0) * np.log(s_safe) - w * one_minus**g / s_safe
    ds_dz = s * (np.eye(1, K_CLASSES, y)[0] - p)
    return float(value), dvalue_ds * ds_dz


def distance_loss(logits, y: int) -> tuple[float, np.ndarray]:
    """Expected |class - y| under softmax: sum_i p_i * |i - y|.

    Gradient: d/dz_j = p_j * (|j - y| - value).
    """
    z = _check_logits(logits)
    y = _check_label(y)
    p = softmax(z)
    dist = np.abs(np.arange(K_CLASSES) - y).astype(np.float64)
    value = float(p @ dist)
    grad = p * (dist - value)
    return value, grad


def ordinal_targets(y: int) -> np.ndarray:
    """Cumulative targets t_i = 1 if y >= i else 0."""
    y = _check_label(y)
    return (np.arange(K_CLASSES) <= y).astype(np.float64)


def ordinal_loss(logits, y: int) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy of raw logits against cumulative targets.

    Per class i the stable form is softplus(z_i) - t_i * z_i; the gradient is
    (sigmoid(z_i) - t_i) / K.
    """
    z = _check_logits(logits)
    t = ordinal_targets(y)
    softplus = np.where(z > 0, z + np.log1p(np.exp(-np.abs(z))), np.log1p(np.exp(-np.abs(z))))
    value = float(np.mean(softplus - t * z))
    sigmoid = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
    grad = (sigmoid - t) / K_CLASSES
    return value, grad


def combined_loss(logits, y: int, params: LossParams) -> LossOutput:
    """alpha * FL + (1 - alpha) * (beta * ORL + (1 - beta) * DBL) with gradient."""
    fl, g_fl = focal_loss(logits, y, params)
    dbl, g_dbl = distance_loss(logits, y)
    orl, g_orl = ordinal_loss(logits, y)
    a, b = params.alpha, params.beta
    total = a * fl + (1.0 - a) * (b * orl + (1.0 - b) * dbl)
    grad = a * g_fl + (1.0 - a) * (b * g_orl + (1.0 - b) * g_dbl)
    return LossOutput(total=float(total), fl=fl, dbl=dbl, orl=orl, grad=grad)


def combined_loss_batch(logits, ys, params: LossParams) -> LossOutput:
    """Mean of per-sample totals; grad is d(mean total)/d(logits), shape (B, K)."""
    z = np.asarray(logits, dtype=np.float64)
    ys = np.asarray(ys)
    if z.ndim != 2 or z.shape[1] != K_CLASSES:
        raise ConfigError(f"batch logits must have shape (B, {K_CLASSES}), got {z.shape}")
    if ys.shape != (z.shape[0],):
        raise ConfigError("labels must have shape (B,)")
    n = z.shape[0]
    totals = np.empty(n)
    fls = np.empty(n)
    dbls = np.empty(n)
    orls = np.empty(n)
    grads = np.empty_like(z)
    for i in range(n):
        out = combined_loss(z[i], int(ys[i]), params)
        totals[i], fls[i], dbls[i], orls[i] = out.total, out.fl, out.dbl, out.orl
        grads[i] = out.grad
    return LossOutput(
        total=float(totals.mean()),
        fl=float(fls.mean()),
        dbl=float(dbls.mean()),
        orl=float(orls.mean()),
        grad=grads / n,
    )
