"""Classification, robust localization, and combined detection losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..validation import check_labels


@dataclass
class HybridLossConfig:
    """Weights of the combined objective.

    loss = classification NLL
         + lam * (1/n_reg) * sum of per-positive localization losses
         + beta * (squared L2 norm of the decayed parameters)
    """

    lam: float = 0.5
    beta: float = 1e-4
    n_reg: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.n_reg < 1:
            raise ValueError(f"n_reg must be at least 1, got {self.n_reg}")


def _logits_2d(logits) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim == 5:
        if arr.shape[1] != 2:
            raise ValueError(f"expected 2 logit channels, got {arr.shape[1]}")
        if arr.shape[2] * arr.shape[3] * arr.shape[4] != 1:
            raise ValueError(
                f"expected one logit pair per sample, got spatial shape {arr.shape[2:]}"
            )
        arr = arr.reshape(arr.shape[0], 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"logits must be (N, 2), got shape {arr.shape}")
    return arr


def softmax2(logits) -> np.ndarray:
    """Row-wise two-class softmax, stabilized by max subtraction."""
    z = _logits_2d(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_nll_per_sample(logits, labels) -> np.ndarray:
    """Per-sample negative log-likelihood of the true class."""
    z = _logits_2d(logits)
    y = check_labels(labels, z.shape[0])
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    return log_norm - z[np.arange(z.shape[0]), y]


def softmax_nll_loss(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    Returns (loss, grad_logits) with grad = (softmax - onehot) / N, shaped
    like the incoming logits.
    """
    z = _logits_2d(logits)
    y = check_labels(labels, z.shape[0])
    n = z.shape[0]
    loss = float(softmax_nll_per_sample(z, y).mean())
    grad = softmax2(z)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, grad.reshape(np.shape(logits))


def smooth_l1(a: float) -> float:
    """Robust L1: 0.5*a^2 inside |a| < 1, |a| - 0.5 outside."""
    a = float(a)
    return 0.5 * a * a if abs(a) < 1.0 else abs(a) - 0.5


def smooth_l1_grad(a: float) -> float:
    a = float(a)
    if abs(a) < 1.0:
        return a
    return 1.0 if a > 0 else -1.0


def _smooth_l1_vec(a: np.ndarray) -> np.ndarray:
    aa = np.abs(a)
    return np.where(aa < 1.0, 0.5 * a * a, aa - 0.5)


def _smooth_l1_grad_vec(a: np.ndarray) -> np.ndarray:
    return np.where(np.abs(a) < 1.0, a, np.sign(a))


def localization_loss_per_sample(reg_pred, reg_target, labels) -> np.ndarray:
    """Smooth-L1 over the four target components, zeroed for negatives."""
    pred = np.asarray(reg_pred, dtype=np.float64).reshape(-1, 4)
    target = np.asarray(reg_target, dtype=np.float64).reshape(-1, 4)
    y = check_labels(labels, pred.shape[0])
    if target.shape[0] != pred.shape[0]:
        raise ValueError(
            f"{pred.shape[0]} predictions but {target.shape[0]} targets"
        )
    per = _smooth_l1_vec(pred - target).sum(axis=1)
    return per * (y == 1)


def hybrid_loss(cls_logits, labels, reg_pred, reg_target, params_l2: float,
                cfg: HybridLossConfig):
    """Joint classification + localization + weight-decay objective.

    reg_pred/reg_target are (N, 4) arrays of (tx, ty, tz, td) rows aligned
    with labels; localization only counts samples labeled 1. Returns
    (loss, grad_cls_logits, grad_reg_pred).
    """
    z = _logits_2d(cls_logits)
    y = check_labels(labels, z.shape[0])
    pred = np.asarray(reg_pred, dtype=np.float64).reshape(-1, 4)
    target = np.asarray(reg_target, dtype=np.float64).reshape(-1, 4)
    if pred.shape[0] != z.shape[0] or target.shape[0] != z.shape[0]:
        raise ValueError(
            f"misaligned inputs: {z.shape[0]} logits, {pred.shape[0]} "
            f"predictions, {target.shape[0]} targets"
        )
    cls_loss, grad_cls = softmax_nll_loss(z, y)
    loc = localization_loss_per_sample(pred, target, y)
    loss = cls_loss + cfg.lam * float(loc.sum()) / cfg.n_reg + cfg.beta * float(params_l2)
    grad_reg = _smooth_l1_grad_vec(pred - target) * (y == 1)[:, None]
    grad_reg *= cfg.lam / cfg.n_reg
    return loss, grad_cls.reshape(np.shape(cls_logits)), grad_reg
