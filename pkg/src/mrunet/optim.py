"""Soft-Dice training loss and the Adadelta update rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import Tensor, custom_op

FOREGROUND = 1
SMOOTH = 1.0


@dataclass
class LossValue:
    """Differentiable batch loss plus the per-image soft Dice values."""

    loss: Tensor
    per_image_sdsc: np.ndarray

    @property
    def value(self) -> float:
        return self.loss.item()


def soft_dice(probs: np.ndarray, labels: np.ndarray, smooth: float = SMOOTH) -> np.ndarray:
    """Per-image soft Dice on plain arrays: (2*sum(p*G) + s) / (sum p + sum G + s)."""
    p = probs[:, FOREGROUND].reshape(probs.shape[0], -1).astype(np.float64)
    g = labels[:, 0].reshape(labels.shape[0], -1).astype(np.float64)
    inter = (p * g).sum(axis=1)
    total = p.sum(axis=1) + g.sum(axis=1)
    return (2.0 * inter + smooth) / (total + smooth)


def _check_labels(probs: Tensor, labels) -> np.ndarray:
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise ShapeError(f"probs must be (N, 2, H, W), got {probs.shape}")
    if lab.shape != (probs.shape[0], 1) + probs.shape[2:]:
        raise ShapeError(f"labels must be (N, 1, H, W) matching probs, got {lab.shape}")
    if not np.all((lab == 0) | (lab == 1)):
        raise ValidationError("labels must be binary (0 or 1)")
    return lab


def soft_dice_loss(probs: Tensor, labels, smooth: float = SMOOTH) -> LossValue:
    """``1 - mean(per-image soft Dice)`` on the foreground channel.

    Differentiable with respect to ``probs`` only; the background channel
    receives a zero gradient.
    """
    lab = _check_labels(probs, labels)
    n = probs.shape[0]
    p = probs.data[:, FOREGROUND]
    g = lab[:, 0].astype(probs.dtype)
    axes = (1, 2)
    inter = (p * g).sum(axis=axes, dtype=np.float64)
    total = p.sum(axis=axes, dtype=np.float64) + g.sum(axis=axes, dtype=np.float64)
    num = 2.0 * inter + smooth
    den = total + smooth
    sdsc = num / den
    loss = np.asarray(1.0 - sdsc.mean(), dtype=probs.dtype)

    def _backward(grad_out: np.ndarray):
        # d sdsc / d p_i = (2 G_i den - num) / den^2
        coef = -float(grad_out) / n
        dp = (2.0 * g * den[:, None, None] - num[:, None, None]) / (den**2)[:, None, None]
        gp = np.zeros(probs.shape, dtype=probs.dtype)
        gp[:, FOREGROUND] = coef * dp
        return (gp,)

    return LossValue(custom_op(loss, (probs,), _backward), sdsc)


# ---------------------------------------------------------------------------
# Adadelta


@dataclass
class AdadeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0
    square_avg: List[np.ndarray] = field(default_factory=list)
    delta_avg: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValidationError(f"rho must lie in (0, 1), got {self.rho}")
        if self.eps <= 0:
            raise ValidationError(f"eps must be positive, got {self.eps}")


def adadelta_step(state: AdadeltaState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    """One in-place Adadelta update of ``params``.

    Per element::

        E[g^2]  <- rho E[g^2] + (1 - rho) g^2
        dx       = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
        E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
        x       <- x + lr * dx

    Accumulators are created lazily (zeros) on the first call.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.square_avg:
        state.square_avg = [np.zeros_like(p) for p in params]
        state.delta_avg = [np.zeros_like(p) for p in params]
    elif len(state.square_avg) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    rho, eps = state.rho, state.eps
    for x, g, eg, ed in zip(params, grads, state.square_avg, state.delta_avg):
        if g.shape != x.shape or eg.shape != x.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {x.shape}")
        eg *= rho
        eg += (1.0 - rho) * g * g
        dx = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1.0 - rho) * dx * dx
        x += state.lr * dx


class Adadelta:
    """Adadelta bound to a list of parameter tensors (reads their ``.grad``)."""

    def __init__(self, params: Sequence[Tensor], rho: float = 0.95, eps: float = 1e-6, lr: float = 1.0):
        self.params = list(params)
        self.state = AdadeltaState(rho=rho, eps=eps, lr=lr)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adadelta_step(self.state, [p.data for p in self.params], grads)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
