"""Central finite-difference check of taped gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ShapeError, UnreliableCheckError, ValidationError
from .tensor import Tape, Tensor, backward

FLOOR = 1e-8
_ROUNDOFF = 16 * np.finfo(np.float64).eps


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)


def _scalar(fn, inputs) -> float:
    out = fn(*inputs)
    if out.data.size != 1:
        raise ShapeError(f"checked function must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(()))


def analytic_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor]):
    saved = [(t.requires_grad, t.grad) for t in inputs]
    try:
        for t in inputs:
            t.requires_grad = True
            t.grad = None
        with Tape():
            out = fn(*inputs)
        backward(out)
        return [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    finally:
        for t, (rg, g) in zip(inputs, saved):
            t.requires_grad = rg
            t.grad = g


def _central(fn, inputs, flat, i, h, f0):
    """Central difference at step ``h`` plus a kink indicator.

    For a ReLU/max kink at distance < h the ratio |f+ - 2 f0 + f-| / |f+ - f-|
    equals the error the kink introduces into the estimate; second
    differences at roundoff level are ignored.
    """
    orig = flat[i]
    flat[i] = orig + h
    fp = _scalar(fn, inputs)
    flat[i] = orig - h
    fm = _scalar(fn, inputs)
    flat[i] = orig
    first = fp - fm
    second = abs(fp - 2.0 * f0 + fm)
    if second <= _ROUNDOFF * max(abs(f0), 1.0):
        kink = 0.0
    else:
        kink = second / max(abs(first), 1e-300)
    return first / (2.0 * h), kink


def _noise(f0: float, h: float) -> float:
    return _ROUNDOFF * max(abs(f0), 1.0) / h


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-4,
    samples: Optional[int] = None,
    seed: int = 0,
    kink_tol: float = 1e-5,
    kink_retries: int = 3,
) -> float:
    """Max relative error between backprop gradients and central differences.

    ``fn(*inputs)`` must return a scalar tensor. Every element of every
    input is perturbed unless ``samples`` is given, in which case that many
    seeded random elements per input are checked (all of them when the
    input is smaller).

    When the second difference suggests the +-step stencil straddles a
    non-differentiable point, the element is re-measured with a step ten
    times smaller (up to ``kink_retries`` times). If the finer estimate
    agrees with the coarser one the point was merely curved and the coarser
    estimate is kept; otherwise the finer one replaces it.
    """
    if step <= 0:
        raise ValidationError(f"step must be positive, got {step}")
    inputs = list(inputs)
    for t in inputs:
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
    f0 = _scalar(fn, inputs)
    if _scalar(fn, inputs) != f0:
        raise UnreliableCheckError("function returned different values on identical inputs")
    grads = analytic_gradients(fn, inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(inputs, grads):
        flat = t.data.reshape(-1)
        if samples is None or samples >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=samples, replace=False)
        gflat = g.reshape(-1)
        for i in idx:
            h = step
            num, kink = _central(fn, inputs, flat, i, h, f0)
            for _ in range(kink_retries):
                if kink <= kink_tol:
                    break
                h /= 10.0
                finer, finer_kink = _central(fn, inputs, flat, i, h, f0)
                gap = abs(num - finer)
                if gap <= kink_tol * max(abs(num), abs(finer), FLOOR) + _noise(f0, h):
                    # smooth curvature, not a kink: the coarser step is reliable
                    break
                num, kink = finer, finer_kink
            worst = max(worst, float(relative_error(np.float64(gflat[i]), np.float64(num))))
    return worst
