"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParameterGroup
from .tensor import Tensor


class GradientCheckError(ArithmeticError):
    pass


def _value(f, params) -> float:
    out = f(params)
    v = float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(-1)[0])
    if not np.isfinite(v):
        raise GradientCheckError(f"objective evaluated to {v}")
    return v


def gradient_check(
    f: Callable[[ParameterGroup], Tensor],
    params: ParameterGroup,
    eps: float = 1e-3,
    samples_per_tensor: int = 3,
    seed: int = 0,
    dtype=np.float64,
) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` maps a ParameterGroup to a scalar Tensor and must be deterministic.
    The check runs on a private copy of ``params`` cast to ``dtype`` (double
    precision by default, so the finite-difference roundoff stays well below
    the tolerances we test against). Every trainable tensor contributes
    ``samples_per_tensor`` randomly chosen coordinates.

    Error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    work = params.copy(dtype=dtype)
    names = sorted(params.trainable) or list(params)
    work.set_trainable(names)

    loss = f(work)
    if not np.all(np.isfinite(loss.data)):
        raise GradientCheckError("objective is not finite at the base point")
    if loss.requires_grad:
        loss.backward()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names:
        t = work[name]
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        k = min(samples_per_tensor, flat.size)
        for idx in rng.choice(flat.size, size=k, replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = _value(f, work)
            flat[idx] = orig - eps
            lo = _value(f, work)
            flat[idx] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = float(analytic.reshape(-1)[idx])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
