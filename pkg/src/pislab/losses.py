"""Training objectives.

All probabilities are clamped to [1e-6, 1 - 1e-6] before any logarithm and
every reduction is a mean over pixels (and over the batch, when inputs carry
a leading batch axis). Natural logarithms throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, clamp_prob, log

LN2 = math.log(2.0)


def _check(a: Tensor, b) -> None:
    if a.shape != np.shape(b.data if isinstance(b, Tensor) else b):
        raise ValueError(f"shape mismatch: {a.shape} vs {np.shape(b.data if isinstance(b, Tensor) else b)}")


def _bernoulli_kl(p: Tensor, q: Tensor) -> Tensor:
    return p * (log(p) - log(q)) + (1.0 - p) * (log(1.0 - p) - log(1.0 - q))


def _pixel_axes(x: Tensor) -> tuple[int, ...]:
    return tuple(range(max(x.ndim - 2, 0), x.ndim))


def seg_loss(p: Tensor, gt) -> Tensor:
    """Mean binary cross-entropy plus soft Dice loss (per image, then batch mean)."""
    p = as_tensor(p)
    _check(p, gt)
    g = np.asarray(gt.data if isinstance(gt, Tensor) else gt).astype(p.dtype)
    p = clamp_prob(p)
    bce = -(g * log(p) + (1.0 - g) * log(1.0 - p))
    axes = _pixel_axes(p)
    inter = (p * g).sum(axis=axes)
    dice = 1.0 - (2.0 * inter + 1.0) / (p.sum(axis=axes) + g.sum(axis=axes) + 1.0)
    return bce.mean() + dice.mean()


def kl_align(p_s: Tensor, p_c: Tensor) -> Tensor:
    """Mean per-pixel Bernoulli KL(p_s || p_c); gradients reach both inputs."""
    p_s, p_c = as_tensor(p_s), as_tensor(p_c)
    _check(p_s, p_c)
    return _bernoulli_kl(clamp_prob(p_s), clamp_prob(p_c)).mean()


def jsd_map(p_s, p_c) -> Tensor:
    """Per-pixel Jensen-Shannon divergence divided by ln 2, values in [0, 1]."""
    p_s, p_c = as_tensor(p_s), as_tensor(p_c)
    _check(p_s, p_c)
    a, b = clamp_prob(p_s), clamp_prob(p_c)
    m = (a + b) * 0.5
    return (_bernoulli_kl(a, m) * 0.5 + _bernoulli_kl(b, m) * 0.5) * (1.0 / LN2)


def hard_region_loss(p_s: Tensor, p_c: Tensor, detach_target: bool = True,
                     detach_weight: bool = True) -> Tensor:
    """Disagreement-weighted cross-entropy of ``p_c`` against soft target ``p_s``.

    The JSD weight map and the simple-branch target are detached by default,
    so this term only trains the complex branch. Both flags exist for
    gradient verification of the fully differentiable form.
    """
    p_s, p_c = as_tensor(p_s), as_tensor(p_c)
    _check(p_s, p_c)
    target = p_s.detach() if detach_target else p_s
    w = jsd_map(p_s.detach(), p_c.detach()) if detach_weight else jsd_map(p_s, p_c)
    t, q = clamp_prob(target), clamp_prob(p_c)
    ce = -(t * log(q) + (1.0 - t) * log(1.0 - q))
    return (w * ce).mean()


@dataclass
class LossBreakdown:
    l_seg: float = 0.0
    l_align: float = 0.0
    l_hard: float = 0.0
    l_train: float = 0.0

    def row(self, step: int, stage: int) -> list:
        return [step, stage, self.l_seg, self.l_align, self.l_hard, self.l_train]


CSV_COLUMNS = ("step", "stage", "l_seg", "l_align", "l_hard", "l_train")


def active_terms(stage: int, align: bool | None = None, hard: bool | None = None) -> tuple[bool, bool]:
    """(align, hard) switches for a stage; both default to on only in stage 3."""
    default = stage == 3
    return (default if align is None else align), (default if hard is None else hard)


def active_breakdown(parts: LossBreakdown, stage: int, align: bool | None = None,
                     hard: bool | None = None) -> LossBreakdown:
    """Copy of ``parts`` with inactive terms zeroed and ``l_train`` filled in."""
    use_align, use_hard = active_terms(stage, align, hard)
    out = LossBreakdown(parts.l_seg, parts.l_align if use_align else 0.0,
                        parts.l_hard if use_hard else 0.0)
    out.l_train = out.l_seg + out.l_align + out.l_hard
    return out


def total_loss(parts: LossBreakdown, stage: int, align: bool | None = None,
               hard: bool | None = None) -> float:
    return active_breakdown(parts, stage, align, hard).l_train
