"""Training objectives.

Every map argument is a tensor of shape ``(..., H, W)``; reductions that the
formulas define per image are taken over the last two axes and then averaged
over the leading (batch/channel) axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn.functional as F

PROB_EPS = 1e-7
DEPTH_EPS = 1e-3
DEFAULT_LAMBDAS = (1.0, 0.8, 0.6, 0.4, 0.2)


@dataclass
class LossWeights:
    lambdas: tuple = DEFAULT_LAMBDAS

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if not self.lambdas or any(x < 0 for x in self.lambdas):
            raise ValueError(f"level weights must be a non-empty list of nonnegative floats: {self.lambdas}")

    def __len__(self):
        return len(self.lambdas)

    @classmethod
    def for_levels(cls, n_levels, multi_level=True):
        """Default weights for ``n_levels`` side outputs; finest level only without MLS."""
        if not multi_level:
            return cls((1.0,))
        if n_levels <= len(DEFAULT_LAMBDAS):
            return cls(DEFAULT_LAMBDAS[:n_levels])
        raise ValueError(f"no default level weights for {n_levels} levels")


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _pixel_bce(p, y):
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))


def bce_loss(p, y):
    _check_shapes(p, y)
    return _pixel_bce(p, y).mean()


def iou_loss(p, y):
    _check_shapes(p, y)
    inter = (p * y).sum(dim=(-2, -1))
    union = (p + y - p * y).sum(dim=(-2, -1))
    return (1 - (inter + 1) / (union + 1)).mean()


def depth_loss(p_d, y_d):
    _check_shapes(p_d, y_d)
    diff = torch.log(y_d.clamp_min(DEPTH_EPS)) - torch.log(p_d.clamp_min(DEPTH_EPS))
    return (diff ** 2).mean()


def _check_window(window):
    w, h = window
    if w < 1 or h < 1 or w % 2 == 0 or h % 2 == 0:
        raise ValueError(f"error window must have odd positive sides, got {w}x{h}")
    return w, h


def window_mean(err, window):
    """Mean over a ``(w, h)`` window around each pixel, edges replicated."""
    w, h = _check_window(window)
    lead = err.shape[:-2]
    x = err.reshape(-1, 1, *err.shape[-2:])
    x = F.pad(x, (w // 2, w // 2, h // 2, h // 2), mode="replicate")
    x = F.avg_pool2d(x, kernel_size=(h, w), stride=1)
    return x.reshape(*lead, *err.shape[-2:])


@torch.no_grad()
def dec_weights(p_d, y_d, window=(7, 7)):
    """Per-pixel error weights in [0, 1] from the depth prediction error.

    Absolute log-depth error, averaged over the window and divided by the
    per-image maximum of the averaged map. Images without error get uniform
    weight 1. The result carries no gradient.
    """
    _check_shapes(p_d, y_d)
    window = _check_window(window)
    err = (torch.log(p_d.detach().clamp_min(DEPTH_EPS)) - torch.log(y_d.clamp_min(DEPTH_EPS))).abs()
    pooled = window_mean(err, window)
    peak = pooled.amax(dim=(-2, -1), keepdim=True)
    degenerate = peak < 1e-8
    e = pooled / torch.where(degenerate, torch.ones_like(peak), peak)
    return torch.where(degenerate, torch.ones_like(e), e).clamp(0.0, 1.0)


def dec_loss(p, y, e):
    _check_shapes(p, y)
    _check_shapes(p, e)
    e = e.detach()
    num = (e * _pixel_bce(p, y)).sum(dim=(-2, -1))
    return (num / e.sum(dim=(-2, -1))).mean()


@dataclass
class LossResult:
    total: torch.Tensor
    terms: Dict[str, torch.Tensor]
    lambdas: tuple
    window: tuple

    def breakdown(self) -> Dict[str, float]:
        return {k: float(v.detach()) for k, v in self.terms.items()}


def total_loss(bundle, mask, depth=None, weights: Optional[LossWeights] = None, window=(7, 7),
               use_iou=True, use_dec=True, depth_free=False, error_weights=None) -> LossResult:
    """Depth term plus level-weighted BCE + IoU + error-weighted BCE per side output.

    ``weights`` has one entry per supervised level starting at the finest; a
    single weight supervises the finest output only. ``depth_free`` trains on
    data without depth maps by dropping the depth and error-weighted terms.
    ``error_weights`` replaces the weights computed from the depth prediction.
    """
    n_levels = len(bundle.saliency)
    weights = weights or LossWeights.for_levels(n_levels)
    if len(weights) > n_levels:
        raise ValueError(f"{len(weights)} level weights for {n_levels} side outputs")
    has_depth_branch = bundle.depth is not None and not depth_free
    if use_dec and not has_depth_branch and not depth_free:
        raise ValueError("the error-weighted term needs a depth prediction; disable use_dec")
    if has_depth_branch and depth is None:
        raise ValueError("sample has no depth map; train with depth_free=True to drop the depth terms")

    terms: Dict[str, torch.Tensor] = {}
    total = 0.0
    e = None
    if has_depth_branch:
        terms["depth"] = depth_loss(bundle.depth, depth)
        total = total + terms["depth"]
        if use_dec:
            e = dec_weights(bundle.depth, depth, window) if error_weights is None else error_weights
    for i, lam in enumerate(weights.lambdas):
        p = bundle.saliency[i]
        level = i + 1
        terms[f"bce_{level}"] = bce_loss(p, mask)
        level_sum = terms[f"bce_{level}"]
        if use_iou:
            terms[f"iou_{level}"] = iou_loss(p, mask)
            level_sum = level_sum + terms[f"iou_{level}"]
        if e is not None:
            terms[f"dec_{level}"] = dec_loss(p, mask, e)
            level_sum = level_sum + terms[f"dec_{level}"]
        total = total + lam * level_sum
    return LossResult(total=total, terms=terms, lambdas=weights.lambdas, window=tuple(window))
