"""Brute-force reference implementations for the test suite.

Nothing here imports from the production modules: every formula is written
out again with explicit loops in float64 so the two routes can disagree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np
import torch


# ---------------------------------------------------- finite differences

def finite_diff_grad(fn: Callable, inputs, h: float = 1e-4):
    """Central-difference gradient of scalar ``fn(*inputs)`` w.r.t. each input.

    ``inputs`` is a tensor or a list of tensors (float64); they are perturbed
    in place and restored. Returns a list of gradient tensors.
    """
    single = isinstance(inputs, torch.Tensor)
    tensors = [inputs] if single else list(inputs)
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + h
                up = float(fn(*tensors))
                flat[k] = orig - h
                down = float(fn(*tensors))
                flat[k] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise FloatingPointError(f"non-finite function value at coordinate {k}")
                gflat[k] = (up - down) / (2 * h)
            grads.append(g)
    return grads[0] if single else grads


def relative_error(analytic, numeric) -> float:
    """Largest absolute deviation scaled by the largest gradient magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    shapes: Dict[str, tuple]
    step: float
    dtype: str = "float64"
    # largest |gradient| seen by either route, per tensor
    magnitudes: Dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    def failures(self, tol, zero_tol=1e-8):
        """Tensors whose relative error exceeds ``tol``.

        A tensor whose gradient is zero by both routes (``<= zero_tol``) has
        no meaningful relative error and counts as agreeing.
        """
        return {n: e for n, e in self.errors.items()
                if e >= tol and self.magnitudes.get(n, np.inf) > zero_tol}


def grad_check_module(module: torch.nn.Module, loss_fn: Callable, inputs: List[torch.Tensor],
                      h: float = 1e-6, max_coords: int = None, seed: int = 0) -> GradCheckReport:
    """Compare autograd against central differences for every parameter and input.

    ``loss_fn(module, *inputs)`` must return a scalar tensor. The module should be
    in float64; BatchNorm running statistics are irrelevant in train mode
    because outputs depend only on batch statistics. With ``max_coords`` only
    that many randomly chosen coordinates of each tensor are perturbed.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    module.zero_grad()
    loss_fn(module, *inputs).backward()
    named = [(f"input{i}", x) for i, x in enumerate(inputs)] + \
        [(n, p) for n, p in module.named_parameters()]
    rng = np.random.default_rng(seed)

    errors, shapes, mags = {}, {}, {}
    with torch.no_grad():
        for n, t in named:
            analytic = t.grad.detach().reshape(-1).numpy().copy() if t.grad is not None \
                else np.zeros(t.numel())
            flat = t.data.view(-1)
            count = flat.numel()
            coords = np.arange(count)
            if max_coords is not None and count > max_coords:
                coords = np.sort(rng.choice(count, size=max_coords, replace=False))
            numeric = np.empty(len(coords))
            for j, k in enumerate(coords):
                orig = flat[k].item()
                flat[k] = orig + h
                up = float(loss_fn(module, *inputs))
                flat[k] = orig - h
                down = float(loss_fn(module, *inputs))
                flat[k] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise FloatingPointError(f"non-finite function value for {n}[{k}]")
                numeric[j] = (up - down) / (2 * h)
            errors[n] = relative_error(analytic[coords], numeric)
            mags[n] = float(max(np.abs(analytic[coords]).max(), np.abs(numeric).max()))
            shapes[n] = tuple(t.shape)
    return GradCheckReport(errors=errors, shapes=shapes, step=h, dtype=str(inputs[0].dtype),
                           magnitudes=mags)


# ---------------------------------------------------------------- losses

def brute_bce(p, y, eps=1e-7):
    p, y = np.asarray(p, float), np.asarray(y, float)
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            q = min(max(p[i, j], eps), 1 - eps)
            total -= y[i, j] * math.log(q) + (1 - y[i, j]) * math.log(1 - q)
    return total / p.size


def brute_iou(p, y):
    p, y = np.asarray(p, float), np.asarray(y, float)
    inter = union = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            inter += p[i, j] * y[i, j]
            union += p[i, j] + y[i, j] - p[i, j] * y[i, j]
    return 1 - (inter + 1) / (union + 1)


def brute_depth_loss(p, y, eps=1e-3):
    p, y = np.asarray(p, float), np.asarray(y, float)
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            total += (math.log(max(y[i, j], eps)) - math.log(max(p[i, j], eps))) ** 2
    return total / p.size


def brute_window_mean(err_map, w, h):
    """Nested-loop window mean with edge replication; ``w`` spans columns."""
    if w % 2 == 0 or h % 2 == 0:
        raise ValueError("window sides must be odd")
    a = np.asarray(err_map, float)
    H, W = a.shape
    out = np.zeros_like(a)
    for i in range(H):
        for j in range(W):
            s = 0.0
            for di in range(-(h // 2), h // 2 + 1):
                for dj in range(-(w // 2), w // 2 + 1):
                    ii = min(max(i + di, 0), H - 1)
                    jj = min(max(j + dj, 0), W - 1)
                    s += a[ii, jj]
            out[i, j] = s / (w * h)
    return out


def brute_dec_weights(p_d, y_d, w=7, h=7, eps=1e-3):
    p_d, y_d = np.asarray(p_d, float), np.asarray(y_d, float)
    err = np.zeros_like(p_d)
    for i in range(p_d.shape[0]):
        for j in range(p_d.shape[1]):
            err[i, j] = abs(math.log(max(p_d[i, j], eps)) - math.log(max(y_d[i, j], eps)))
    pooled = brute_window_mean(err, w, h)
    peak = pooled.max()
    if peak < 1e-8:
        return np.ones_like(pooled)
    return pooled / peak


def brute_dec_loss(p, y, e, eps=1e-7):
    p, y, e = (np.asarray(a, float) for a in (p, y, e))
    num = den = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            q = min(max(p[i, j], eps), 1 - eps)
            num -= e[i, j] * (y[i, j] * math.log(q) + (1 - y[i, j]) * math.log(1 - q))
            den += e[i, j]
    return num / den


# --------------------------------------------------------------- metrics

def _brute_fbeta_curve(p, y, beta2=0.3):
    H, W = p.shape
    curve = []
    for k in range(256):
        t = k / 255.0
        tp = fp = fn = 0
        for i in range(H):
            for j in range(W):
                pos = p[i, j] >= t
                if pos and y[i, j]:
                    tp += 1
                elif pos:
                    fp += 1
                elif y[i, j]:
                    fn += 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        den = beta2 * prec + rec
        curve.append((1 + beta2) * prec * rec / den if den else 0.0)
    return curve


def _mean(vals):
    return sum(vals) / len(vals) if vals else 0.0


def _std1(vals):
    if len(vals) < 2:
        return 0.0
    m = _mean(vals)
    return math.sqrt(sum((v - m) ** 2 for v in vals) / (len(vals) - 1))


def _brute_object(p, y):
    H, W = p.shape
    fg = [p[i, j] for i in range(H) for j in range(W) if y[i, j]]
    bg = [1 - p[i, j] for i in range(H) for j in range(W) if not y[i, j]]
    u = len(fg) / (H * W)
    eps = np.finfo(float).eps

    def score(vals):
        if not vals:
            return 0.0
        m = _mean(vals)
        return 2 * m / (m * m + 1 + _std1(vals) + eps)

    return u * score(fg) + (1 - u) * score(bg)


def _brute_ssim(pv, gv):
    n = len(pv)
    if n == 0:
        return 0.0
    eps = np.finfo(float).eps
    x, y = _mean(pv), _mean(gv)
    if n > 1:
        sx = sum((a - x) ** 2 for a in pv) / (n - 1)
        sy = sum((b - y) ** 2 for b in gv) / (n - 1)
        sxy = sum((a - x) * (b - y) for a, b in zip(pv, gv)) / (n - 1)
    else:
        sx = sy = sxy = 0.0
    num = 4 * x * y * sxy
    den = (x * x + y * y) * (sx + sy)
    if num != 0:
        return num / (den + eps)
    return 1.0 if den == 0 else 0.0


def _brute_region(p, y):
    H, W = p.shape
    count = sx = sy = 0
    for i in range(H):
        for j in range(W):
            if y[i, j]:
                count += 1
                sy += i
                sx += j
    if count == 0:
        cx, cy = round(W / 2), round(H / 2)
    else:
        cx, cy = round(sx / count) + 1, round(sy / count) + 1
    total = 0.0
    for rows, cols in (((0, cy), (0, cx)), ((0, cy), (cx, W)), ((cy, H), (0, cx)), ((cy, H), (cx, W))):
        pv, gv = [], []
        for i in range(*rows):
            for j in range(*cols):
                pv.append(p[i, j])
                gv.append(1.0 if y[i, j] else 0.0)
        if pv:
            total += len(pv) / (H * W) * _brute_ssim(pv, gv)
    return total


def brute_s_measure(p, y, alpha=0.5):
    p = np.asarray(p, float)
    y = np.asarray(y) > 0.5
    H, W = p.shape
    ratio = sum(1 for i in range(H) for j in range(W) if y[i, j]) / (H * W)
    mean_p = sum(p[i, j] for i in range(H) for j in range(W)) / (H * W)
    if ratio == 0:
        return 1 - mean_p
    if ratio == 1:
        return mean_p
    return max(0.0, alpha * _brute_object(p, y) + (1 - alpha) * _brute_region(p, y))


def brute_mae(p, y):
    p = np.asarray(p, float)
    y = np.asarray(y) > 0.5
    H, W = p.shape
    return sum(abs(p[i, j] - (1.0 if y[i, j] else 0.0)) for i in range(H) for j in range(W)) / (H * W)


def brute_metrics(p, y):
    """(f_max, f_mean, mae, s_alpha) by explicit per-pixel loops; maps up to 64x64."""
    p = np.asarray(p, float)
    yb = np.asarray(y) > 0.5
    if p.shape[0] > 64 or p.shape[1] > 64:
        raise ValueError("brute_metrics is limited to 64x64 maps")
    curve = _brute_fbeta_curve(p, yb)
    return max(curve), _mean(curve), brute_mae(p, yb), brute_s_measure(p, yb)


# ------------------------------------------------------------- optimizer

def hand_sgd_step(params, grads, bufs, lr, momentum=0.9, weight_decay=5e-4, decay_mask=None):
    """One heavy-ball step with L2 weight decay, written out per coordinate.

    ``bufs`` entries are ``None`` before the first step. Returns
    ``(new_params, new_bufs)`` as lists of float lists.
    """
    new_p, new_b = [], []
    for k, (p, g) in enumerate(zip(params, grads)):
        wd = weight_decay if decay_mask is None or decay_mask[k] else 0.0
        pp, bb = [], []
        for i in range(len(p)):
            d = g[i] + wd * p[i]
            b = d if bufs[k] is None else momentum * bufs[k][i] + d
            bb.append(b)
            pp.append(p[i] - lr * b)
        new_p.append(pp)
        new_b.append(bb)
    return new_p, new_b


def closed_form_lr(step, total, warmup, peak):
    """Triangle schedule: 0 -> peak over ``warmup`` steps, then down to 0 at ``total``."""
    if step <= warmup:
        return peak * step / warmup
    return peak * (total - step) / (total - warmup)
