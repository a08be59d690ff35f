"""Analytic parameter and multiply-add counts from one traced forward pass.

Convolutions count ``k_h * k_w * C_in / groups * C_out * H_out * W_out``
multiply-adds, linear layers ``in * out`` per row; normalisation, activations,
pooling and resampling are treated as free, following the usual convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import torch
import torch.nn as nn


@dataclass
class LayerRow:
    name: str
    kind: str
    out_shape: tuple
    params: int
    madds: int
    calls: int = 1


@dataclass
class ComplexityReport:
    rows: List[LayerRow]
    input_size: tuple
    extra_params: int = 0  # parameters owned by modules that never ran

    @property
    def params(self):
        return sum(r.params for r in self.rows) + self.extra_params

    @property
    def madds(self):
        return sum(r.madds for r in self.rows)

    def summary(self):
        return {"params": self.params, "madds": self.madds, "params_M": self.params / 1e6,
                "madds_G": self.madds / 1e9, "input_size": list(self.input_size)}

    def table(self):
        lines = [f"{'layer':60s} {'type':12s} {'output':>20s} {'params':>10s} {'MAdds':>14s}"]
        for r in self.rows:
            lines.append(f"{r.name:60s} {r.kind:12s} {str(r.out_shape):>20s} {r.params:10d} {r.madds:14d}")
        lines.append(f"{'total':60s} {'':12s} {'':>20s} {self.params:10d} {self.madds:14d}")
        return "\n".join(lines)


def conv_madds(m: nn.Conv2d, out: torch.Tensor) -> int:
    kh, kw = m.kernel_size
    return kh * kw * (m.in_channels // m.groups) * m.out_channels * out.shape[-2] * out.shape[-1]


def linear_madds(m: nn.Linear, out: torch.Tensor) -> int:
    # the traced batch holds one image
    return m.in_features * m.out_features * (out.numel() // out.shape[-1])


def _own_params(m: nn.Module) -> int:
    return sum(p.numel() for p in m.parameters(recurse=False))


def count(model: nn.Module, input_size=(352, 352), in_channels=3) -> ComplexityReport:
    """Trace one forward pass of a 1-image batch and tabulate every leaf layer."""
    rows = {}
    hooks = []

    def hook(name):
        def fn(m, inputs, out):
            if isinstance(out, (tuple, list)):
                out = out[0]
            if isinstance(m, nn.Conv2d):
                madds = conv_madds(m, out)
            elif isinstance(m, nn.Linear):
                madds = linear_madds(m, out)
            else:
                madds = 0
            if name in rows:
                rows[name].madds += madds
                rows[name].calls += 1
            else:
                rows[name] = LayerRow(name, type(m).__name__, tuple(out.shape[1:]), _own_params(m), madds)
        return fn

    for name, m in model.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)) or _own_params(m):
            hooks.append(m.register_forward_hook(hook(name)))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            param = next(model.parameters())
            model(torch.zeros(1, in_channels, *input_size, dtype=param.dtype))
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    seen = sum(r.params for r in rows.values())
    total = sum(p.numel() for p in model.parameters())
    return ComplexityReport(rows=list(rows.values()), input_size=tuple(input_size), extra_params=total - seen)
