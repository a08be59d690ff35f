"""Two-input feature fusion: channel-aware fusion and the plain summation baseline."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ConvBNReLU


def _align(f_alpha, f_beta):
    if f_alpha.shape[-2] == 0 or f_alpha.shape[-1] == 0 or f_beta.shape[-2] == 0 or f_beta.shape[-1] == 0:
        raise ValueError("fusion inputs must have non-empty spatial dimensions")
    if f_beta.shape[-2:] != f_alpha.shape[-2:]:
        f_beta = F.interpolate(f_beta, size=f_alpha.shape[-2:], mode="bilinear", align_corners=False)
    return f_beta


def _check_channels(module, f_alpha, f_beta):
    if f_alpha.shape[1] != module.in_alpha or f_beta.shape[1] != module.in_beta:
        raise ValueError(
            f"{type(module).__name__} expects ({module.in_alpha}, {module.in_beta}) input channels, "
            f"got ({f_alpha.shape[1]}, {f_beta.shape[1]})")


class CAF(nn.Module):
    """Channel-aware fusion of ``f_alpha`` and ``f_beta``.

    Output lives on ``f_alpha``'s grid; ``f_beta`` is bilinearly resampled to it
    first. Both inputs are encoded to ``channels`` features, mixed as
    ``[a, b, a*b]``, reweighted by a sigmoid channel attention computed from the
    global average of that mix, and decoded back into each source stream before
    the two streams are merged.
    """

    def __init__(self, in_alpha, in_beta, channels=64):
        super().__init__()
        self.in_alpha, self.in_beta, self.channels = in_alpha, in_beta, channels
        c3 = 3 * channels
        self.enc_alpha = ConvBNReLU(in_alpha, channels)
        self.enc_beta = ConvBNReLU(in_beta, channels)
        self.channel_fc = nn.Linear(c3, c3)
        self.dec_u1 = ConvBNReLU(c3, channels)
        self.dec_u2 = ConvBNReLU(c3, channels)
        self.reduce_v1 = ConvBNReLU(channels, channels)
        self.reduce_v2 = ConvBNReLU(channels, channels)
        self.out = ConvBNReLU(2 * channels, channels)

    def parts(self, f_alpha, f_beta):
        """All intermediate tensors of one fusion, keyed by name."""
        _check_channels(self, f_alpha, f_beta)
        f_beta = _align(f_alpha, f_beta)
        a = self.enc_alpha(f_alpha)
        b = self.enc_beta(f_beta)
        mixed = torch.cat([a, b, a * b], dim=1)
        pooled = mixed.mean(dim=(2, 3))
        attention = torch.sigmoid(self.channel_fc(pooled))
        u = mixed * attention[:, :, None, None]
        v1 = self.reduce_v1(a + self.dec_u1(u))
        v2 = self.reduce_v2(b + self.dec_u2(u))
        out = self.out(torch.cat([v1, v2], dim=1))
        return dict(a=a, b=b, mixed=mixed, pooled=pooled, attention=attention, u=u, out=out)

    def forward(self, f_alpha, f_beta):
        return self.parts(f_alpha, f_beta)["out"]


class SumFusion(nn.Module):
    """Lateral conv on each input, upsample, element-wise sum."""

    def __init__(self, in_alpha, in_beta, channels=64):
        super().__init__()
        self.in_alpha, self.in_beta, self.channels = in_alpha, in_beta, channels
        self.lateral_alpha = ConvBNReLU(in_alpha, channels)
        self.lateral_beta = ConvBNReLU(in_beta, channels)

    def forward(self, f_alpha, f_beta):
        _check_channels(self, f_alpha, f_beta)
        f_beta = _align(f_alpha, f_beta)
        return self.lateral_alpha(f_alpha) + self.lateral_beta(f_beta)


def make_fusion(in_alpha, in_beta, channels=64, use_caf=True) -> nn.Module:
    cls = CAF if use_caf else SumFusion
    return cls(in_alpha, in_beta, channels)
