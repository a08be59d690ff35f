from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, dilation=1,
                 padding_mode="zeros"):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride,
                      padding=dilation * (kernel_size // 2), dilation=dilation,
                      bias=False, padding_mode=padding_mode),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


@dataclass
class EncoderConfig:
    n_stages: int = 5
    widths: tuple = (16, 32, 64, 64, 64)
    resnet50: bool = False

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.resnet50:
            if self.n_stages != 5:
                raise ValueError("the ResNet-50 encoder has exactly 5 stages")
            self.widths = (64, 256, 512, 1024, 2048)
        if len(self.widths) != self.n_stages:
            raise ValueError(f"{len(self.widths)} widths given for {self.n_stages} stages")

    @property
    def divisor(self):
        return 2 ** self.n_stages


class ToyEncoder(nn.Module):
    """Plain conv-BN-ReLU stages, each halving the resolution."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        cin = 3
        for w in cfg.widths:
            stages.append(nn.Sequential(ConvBNReLU(cin, w, stride=2), ConvBNReLU(w, w)))
            cin = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        check_divisible(x, self.cfg.divisor)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ResNet50Encoder(nn.Module):
    """ResNet-50 body split into five stride-2 stages (randomly initialised)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        from torchvision.models import resnet50

        self.cfg = cfg
        net = resnet50(weights=None)
        self.stages = nn.ModuleList([
            nn.Sequential(net.conv1, net.bn1, net.relu),
            nn.Sequential(net.maxpool, net.layer1),
            net.layer2,
            net.layer3,
            net.layer4,
        ])

    def forward(self, x):
        check_divisible(x, self.cfg.divisor)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def check_divisible(x, divisor):
    h, w = x.shape[-2:]
    if h % divisor or w % divisor:
        raise ValueError(f"input size {h}x{w} must be divisible by {divisor} (2**n_stages)")


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    return ResNet50Encoder(cfg) if cfg.resnet50 else ToyEncoder(cfg)


class ASPP(nn.Module):
    """Atrous spatial pyramid pooling: 1x1, three dilated 3x3 and an image-pool branch."""

    def __init__(self, in_channels, out_channels=64, rates=(6, 12, 18)):
        super().__init__()
        self.rates = tuple(rates)
        self.branches = nn.ModuleList(
            [ConvBNReLU(in_channels, out_channels, kernel_size=1)]
            # replicate padding keeps a constant field constant at the borders
            + [ConvBNReLU(in_channels, out_channels, dilation=r, padding_mode="replicate")
               for r in self.rates]
        )
        # no BatchNorm on the pooled branch: a 1x1 map has no batch statistics at N=1
        self.image_pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_channels, out_channels, 1),
            nn.ReLU(inplace=True),
        )
        self.project = ConvBNReLU(out_channels * (len(self.rates) + 2), out_channels, kernel_size=1)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        pooled = self.image_pool(x)
        outs.append(pooled.expand(-1, -1, x.shape[2], x.shape[3]))
        return self.project(torch.cat(outs, dim=1))
