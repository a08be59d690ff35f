"""DASNet assembly: shared encoder, depth-awareness branch, saliency branch.

Depth maps only supervise training; :meth:`DASNet.forward` takes RGB alone.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ASPP, EncoderConfig, build_encoder
from .caf import make_fusion

CHECKPOINT_FORMAT = "dasnet-checkpoint"
CHECKPOINT_VERSION = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class DASNetConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    channels: int = 64
    aspp_rates: tuple = (6, 12, 18)
    use_caf: bool = True
    use_dam: bool = True
    # True: the refined (saliency x depth) feature of level i+1 feeds level i.
    # False: the saliency branch decodes on its own and refinement is a side path.
    refine_feedback: bool = True

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.aspp_rates = tuple(self.aspp_rates)

    @property
    def n_stages(self):
        return self.encoder.n_stages

    @classmethod
    def miniature(cls, **kw):
        return cls(encoder=EncoderConfig(n_stages=3, widths=(8, 16, 16)), channels=16, **kw)

    def to_dict(self):
        d = asdict(self)
        d["encoder"]["widths"] = list(d["encoder"]["widths"])
        d["aspp_rates"] = list(d["aspp_rates"])
        return d


@dataclass
class PredictionBundle:
    saliency: List[torch.Tensor]  # level 1 (finest) first, each N x 1 x H x W
    depth: Optional[torch.Tensor]  # N x 1 x H x W, None without the depth branch
    native_sizes: List[tuple] = field(default_factory=list)  # per level, before upsampling

    @property
    def finest(self):
        return self.saliency[0]


class DASNet(nn.Module):
    def __init__(self, cfg: Optional[DASNetConfig] = None):
        super().__init__()
        cfg = cfg or DASNetConfig()
        self.cfg = cfg
        c = cfg.channels
        widths = cfg.encoder.widths
        S = cfg.n_stages

        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.encoder = build_encoder(cfg.encoder)
        self.aspp = ASPP(widths[-1], c, cfg.aspp_rates)

        def fusions(count):
            return nn.ModuleList(make_fusion(widths[i], c, c, cfg.use_caf) for i in range(count))

        self.sod_fuse = fusions(S)
        self.sod_heads = nn.ModuleList(nn.Conv2d(c, 1, 3, padding=1) for _ in range(S))
        if cfg.use_dam:
            self.depth_fuse = fusions(S)
            self.cross_fuse = nn.ModuleList(make_fusion(c, c, c, cfg.use_caf) for _ in range(S))
            self.depth_head = nn.Conv2d(c, 1, 3, padding=1)

    def backbone_parameters(self):
        return self.encoder.parameters()

    def forward(self, rgb: torch.Tensor) -> PredictionBundle:
        size = rgb.shape[-2:]
        feats = self.encoder((rgb - self.mean) / self.std)
        top = self.aspp(feats[-1])
        S = len(feats)

        depth_feats = None
        depth = None
        if self.cfg.use_dam:
            depth_feats = [None] * S
            prev = top
            for i in reversed(range(S)):
                prev = depth_feats[i] = self.depth_fuse[i](feats[i], prev)
            depth = _to_map(self.depth_head(depth_feats[0]), size)

        sal_feats = self._decode_saliency(feats, top, depth_feats)
        saliency = [_to_map(head(f), size) for head, f in zip(self.sod_heads, sal_feats)]
        native = [tuple(f.shape[-2:]) for f in sal_feats]
        return PredictionBundle(saliency=saliency, depth=depth, native_sizes=native)

    def _decode_saliency(self, feats, top, depth_feats):
        S = len(feats)
        out = [None] * S
        prev = top
        for i in reversed(range(S)):
            s = self.sod_fuse[i](feats[i], prev)
            r = self.cross_fuse[i](s, depth_feats[i]) if depth_feats is not None else s
            out[i] = r
            prev = r if self.cfg.refine_feedback else s
        return out

    @torch.no_grad()
    def predict(self, rgb: torch.Tensor) -> torch.Tensor:
        """Finest saliency map (N x 1 x H x W) in inference mode."""
        was_training = self.training
        self.eval()
        try:
            return self.forward(rgb).finest
        finally:
            self.train(was_training)


def _to_map(logits, size):
    p = torch.sigmoid(logits)
    if p.shape[-2:] != size:
        p = F.interpolate(p, size=size, mode="bilinear", align_corners=False)
    return p


def predict_image(model: DASNet, rgb: np.ndarray) -> np.ndarray:
    """H x W x 3 float array in [0, 1] to an H x W saliency array."""
    param = next(model.parameters())
    x = torch.from_numpy(np.ascontiguousarray(rgb)).permute(2, 0, 1)[None].to(param.dtype)
    return model.predict(x)[0, 0].cpu().numpy()


# ----------------------------------------------------------- checkpoints

def save_checkpoint(path, model: DASNet, extra: Optional[dict] = None):
    """Single-file checkpoint: version header, config echo, named shapes and tensors."""
    state = model.state_dict()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "state_dict": state,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path, map_location="cpu"):
    """Return ``(model, extra)``; the model is in eval mode."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a DASNet checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    model = DASNet(DASNetConfig(**payload["config"]))
    state = payload["state_dict"]
    dtype = next(iter(state.values())).dtype
    if dtype == torch.float64:
        model.double()
    for name, shape in payload["shapes"].items():
        if list(state[name].shape) != shape:
            raise ValueError(f"shape metadata mismatch for {name}")
    model.load_state_dict(state)
    model.eval()
    return model, payload.get("extra", {})
