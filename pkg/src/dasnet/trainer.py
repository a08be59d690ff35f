"""SGD training loop with warm-up + linear decay and two learning-rate groups."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .backbone import EncoderConfig
from .datasets import AugmentationConfig, Sample, augment, rescale_batch, resize_sample, to_tensors
from .losses import LossWeights, total_loss
from .model import DASNet, DASNetConfig, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # optimisation
    batch_size: int = 32
    epochs: int = 32
    lr_backbone: float = 0.005
    lr_heads: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_fraction: float = 0.05
    seed: int = 0
    dec_window: tuple = (7, 7)
    # ablation switches; BCE is always on
    use_iou: bool = True
    use_dam: bool = True
    use_dec: bool = True
    use_mls: bool = True
    use_caf: bool = True
    depth_free: bool = False
    # model
    n_stages: int = 5
    widths: tuple = (16, 32, 64, 64, 64)
    channels: int = 64
    resnet50: bool = False
    # data
    augment: bool = True
    flip_prob: float = 0.5
    crop_fraction: tuple = (0.8, 1.0)
    multiscale: tuple = (0.75, 1.0, 1.25)
    target_size: tuple = (352, 352)
    # output
    checkpoint_epochs: tuple = ()

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (BatchNorm needs batch statistics)")
        if not 0 < self.warmup_fraction <= 0.5:
            raise ValueError("warmup_fraction must lie in (0, 0.5]")
        if self.use_dec and not self.use_dam and not self.depth_free:
            raise ValueError("use_dec requires use_dam (the error weights come from the depth branch)")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")

    def model_config(self) -> DASNetConfig:
        enc = EncoderConfig(n_stages=self.n_stages, widths=self.widths, resnet50=self.resnet50)
        return DASNetConfig(encoder=enc, channels=self.channels, use_caf=self.use_caf,
                            use_dam=self.use_dam and not self.depth_free)

    def aug_config(self) -> AugmentationConfig:
        return AugmentationConfig(horizontal_flip_prob=self.flip_prob, crop_fraction=self.crop_fraction,
                                  multiscale=self.multiscale, target_size=self.target_size)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


def warmup_steps(total_steps, cfg: TrainConfig) -> int:
    return max(1, int(round(cfg.warmup_fraction * total_steps)))


def lr_at(step, total_steps, cfg: TrainConfig):
    """(backbone, heads) learning rates at ``step``: linear ramp up, then linear decay to 0."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warm = warmup_steps(total_steps, cfg)
    if step <= warm:
        num, den = step, warm
    else:
        num, den = total_steps - step, total_steps - warm
    return cfg.lr_backbone * num / den, cfg.lr_heads * num / den


def param_groups(model: DASNet, cfg: TrainConfig):
    """Backbone/head groups, each split so biases and norm parameters skip weight decay."""
    backbone_ids = {id(p) for p in model.backbone_parameters()}
    groups = {(b, d): [] for b in ("backbone", "heads") for d in (True, False)}
    for p in model.parameters():
        if not p.requires_grad:
            continue
        which = "backbone" if id(p) in backbone_ids else "heads"
        groups[(which, p.ndim > 1)].append(p)
    out = []
    for (which, decay), params in groups.items():
        if params:
            out.append({"params": params, "name": which, "weight_decay": cfg.weight_decay if decay else 0.0,
                        "lr": 0.0})
    return out


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.SGD(param_groups(model, cfg), lr=0.0, momentum=cfg.momentum)


@dataclass
class TrainResult:
    model: DASNet
    records: List[dict]
    checkpoints: List[Path] = field(default_factory=list)

    def epoch_means(self, key="total"):
        by_epoch = {}
        for r in self.records:
            by_epoch.setdefault(r["epoch"], []).append(r[key])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def _prepare(sample: Sample, cfg: TrainConfig, rng):
    if cfg.augment:
        return augment(sample, cfg.aug_config(), rng)
    if sample.shape != tuple(cfg.target_size):
        return resize_sample(sample, cfg.target_size)
    return sample


def train(samples: Sequence[Sample], cfg: TrainConfig, out_dir=None, model: Optional[DASNet] = None,
          on_step: Optional[Callable] = None) -> TrainResult:
    """Train on ``samples``; deterministic for a given ``cfg.seed``.

    Writes ``train_log.jsonl`` and checkpoints (``epoch_XXX.pt`` for each of
    ``cfg.checkpoint_epochs``, plus ``final.pt``) when ``out_dir`` is given.
    """
    if not samples:
        raise ValueError("empty training set")
    needs_depth = cfg.use_dam and not cfg.depth_free
    if needs_depth:
        lacking = [s.id for s in samples if s.depth is None]
        if lacking:
            raise ValueError(f"samples without depth (set depth_free): {', '.join(lacking[:5])}")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = DASNet(cfg.model_config())
    model.train()
    opt = make_optimizer(model, cfg)
    dtype = next(model.parameters()).dtype

    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    n_levels = model.cfg.n_stages
    weights = LossWeights.for_levels(n_levels, multi_level=cfg.use_mls)
    divisor = model.cfg.encoder.divisor
    use_dec = cfg.use_dec and needs_depth

    out = Path(out_dir) if out_dir else None
    log_file = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "w")

    records, ckpts = [], []
    step = 0
    t0 = time.time()
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = [_prepare(samples[i], cfg, rng) for i in idx]
                rgb, mask, depth = to_tensors(batch, dtype)
                if cfg.augment and len(cfg.multiscale) > 1:
                    factor = float(rng.choice(cfg.multiscale))
                    rgb, mask, depth = rescale_batch(rgb, mask, depth, factor, divisor)
                lr_b, lr_h = lr_at(step, total, cfg)
                for g in opt.param_groups:
                    g["lr"] = lr_b if g["name"] == "backbone" else lr_h

                bundle = model(rgb)
                res = total_loss(bundle, mask, depth if needs_depth else None, weights, cfg.dec_window,
                                 use_iou=cfg.use_iou, use_dec=use_dec, depth_free=not needs_depth)
                rec = {"step": step, "epoch": epoch, "lr_backbone": lr_b, "lr_heads": lr_h,
                       "total": float(res.total.detach()), **res.breakdown()}
                if not math.isfinite(rec["total"]):
                    _dump_failure(out, rec, [s.id for s in batch])
                    raise FloatingPointError(f"non-finite loss at step {step}: {rec}")
                opt.zero_grad(set_to_none=True)
                res.total.backward()
                opt.step()

                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec, sort_keys=True) + "\n")
                if on_step:
                    on_step(rec)
                step += 1
            log.info("epoch %d/%d  loss %.4f  (%.0fs)", epoch, cfg.epochs,
                     np.mean([r["total"] for r in records[-steps_per_epoch:]]), time.time() - t0)
            if out and epoch in cfg.checkpoint_epochs and epoch != cfg.epochs:
                ckpts.append(save_checkpoint(out / f"epoch_{epoch:03d}.pt", model,
                                             {"epoch": epoch, "train_config": cfg.to_dict()}))
    finally:
        if log_file:
            log_file.close()
    model.eval()
    if out:
        ckpts.append(save_checkpoint(out / "final.pt", model,
                                     {"epoch": cfg.epochs, "train_config": cfg.to_dict()}))
    return TrainResult(model=model, records=records, checkpoints=ckpts)


def _dump_failure(out, rec, ids):
    if out is None:
        return
    (out / "failure.json").write_text(json.dumps({"record": rec, "batch_ids": ids}, indent=2,
                                                 default=str))


# ------------------------------------------------------------ config file

def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in text or (text.startswith("(") and text.endswith(")")) or (text.startswith("[") and text.endswith("]")):
        items = [t for t in text.strip("()[]").split(",") if t.strip()]
        return tuple(_parse_value(t) for t in items)
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_overrides(pairs) -> dict:
    """``["key=value", ...]`` into a dict with ints/floats/bools/tuples parsed."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"expected key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


def read_config_file(path) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    lines = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return parse_overrides(lines)


def load_train_config(path=None, overrides=(), base: Optional[dict] = None) -> TrainConfig:
    d = dict(base or {})
    if path:
        d.update(read_config_file(path))
    d.update(parse_overrides(overrides))
    for f in fields(TrainConfig):
        v = d.get(f.name)
        if isinstance(v, list):
            v = d[f.name] = tuple(v)
        if isinstance(f.default, tuple) and v is not None and not isinstance(v, tuple):
            d[f.name] = (v, v) if f.name in ("target_size", "dec_window", "crop_fraction") else (v,)
    return TrainConfig.from_dict(d)
