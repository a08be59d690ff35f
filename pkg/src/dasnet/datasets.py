"""Synthetic RGBD scenes, on-disk triplet datasets and training augmentation.

A dataset directory looks like::

    root/rgb/<stem>.png     8-bit RGB
    root/depth/<stem>.png   16-bit grayscale, optional
    root/mask/<stem>.png    8-bit grayscale, 0 or 255
    root/manifest.json      written by the generator
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

DEPTH_EPS = 1e-3
SHAPE_KINDS = ("ellipse", "rectangle", "blob")


@dataclass
class Sample:
    id: str
    rgb: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray  # H x W uint8 in {0, 1}
    depth: Optional[np.ndarray] = None  # H x W float32 in (0, 1]

    def __post_init__(self):
        h, w = self.mask.shape
        if self.rgb.shape != (h, w, 3):
            raise ValueError(f"{self.id}: rgb shape {self.rgb.shape} does not match mask {(h, w)}")
        if self.depth is not None:
            if self.depth.shape != (h, w):
                raise ValueError(f"{self.id}: depth shape {self.depth.shape} does not match mask {(h, w)}")
            if not np.all(self.depth > 0):
                raise ValueError(f"{self.id}: depth must be strictly positive")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"{self.id}: mask must be binary")

    @property
    def shape(self):
        return self.mask.shape


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic scene.

    Fields left as ``None`` are drawn from ``seed``; :func:`resolve_spec`
    returns the fully populated spec that the generator actually used.
    Objects are listed far to near, so the last one is the salient object.
    """

    seed: int
    canvas: tuple = (128, 128)
    n_objects: int = 2
    kinds: Optional[tuple] = None
    depths: Optional[tuple] = None
    background_depth: Optional[tuple] = None  # (far, near) ends of the ramp
    gradient_angle: Optional[float] = None
    noise: Optional[float] = None

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("canvas", "kinds", "depths", "background_depth"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def _check_spec(spec: SceneSpec):
    h, w = spec.canvas
    if h < 32 or w < 32:
        raise ValueError(f"canvas must be at least 32x32, got {h}x{w}")
    if not 1 <= spec.n_objects <= 3:
        raise ValueError(f"n_objects must be in 1..3, got {spec.n_objects}")
    if spec.kinds is not None:
        if len(spec.kinds) != spec.n_objects:
            raise ValueError("kinds must list one shape per object")
        bad = set(spec.kinds) - set(SHAPE_KINDS)
        if bad:
            raise ValueError(f"unknown shape kinds {sorted(bad)}; expected {SHAPE_KINDS}")
    if spec.depths is not None:
        if len(spec.depths) != spec.n_objects:
            raise ValueError("depths must list one value per object")
        if not all(DEPTH_EPS <= d <= 1.0 for d in spec.depths):
            raise ValueError("object depths must lie in (0, 1]")
        if spec.n_objects > 1 and min(spec.depths[:-1]) <= spec.depths[-1]:
            raise ValueError("the last object must be strictly nearest (smallest depth)")


def _draw_params(spec: SceneSpec):
    # Every random value is drawn unconditionally and in a fixed order so that
    # overriding one field never shifts the stream for the others.
    rng = np.random.default_rng(spec.seed)
    n = spec.n_objects
    h, w = spec.canvas
    p = {}
    p["kinds"] = tuple(SHAPE_KINDS[i] for i in rng.integers(0, 3, size=3))[:n]
    far = rng.uniform(0.85, 1.0)
    near = rng.uniform(0.6, 0.8)
    p["background_depth"] = (float(far), float(near))
    p["gradient_angle"] = float(rng.uniform(0, 2 * math.pi))
    p["noise"] = float(rng.uniform(0.02, 0.06))
    distractor_depths = np.sort(rng.uniform(0.35, 0.55, size=2))[::-1]
    salient_depth = rng.uniform(0.1, 0.3)
    p["depths"] = tuple(float(d) for d in distractor_depths[: n - 1]) + (float(salient_depth),)

    p["bg_color"] = rng.uniform(0.25, 0.75, size=3)
    p["bg_tilt"] = rng.uniform(-0.15, 0.15, size=3)
    # salient colour: push each channel away from the background
    direction = rng.choice([-1.0, 1.0], size=3)
    p["salient_color"] = np.clip(p["bg_color"] + direction * rng.uniform(0.35, 0.6, size=3), 0.0, 1.0)
    p["distractor_offsets"] = rng.uniform(-0.12, 0.12, size=(2, 3))

    side = min(h, w)
    geoms = []
    for k in range(3):
        salient = k == n - 1
        r = side * (rng.uniform(0.16, 0.28) if salient else rng.uniform(0.08, 0.16))
        aspect = rng.uniform(0.6, 1.0)
        theta = rng.uniform(0, math.pi)
        cy = rng.uniform(0.25, 0.75) * h
        cx = rng.uniform(0.25, 0.75) * w
        harmonics = rng.uniform(0.0, 0.15, size=3)
        phases = rng.uniform(0, 2 * math.pi, size=3)
        geoms.append(dict(r=r, aspect=aspect, theta=theta, cy=cy, cx=cx,
                          harmonics=harmonics, phases=phases))
    p["geoms"] = geoms[:n]
    p["texture"] = rng.normal(0.0, 1.0, size=(h, w, 3))
    return p


def resolve_spec(spec: SceneSpec) -> SceneSpec:
    _check_spec(spec)
    p = _draw_params(spec)
    return replace(
        spec,
        kinds=spec.kinds if spec.kinds is not None else p["kinds"],
        depths=spec.depths if spec.depths is not None else p["depths"],
        background_depth=spec.background_depth if spec.background_depth is not None else p["background_depth"],
        gradient_angle=spec.gradient_angle if spec.gradient_angle is not None else p["gradient_angle"],
        noise=spec.noise if spec.noise is not None else p["noise"],
    )


def _footprint(kind, g, yy, xx):
    dy, dx = yy - g["cy"], xx - g["cx"]
    c, s = math.cos(g["theta"]), math.sin(g["theta"])
    u = c * dx + s * dy
    v = -s * dx + c * dy
    a, b = g["r"], g["r"] * g["aspect"]
    if kind == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    ang = np.arctan2(v, u)
    radius = a * (1.0 + sum(h * np.cos((i + 2) * ang + ph)
                            for i, (h, ph) in enumerate(zip(g["harmonics"], g["phases"]))))
    return np.hypot(u, v) <= radius


def generate_scene(spec: SceneSpec) -> Sample:
    """Render one scene; equal specs give bitwise-equal samples."""
    full = resolve_spec(spec)
    p = _draw_params(spec)
    h, w = full.canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy += 0.5
    xx += 0.5

    # ramp in [0, 1] along the gradient direction
    ca, sa = math.cos(full.gradient_angle), math.sin(full.gradient_angle)
    proj = ca * (xx / w - 0.5) + sa * (yy / h - 0.5)
    ramp = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)

    far, near = full.background_depth
    depth = far - (far - near) * ramp
    rgb = p["bg_color"][None, None, :] + p["bg_tilt"][None, None, :] * (ramp[..., None] - 0.5)

    mask = np.zeros((h, w), dtype=np.uint8)
    for k, (kind, d, g) in enumerate(zip(full.kinds, full.depths, p["geoms"])):
        fp = _footprint(kind, g, yy, xx)
        salient = k == full.n_objects - 1
        color = p["salient_color"] if salient else np.clip(p["bg_color"] + p["distractor_offsets"][k], 0, 1)
        rgb[fp] = color
        depth[fp] = d
        if salient:
            mask = fp.astype(np.uint8)

    rgb = rgb + full.noise * p["texture"]
    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)
    depth = np.clip(depth, DEPTH_EPS, 1.0).astype(np.float32)
    return Sample(id=f"scene_{spec.seed}", rgb=rgb, mask=mask, depth=depth)


def scene_seeds(base_seed: int, n: int) -> list:
    """Per-sample seeds derived from one base seed."""
    return [int(np.random.SeedSequence([base_seed, i]).generate_state(1)[0]) for i in range(n)]


def random_specs(base_seed: int, n: int, canvas=(128, 128)) -> list:
    specs = []
    for s in scene_seeds(base_seed, n):
        n_obj = int(np.random.default_rng([s, 1]).integers(1, 4))
        specs.append(SceneSpec(seed=s, canvas=tuple(canvas), n_objects=n_obj))
    return specs


def synthetic_dataset(base_seed: int, n: int, canvas=(128, 128)) -> list:
    return [generate_scene(spec) for spec in random_specs(base_seed, n, canvas)]


# ---------------------------------------------------------------- disk I/O

def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def write_sample(root, sample: Sample, stem: Optional[str] = None):
    root = Path(root)
    stem = stem or sample.id
    for sub in ("rgb", "mask") + (("depth",) if sample.depth is not None else ()):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rgb8 = np.round(np.clip(sample.rgb, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(rgb8).save(root / "rgb" / f"{stem}.png")
    Image.fromarray(sample.mask.astype(np.uint8) * 255).save(root / "mask" / f"{stem}.png")
    if sample.depth is not None:
        d16 = np.round(np.clip(sample.depth, 0, 1) * 65535).astype(np.uint16)
        Image.fromarray(d16).save(root / "depth" / f"{stem}.png")


def read_rgb(path) -> np.ndarray:
    arr = _read_png(Path(path))
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return (arr[..., :3].astype(np.float32) / 255.0)


def load_dataset(root, split: Optional[str] = None) -> list:
    """Load every rgb/mask(/depth) triplet under ``root`` (or ``root/split``)."""
    base = Path(root) / split if split else Path(root)
    rgb_dir, mask_dir, depth_dir = base / "rgb", base / "mask", base / "depth"
    if not rgb_dir.is_dir():
        raise FileNotFoundError(f"no rgb/ directory under {base}")
    stems = sorted(p.stem for p in rgb_dir.glob("*.png"))
    missing = [s for s in stems if not (mask_dir / f"{s}.png").exists()]
    if missing:
        raise FileNotFoundError(f"missing masks for stems: {', '.join(missing)}")
    has_depth = depth_dir.is_dir()

    samples = []
    for stem in stems:
        rgb = read_rgb(rgb_dir / f"{stem}.png")
        m = _read_png(mask_dir / f"{stem}.png")
        if m.ndim == 3:
            m = m[..., 0]
        if m.shape != rgb.shape[:2]:
            raise ValueError(f"mask/{stem}.png is {m.shape}, rgb is {rgb.shape[:2]}")
        mask = (m > 127).astype(np.uint8)
        depth = None
        dpath = depth_dir / f"{stem}.png"
        if has_depth:
            if not dpath.exists():
                raise FileNotFoundError(f"missing depth for stem: {stem}")
            raw = _read_png(dpath)
            if raw.shape != rgb.shape[:2]:
                raise ValueError(f"depth/{stem}.png is {raw.shape}, rgb is {rgb.shape[:2]}")
            scale = 65535.0 if raw.dtype != np.uint8 else 255.0
            depth = np.clip(raw.astype(np.float32) / scale, DEPTH_EPS, 1.0)
        samples.append(Sample(id=stem, rgb=rgb, mask=mask, depth=depth))
    return samples


def write_dataset(root, specs: Sequence[SceneSpec], extra: Optional[dict] = None):
    """Render ``specs`` into ``root`` and record them in ``manifest.json``."""
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        raise FileExistsError(f"target directory {root} is not empty")
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, spec in enumerate(specs):
        stem = f"{i:05d}"
        write_sample(root, generate_scene(spec), stem)
        entries.append({"stem": stem, "spec": resolve_spec(spec).to_dict()})
    manifest = {"generator": "dasnet.datasets.generate_scene", "samples": entries}
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


# ------------------------------------------------------------ augmentation

@dataclass
class AugmentationConfig:
    horizontal_flip_prob: float = 0.5
    crop_fraction: tuple = (0.8, 1.0)
    multiscale: tuple = (0.75, 1.0, 1.25)
    target_size: tuple = (352, 352)

    def __post_init__(self):
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ValueError("horizontal_flip_prob must be in [0, 1]")
        lo, hi = self.crop_fraction
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"invalid crop_fraction range {self.crop_fraction}")


@dataclass
class AugParams:
    flip: bool
    top: int
    left: int
    height: int
    width: int


def sample_aug_params(shape, cfg: AugmentationConfig, rng: np.random.Generator) -> AugParams:
    h, w = shape
    flip = bool(rng.random() < cfg.horizontal_flip_prob)
    frac = rng.uniform(*cfg.crop_fraction)
    ch, cw = int(round(h * frac)), int(round(w * frac))
    if min(ch, cw) < 8:
        raise ValueError(f"crop fraction {frac:.3f} gives a {ch}x{cw} window, below the 8 px minimum")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return AugParams(flip, top, left, ch, cw)


def _resize(arr: np.ndarray, size, mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    t = t.permute(2, 0, 1)[None] if t.ndim == 3 else t[None, None]
    if tuple(t.shape[-2:]) != tuple(size):
        kw = {"align_corners": False} if mode == "bilinear" else {}
        t = F.interpolate(t, size=tuple(size), mode=mode, **kw)
    t = t[0].permute(1, 2, 0) if arr.ndim == 3 else t[0, 0]
    return t.numpy()


def resize_sample(sample: Sample, size) -> Sample:
    rgb = np.clip(_resize(sample.rgb, size, "bilinear"), 0, 1)
    mask = (_resize(sample.mask, size, "nearest-exact") >= 0.5).astype(np.uint8)
    depth = None
    if sample.depth is not None:
        depth = np.clip(_resize(sample.depth, size, "bilinear"), DEPTH_EPS, 1.0)
    return Sample(id=sample.id, rgb=rgb, mask=mask, depth=depth)


def apply_aug_params(sample: Sample, params: AugParams, target_size) -> Sample:
    def geo(a):
        if a is None:
            return None
        if params.flip:
            a = a[:, ::-1]
        return a[params.top:params.top + params.height, params.left:params.left + params.width]

    cropped = Sample(id=sample.id, rgb=geo(sample.rgb), mask=geo(sample.mask), depth=geo(sample.depth))
    return resize_sample(cropped, target_size)


def augment(sample: Sample, cfg: AugmentationConfig, rng: np.random.Generator) -> Sample:
    """Random horizontal flip and crop, then resize to ``cfg.target_size``.

    The multi-scale factors in ``cfg`` are applied per batch by the trainer
    (see :func:`rescale_batch`) so that every sample in a batch shares a size.
    """
    params = sample_aug_params(sample.shape, cfg, rng)
    return apply_aug_params(sample, params, cfg.target_size)


def rescale_batch(rgb, mask, depth, factor: float, multiple: int):
    """Resize a batch (N x C x H x W tensors) by ``factor``, snapping to ``multiple``."""
    h, w = rgb.shape[-2:]
    size = (max(multiple, int(round(h * factor / multiple)) * multiple),
            max(multiple, int(round(w * factor / multiple)) * multiple))
    if size == (h, w):
        return rgb, mask, depth
    rgb = F.interpolate(rgb, size=size, mode="bilinear", align_corners=False)
    mask = (F.interpolate(mask, size=size, mode="nearest-exact") >= 0.5).to(mask.dtype)
    if depth is not None:
        depth = F.interpolate(depth, size=size, mode="bilinear", align_corners=False).clamp_min(DEPTH_EPS)
    return rgb, mask, depth


def to_tensors(samples: Sequence[Sample], dtype=torch.float32):
    """Stack samples into N x 3 x H x W rgb, N x 1 x H x W mask and depth tensors."""
    rgb = torch.from_numpy(np.stack([s.rgb for s in samples])).permute(0, 3, 1, 2).to(dtype)
    mask = torch.from_numpy(np.stack([s.mask for s in samples])).unsqueeze(1).to(dtype)
    depth = None
    if all(s.depth is not None for s in samples):
        depth = torch.from_numpy(np.stack([s.depth for s in samples])).unsqueeze(1).to(dtype)
    return rgb.contiguous(), mask, depth
