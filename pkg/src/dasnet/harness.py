"""Experiment drivers shared by the CLI and the acceptance tests.

Training runs are content-addressed: a run directory is named by a hash of the
training config and the data it sees, so an identical request (for example the
full model in both the ablation and the window sweep) is trained once.
"""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .datasets import Sample, synthetic_dataset
from .losses import dec_weights
from .metrics import MetricReport, evaluate_dataset
from .model import DASNet, load_checkpoint, predict_image
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

# Each row switches on components cumulatively; BCE is always on.
ABLATION_ROWS = (
    ("BCE", dict(use_caf=False, use_iou=False, use_dam=False, use_dec=False, use_mls=False)),
    ("BCE+CAF", dict(use_caf=True, use_iou=False, use_dam=False, use_dec=False, use_mls=False)),
    ("BCE+CAF+DAM", dict(use_caf=True, use_iou=False, use_dam=True, use_dec=False, use_mls=False)),
    ("BCE+CAF+DAM+DEC", dict(use_caf=True, use_iou=False, use_dam=True, use_dec=True, use_mls=False)),
    ("BCE+CAF+IoU", dict(use_caf=True, use_iou=True, use_dam=False, use_dec=False, use_mls=False)),
    ("BCE+CAF+IoU+DAM", dict(use_caf=True, use_iou=True, use_dam=True, use_dec=False, use_mls=False)),
    ("BCE+CAF+IoU+DAM+DEC", dict(use_caf=True, use_iou=True, use_dam=True, use_dec=True, use_mls=False)),
    ("BCE+CAF+IoU+DAM+DEC+MLS", dict(use_caf=True, use_iou=True, use_dam=True, use_dec=True, use_mls=True)),
)
ABLATION_COLUMNS = ("components", "BCE", "CAF", "IoU", "DAM", "DEC", "MLS", "f_mean", "mae")
_SWITCH_COLUMNS = (("CAF", "use_caf"), ("IoU", "use_iou"), ("DAM", "use_dam"), ("DEC", "use_dec"),
                   ("MLS", "use_mls"))

WINDOW_SIZES = (1, 3, 5, 7, 15, 31)
DEFAULT_WINDOW = 7
SWEEP_COLUMNS = ("window", "f_max", "f_mean", "mae", "s_alpha")

# Desk scale: 64x64 scenes, a 512/64 split and 10 epochs; see README.
DESK_CANVAS = (64, 64)
DESK_TRAIN, DESK_VAL = 512, 64
DESK_DATA_SEED = 1


def desk_config(**overrides) -> TrainConfig:
    base = dict(epochs=10, batch_size=8, channels=32, target_size=DESK_CANVAS, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def desk_split(seed=DESK_DATA_SEED, n_train=DESK_TRAIN, n_val=DESK_VAL, canvas=DESK_CANVAS):
    data = synthetic_dataset(seed, n_train + n_val, canvas)
    return data[:n_train], data[n_train:]


# -------------------------------------------------------------- manifests

def code_version() -> str:
    from . import __version__

    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_manifest(out_dir, command: str, config: dict, seed=None, outputs=(), started=None) -> Path:
    """Write ``run_manifest.json`` describing how ``out_dir`` was produced."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    now = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "code_version": code_version(),
        "python": sys.version.split()[0],
        "torch": torch.__version__,
        "platform": platform.platform(),
        "started": started or now,
        "finished": now,
        "outputs": sorted(str(o) for o in outputs),
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def utc_now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ------------------------------------------------------------------- runs

def data_fingerprint(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.id.encode())
        for a in (s.rgb, s.mask, s.depth):
            h.update(b"-" if a is None else np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def run_key(cfg: TrainConfig, train_samples, val_samples) -> str:
    payload = json.dumps({"config": cfg.to_dict(), "train": data_fingerprint(train_samples),
                          "val": data_fingerprint(val_samples)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def predict_samples(model: DASNet, samples: Sequence[Sample]) -> Dict[str, np.ndarray]:
    return {s.id: predict_image(model, s.rgb) for s in samples}


def evaluate_model(model: DASNet, samples, workers=1) -> MetricReport:
    return evaluate_dataset(samples, predict_samples(model, samples), workers=workers)


@dataclass
class RunResult:
    key: str
    run_dir: Path
    config: dict
    metrics: dict
    seconds: float
    cached: bool = False


def train_and_evaluate(train_samples, val_samples, cfg: TrainConfig, runs_dir, label="run",
                       workers=1) -> RunResult:
    """Train on ``train_samples``, score on ``val_samples``; reuse a finished identical run."""
    key = run_key(cfg, train_samples, val_samples)
    run_dir = Path(runs_dir) / key
    done = run_dir / "result.json"
    if done.exists():
        r = json.loads(done.read_text())
        log.info("%s: reusing run %s", label, key)
        return RunResult(key, run_dir, r["config"], r["metrics"], r["seconds"], cached=True)
    started = utc_now()
    t0 = time.time()
    res = train(train_samples, cfg, run_dir)
    seconds = time.time() - t0
    report = evaluate_model(res.model, val_samples, workers)
    report.write(run_dir / "eval")
    result = {"label": label, "key": key, "config": cfg.to_dict(), "metrics": report.aggregate,
              "seconds": seconds, "n_train": len(train_samples), "n_val": len(val_samples)}
    done.write_text(json.dumps(result, indent=2, sort_keys=True))
    write_manifest(run_dir, "train+eval", cfg.to_dict(), cfg.seed,
                   ["train_log.jsonl", "final.pt", "eval", "result.json"], started)
    return RunResult(key, run_dir, cfg.to_dict(), report.aggregate, seconds)


def _write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def ablate(train_samples, val_samples, base: TrainConfig, out_dir, runs_dir=None, workers=1) -> List[dict]:
    """Train and score every ablation row; writes ``ablation.csv``."""
    if any(s.depth is None for s in train_samples):
        raise ValueError("the ablation needs depth maps for every training sample")
    out = Path(out_dir)
    runs_dir = Path(runs_dir) if runs_dir else out / "runs"
    rows = []
    for label, switches in ABLATION_ROWS:
        cfg = replace(base, **switches)
        r = train_and_evaluate(train_samples, val_samples, cfg, runs_dir, label, workers)
        row = {"components": label, "BCE": True, "f_mean": r.metrics["f_mean"], "mae": r.metrics["mae"],
               "run": r.key, "seconds": r.seconds}
        row.update({col: switches[key] for col, key in _SWITCH_COLUMNS})
        rows.append(row)
        log.info("%-26s f_mean %.4f  mae %.4f", label, row["f_mean"], row["mae"])
    _write_csv(out / "ablation.csv", ABLATION_COLUMNS, rows)
    (out / "ablation_runs.json").write_text(json.dumps(rows, indent=2))
    return rows


def check_window_sizes(sizes):
    sizes = [int(s) for s in sizes]
    bad = [s for s in sizes if s < 1 or s % 2 == 0]
    if bad:
        raise ValueError(f"window sizes must be odd and positive, got {bad}")
    return sizes


def sweep_window(train_samples, val_samples, base: TrainConfig, out_dir, sizes=WINDOW_SIZES, runs_dir=None,
                 workers=1) -> List[dict]:
    """Train the full model once per square error window; writes ``window_sweep.csv``."""
    sizes = check_window_sizes(sizes)
    if any(s.depth is None for s in train_samples):
        raise ValueError("the window sweep needs depth maps for every training sample")
    if not (base.use_dam and base.use_dec):
        raise ValueError("the window sweep needs the depth branch and the error-weighted term")
    out = Path(out_dir)
    runs_dir = Path(runs_dir) if runs_dir else out / "runs"
    rows = []
    for k in sizes:
        cfg = replace(base, dec_window=(k, k))
        r = train_and_evaluate(train_samples, val_samples, cfg, runs_dir, f"window {k}x{k}", workers)
        rows.append({"window": f"{k}x{k}", **{c: r.metrics[c] for c in SWEEP_COLUMNS[1:]}, "run": r.key})
    _write_csv(out / "window_sweep.csv", SWEEP_COLUMNS, rows)
    meta = {"sizes": sizes, "default": f"{DEFAULT_WINDOW}x{DEFAULT_WINDOW}", "columns": list(SWEEP_COLUMNS),
            "runs": {r["window"]: r["run"] for r in rows}}
    (out / "window_sweep.json").write_text(json.dumps(meta, indent=2))
    return rows


# --------------------------------------------------------- error weights

def error_weight_map(model: DASNet, sample: Sample, window=(7, 7)) -> np.ndarray:
    if not model.cfg.use_dam:
        raise ValueError("checkpoint has no depth branch, so it defines no error weights")
    if sample.depth is None:
        raise ValueError(f"sample {sample.id} has no depth map")
    param = next(model.parameters())
    x = torch.from_numpy(np.ascontiguousarray(sample.rgb)).permute(2, 0, 1)[None].to(param.dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            p_d = model(x).depth
    finally:
        model.train(was_training)
    y_d = torch.from_numpy(sample.depth)[None, None].to(param.dtype)
    return dec_weights(p_d, y_d, window)[0, 0].numpy()


def error_weight_strip(checkpoints, sample: Sample, window=(7, 7)):
    """Per-checkpoint error-weight maps and their side-by-side 8-bit rendering."""
    if len(checkpoints) < 2:
        raise ValueError("need at least two checkpoints to show a progression")
    maps, config = [], None
    for path in checkpoints:
        model, _ = load_checkpoint(path)
        cfg = model.cfg.to_dict()
        if config is not None and cfg != config:
            raise ValueError(f"{path} has a different model config from {checkpoints[0]}")
        config = cfg
        try:
            maps.append(error_weight_map(model, sample, window))
        except RuntimeError as exc:
            raise ValueError(f"sample {sample.id} does not fit checkpoint {path}: {exc}") from exc
    strip = np.concatenate([np.round(m * 255).astype(np.uint8) for m in maps], axis=1)
    return maps, strip


def save_gray(path, arr):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(arr)).save(path)
    return path
