"""Saliency evaluation: F-measure sweep, MAE and the structure measure."""
from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence

import numpy as np

BETA2 = 0.3
ALPHA = 0.5
N_THRESHOLDS = 256
_EPS = np.finfo(np.float64).eps
THRESHOLDS = np.arange(N_THRESHOLDS) / 255.0


class EmptyGroundTruthWarning(UserWarning):
    pass


def _prep(p, y):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs ground truth {y.shape}")
    return p, y > 0.5


@dataclass
class FMeasureResult:
    f_max: float
    f_mean: float
    precision: np.ndarray
    recall: np.ndarray
    fbeta: np.ndarray
    tp: np.ndarray
    n_pred_pos: np.ndarray
    empty_gt: bool = False


def f_measures(p, y, beta2=BETA2) -> FMeasureResult:
    """Precision/recall/F-beta over 256 thresholds ``k/255`` (``p >= t`` is positive)."""
    p, gt = _prep(p, y)
    # histogram trick: counts of pixels with p >= t for every threshold at once
    bins = np.clip(np.searchsorted(THRESHOLDS, p.ravel(), side="right") - 1, 0, N_THRESHOLDS - 1)
    pos_hist = np.bincount(bins[gt.ravel()], minlength=N_THRESHOLDS)
    all_hist = np.bincount(bins, minlength=N_THRESHOLDS)
    tp = np.cumsum(pos_hist[::-1])[::-1].astype(np.float64)
    n_pred = np.cumsum(all_hist[::-1])[::-1].astype(np.float64)
    n_gt = float(gt.sum())

    precision = np.divide(tp, n_pred, out=np.zeros_like(tp), where=n_pred > 0)
    empty = n_gt == 0
    if empty:
        warnings.warn("ground truth has no foreground; F-measure reported as 0",
                      EmptyGroundTruthWarning, stacklevel=2)
        recall = np.zeros_like(tp)
    else:
        recall = tp / n_gt
    denom = beta2 * precision + recall
    fbeta = np.divide((1 + beta2) * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return FMeasureResult(float(fbeta.max()), float(fbeta.mean()), precision, recall, fbeta,
                          tp, n_pred, empty)


def mae(p, y) -> float:
    p, gt = _prep(p, y)
    return float(np.abs(p - gt).mean())


# ------------------------------------------------------- structure measure

def _object_score(values):
    if values.size == 0:
        return 0.0
    mu = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + _EPS)


def s_object(p, y) -> float:
    p, gt = _prep(p, y)
    u = gt.mean()
    fg = _object_score(p[gt])
    bg = _object_score(1.0 - p[~gt])
    return float(u * fg + (1 - u) * bg)


def _centroid(gt):
    h, w = gt.shape
    if not gt.any():
        return int(round(w / 2)), int(round(h / 2))
    rows, cols = np.nonzero(gt)
    return int(round(cols.mean())) + 1, int(round(rows.mean())) + 1


def _ssim(p, gt):
    n = p.size
    if n == 0:
        return 0.0
    x, y = p.mean(), gt.mean()
    if n > 1:
        sx = ((p - x) ** 2).sum() / (n - 1)
        sy = ((gt - y) ** 2).sum() / (n - 1)
        sxy = ((p - x) * (gt - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + _EPS)
    return 1.0 if b == 0 else 0.0


def s_region(p, y) -> float:
    p, gt = _prep(p, y)
    gtf = gt.astype(np.float64)
    h, w = gt.shape
    cx, cy = _centroid(gt)
    area = h * w
    quads = [
        (slice(0, cy), slice(0, cx), cx * cy),
        (slice(0, cy), slice(cx, w), (w - cx) * cy),
        (slice(cy, h), slice(0, cx), cx * (h - cy)),
        (slice(cy, h), slice(cx, w), (w - cx) * (h - cy)),
    ]
    score = 0.0
    for rs, cs, n in quads:
        if n > 0:
            score += n / area * _ssim(p[rs, cs], gtf[rs, cs])
    return float(score)


def s_measure(p, y, alpha=ALPHA) -> float:
    """Structure measure ``alpha * S_object + (1 - alpha) * S_region``.

    All-background ground truth scores ``1 - mean(p)``, all-foreground scores
    ``mean(p)``; otherwise negative combinations are clipped to 0.
    """
    p, gt = _prep(p, y)
    fg_ratio = gt.mean()
    if fg_ratio == 0:
        return float(1.0 - p.mean())
    if fg_ratio == 1:
        return float(p.mean())
    return float(max(0.0, alpha * s_object(p, gt) + (1 - alpha) * s_region(p, gt)))


# ------------------------------------------------------ dataset reporting

METRIC_NAMES = ("f_max", "f_mean", "mae", "s_alpha")


def image_metrics(p, y) -> dict:
    fm = f_measures(p, y)
    return {
        "f_max": fm.f_max,
        "f_mean": fm.f_mean,
        "mae": mae(p, y),
        "s_alpha": s_measure(p, y),
        "precision": fm.precision,
        "recall": fm.recall,
        "empty_gt": fm.empty_gt,
    }


@dataclass
class MetricReport:
    ids: List[str]
    per_image: List[dict]
    aggregate: Dict[str, float]
    config: dict = field(default_factory=dict)

    def rows(self):
        for i, m in zip(self.ids, self.per_image):
            yield {"id": i, **{k: m[k] for k in METRIC_NAMES}}

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "per_image.csv", "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=("id",) + METRIC_NAMES)
            wr.writeheader()
            for row in self.rows():
                wr.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        with open(out / "pr_curves.csv", "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["id", "threshold", "precision", "recall"])
            for i, m in zip(self.ids, self.per_image):
                for t, pr, rc in zip(THRESHOLDS, m["precision"], m["recall"]):
                    wr.writerow([i, f"{t:.6f}", f"{pr:.6f}", f"{rc:.6f}"])
        summary = {"aggregate": self.aggregate, "n_images": len(self.ids), "config": self.config}
        (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        return out


def evaluate_dataset(samples, predictions: Mapping[str, np.ndarray], workers: int = 1) -> MetricReport:
    """Per-image metrics in id order plus their arithmetic means."""
    by_id = {s.id: s for s in samples}
    ids = sorted(by_id)
    missing = [i for i in ids if i not in predictions]
    if missing:
        raise KeyError(f"missing predictions for ids: {', '.join(missing)}")

    def one(i):
        return image_metrics(predictions[i], by_id[i].mask)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            per_image = list(ex.map(one, ids))
    else:
        per_image = [one(i) for i in ids]
    aggregate = {k: float(np.mean([m[k] for m in per_image])) if per_image else float("nan")
                 for k in METRIC_NAMES}
    config = {"beta2": BETA2, "alpha": ALPHA, "n_thresholds": N_THRESHOLDS}
    return MetricReport(ids=ids, per_image=per_image, aggregate=aggregate, config=config)
