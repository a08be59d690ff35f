"""Command line: generate | train | eval | predict | ablate | sweep-window | viz-error-weights | complexity.

Training-style commands take ``--config FILE`` plus trailing ``key=value``
overrides, e.g. ``dasnet train --data d --out runs/a epochs=3 use_dec=false``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .datasets import load_dataset, random_specs, read_rgb, write_dataset
from .metrics import evaluate_dataset
from .trainer import TrainConfig, load_train_config, train

log = logging.getLogger("dasnet")


class CLIError(Exception):
    pass


def _train_config(args, desk=False) -> TrainConfig:
    base = harness.desk_config().to_dict() if desk else None
    return load_train_config(args.config, args.overrides, base=base)


def _split(root, name):
    root = Path(root)
    if (root / name).is_dir():
        return load_dataset(root, name)
    raise CLIError(f"{root} has no '{name}' split; create one with: dasnet generate --out {root} --val N")


def cmd_generate(args):
    if args.n < 1:
        raise CLIError("n must be at least 1")
    out = Path(args.out)
    canvas = tuple(args.canvas)
    started = harness.utc_now()
    specs = random_specs(args.seed, args.n + args.val, canvas)
    extra = {"base_seed": args.seed, "canvas": list(canvas)}
    if args.val:
        if out.exists() and any(out.iterdir()):
            raise FileExistsError(f"target directory {out} is not empty")
        write_dataset(out / "train", specs[:args.n], extra)
        write_dataset(out / "val", specs[args.n:], extra)
        outputs = ["train", "val"]
    else:
        write_dataset(out, specs, extra)
        outputs = ["rgb", "mask", "depth", "manifest.json"]
    harness.write_manifest(out, "generate", {"n": args.n, "val": args.val, "canvas": list(canvas)},
                           args.seed, outputs, started)
    print(f"wrote {args.n + args.val} samples to {out}")


def cmd_train(args):
    cfg = _train_config(args)
    started = harness.utc_now()
    samples = load_dataset(args.data, args.split)
    res = train(samples, cfg, args.out)
    outputs = ["train_log.jsonl"] + [p.name for p in res.checkpoints]
    harness.write_manifest(args.out, "train", {**cfg.to_dict(), "data": str(args.data), "split": args.split},
                           cfg.seed, outputs, started)
    print(f"trained {len(res.records)} steps; final loss {res.records[-1]['total']:.4f}; "
          f"checkpoint {res.checkpoints[-1]}")


def _read_prediction(path):
    from PIL import Image

    a = np.asarray(Image.open(path))
    if a.ndim == 3:
        a = a[..., 0]
    return a.astype(np.float64) / (65535.0 if a.dtype == np.uint16 else 255.0)


def cmd_eval(args):
    started = harness.utc_now()
    samples = load_dataset(args.data, args.split)
    if bool(args.checkpoint) == bool(args.predictions):
        raise CLIError("give exactly one of --checkpoint or --predictions")
    if args.checkpoint:
        from .model import load_checkpoint

        model, _ = load_checkpoint(args.checkpoint)
        report = harness.evaluate_model(model, samples, args.workers)
        source = {"checkpoint": str(args.checkpoint)}
    else:
        pred_dir = Path(args.predictions)
        preds = {}
        for s in samples:
            p = pred_dir / f"{s.id}.png"
            if p.exists():
                preds[s.id] = _read_prediction(p)
        report = evaluate_dataset(samples, preds, workers=args.workers)
        source = {"predictions": str(pred_dir)}
    report.write(args.out)
    harness.write_manifest(args.out, "eval", {"data": str(args.data), "split": args.split,
                                              "workers": args.workers, **source},
                           None, ["per_image.csv", "pr_curves.csv", "report.json"], started)
    print(json.dumps(report.aggregate, indent=2))


def cmd_predict(args):
    from .model import load_checkpoint, predict_image

    started = harness.utc_now()
    model, _ = load_checkpoint(args.checkpoint)
    src = Path(args.images)
    if (src / "rgb").is_dir():
        src = src / "rgb"
    paths = sorted(src.glob("*.png")) + sorted(src.glob("*.jpg"))
    if not paths:
        raise CLIError(f"no images found in {args.images}")
    out = Path(args.out)
    written = []
    for p in paths:
        sal = predict_image(model, read_rgb(p))
        written.append(harness.save_gray(out / f"{p.stem}.png", np.round(sal * 255).astype(np.uint8)).name)
    harness.write_manifest(out, "predict", {"checkpoint": str(args.checkpoint), "images": str(args.images)},
                           None, written, started)
    print(f"wrote {len(written)} saliency maps to {out}")


def cmd_ablate(args):
    cfg = _train_config(args, desk=True)
    started = harness.utc_now()
    tr, va = _split(args.data, "train"), _split(args.data, "val")
    rows = harness.ablate(tr, va, cfg, args.out, args.runs, args.workers)
    harness.write_manifest(args.out, "ablate", {**cfg.to_dict(), "data": str(args.data)}, cfg.seed,
                           ["ablation.csv", "ablation_runs.json"], started)
    for r in rows:
        print(f"{r['components']:26s} f_mean {r['f_mean']:.4f}  mae {r['mae']:.4f}")


def cmd_sweep(args):
    cfg = _train_config(args, desk=True)
    started = harness.utc_now()
    sizes = harness.check_window_sizes(args.sizes)
    tr, va = _split(args.data, "train"), _split(args.data, "val")
    rows = harness.sweep_window(tr, va, cfg, args.out, sizes, args.runs, args.workers)
    harness.write_manifest(args.out, "sweep-window", {**cfg.to_dict(), "sizes": sizes, "data": str(args.data)},
                           cfg.seed, ["window_sweep.csv", "window_sweep.json"], started)
    for r in rows:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))


def cmd_viz(args):
    started = harness.utc_now()
    samples = load_dataset(args.data, args.split)
    by_id = {s.id: s for s in samples}
    if args.sample not in by_id:
        raise CLIError(f"sample {args.sample!r} not in {args.data}")
    window = tuple(args.window)
    maps, strip = harness.error_weight_strip(args.checkpoints, by_id[args.sample], window)
    out = Path(args.out)
    harness.save_gray(out / "error_weights.png", strip)
    means = [float(m.mean()) for m in maps]
    (out / "error_weights.json").write_text(json.dumps(
        {"checkpoints": [str(c) for c in args.checkpoints], "sample": args.sample, "window": list(window),
         "mean_weight": means}, indent=2))
    harness.write_manifest(out, "viz-error-weights", {"sample": args.sample, "window": list(window),
                                                      "checkpoints": [str(c) for c in args.checkpoints]},
                           None, ["error_weights.png", "error_weights.json"], started)
    print("mean error weight per checkpoint:", ", ".join(f"{m:.4f}" for m in means))


def cmd_complexity(args):
    from .complexity import count
    from .model import DASNet

    cfg = _train_config(args)
    if args.resnet50:
        cfg = replace(cfg, resnet50=True, n_stages=5, widths=(64, 256, 512, 1024, 2048))
    rep = count(DASNet(cfg.model_config()), tuple(args.size))
    if args.table:
        print(rep.table())
    s = rep.summary()
    print(f"params {s['params_M']:.3f} M   MAdds {s['madds_G']:.3f} G   at {args.size[0]}x{args.size[1]}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = [{"layer": r.name, "type": r.kind, "params": r.params, "madds": r.madds, "calls": r.calls}
                for r in rep.rows]
        (out / "complexity.json").write_text(json.dumps({**s, "layers": rows}, indent=2))
        harness.write_manifest(out, "complexity", {**cfg.to_dict(), "size": list(args.size)}, None,
                               ["complexity.json"])


def _add_config(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")


def build_parser():
    ap = argparse.ArgumentParser(prog="dasnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic RGB-D dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="number of (training) samples")
    p.add_argument("--val", type=int, default=0, help="also write a val split of this size")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--canvas", type=int, nargs=2, default=list(harness.DESK_CANVAS), metavar=("H", "W"))
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a directory of saliency PNGs")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="write 8-bit saliency PNGs for a folder of RGB images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_predict)

    for name, fn, helptext in (("ablate", cmd_ablate, "train and score the eight component ablations"),
                               ("sweep-window", cmd_sweep, "train and score each error-window size")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True, help="dataset root with train/ and val/ splits")
        p.add_argument("--out", required=True)
        p.add_argument("--runs", default=None, help="shared run directory (reuses identical runs)")
        p.add_argument("--workers", type=int, default=1)
        if name == "sweep-window":
            p.add_argument("--sizes", type=int, nargs="+", default=list(harness.WINDOW_SIZES))
        _add_config(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("viz-error-weights", help="render error-weight maps across checkpoints")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--sample", required=True, help="sample id (file stem)")
    p.add_argument("--window", type=int, nargs=2, default=[7, 7], metavar=("W", "H"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("complexity", help="parameter and multiply-add counts")
    p.add_argument("--size", type=int, nargs=2, default=[352, 352], metavar=("H", "W"))
    p.add_argument("--resnet50", action="store_true", help="use the ResNet-50-shaped encoder")
    p.add_argument("--table", action="store_true", help="print the per-layer breakdown")
    p.add_argument("--out")
    _add_config(p)
    p.set_defaults(fn=cmd_complexity)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (CLIError, ValueError, KeyError, FileNotFoundError, FileExistsError, FloatingPointError,
            RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
