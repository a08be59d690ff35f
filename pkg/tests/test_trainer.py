import json

import pytest
import torch
import torch.nn as nn

from dasnet import oracles
from dasnet.datasets import synthetic_dataset
from dasnet.model import load_checkpoint
from dasnet.trainer import (TrainConfig, load_train_config, lr_at, make_optimizer, parse_overrides, train,
                            warmup_steps)


def tiny_cfg(**kw):
    base = dict(batch_size=4, epochs=2, n_stages=3, widths=(8, 16, 16), channels=16, augment=False,
                target_size=(32, 32), seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return synthetic_dataset(11, 8, (32, 32))


# --------------------------------------------------------------- schedule

def test_default_peaks():
    cfg = TrainConfig()
    assert (cfg.lr_backbone, cfg.lr_heads) == (0.005, 0.05)
    assert (cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.epochs) == (0.9, 5e-4, 32, 32)


def test_schedule_endpoints():
    cfg = TrainConfig()
    total = 1000
    warm = warmup_steps(total, cfg)
    assert warm == 50
    assert lr_at(0, total, cfg) == (0.0, 0.0)
    assert lr_at(warm, total, cfg) == (0.005, 0.05)
    last = lr_at(total - 1, total, cfg)
    assert 0 < last[1] <= 0.05 / (total - warm) + 1e-15


def test_schedule_decay_midpoint():
    cfg = TrainConfig()
    total = 1050  # warm-up 52 or 53 steps; pick a total with an integer midpoint
    warm = warmup_steps(total, cfg)
    if (total + warm) % 2:
        total += 1
        warm = warmup_steps(total, cfg)
    mid = (total + warm) // 2
    assert lr_at(mid, total, cfg) == pytest.approx((0.0025, 0.025), abs=1e-15)


@pytest.mark.parametrize("step", [0, 7, 50, 333, 999])
def test_schedule_matches_closed_form(step):
    cfg = TrainConfig()
    warm = warmup_steps(1000, cfg)
    b, h = lr_at(step, 1000, cfg)
    assert b == oracles.closed_form_lr(step, 1000, warm, 0.005)
    assert h == oracles.closed_form_lr(step, 1000, warm, 0.05)


@pytest.mark.parametrize("step", [-1, 10])
def test_schedule_out_of_range(step):
    with pytest.raises(ValueError):
        lr_at(step, 10, TrainConfig())


# -------------------------------------------------------------- optimizer

class Toy(nn.Module):
    def __init__(self):
        super().__init__()
        self.enc = nn.Linear(2, 1, bias=False)
        self.head = nn.Linear(1, 1)
        with torch.no_grad():
            self.enc.weight.copy_(torch.tensor([[0.3, -1.2]]))
            self.head.weight.fill_(0.7)
            self.head.bias.fill_(-0.4)

    def backbone_parameters(self):
        return self.enc.parameters()

    def forward(self, x):
        return self.head(self.enc(x))


def test_sgd_step_matches_hand_update():
    torch.set_default_dtype(torch.float64)
    try:
        model = Toy()
    finally:
        torch.set_default_dtype(torch.float32)
    cfg = TrainConfig()
    opt = make_optimizer(model, cfg)
    params = [model.enc.weight, model.head.weight, model.head.bias]
    decay = [True, True, False]
    lrs = [0.004, 0.04]
    x = torch.tensor([[1.0, 2.0], [-0.5, 0.25]], dtype=torch.float64)
    bufs = [None, None, None]
    for step in range(2):
        before = [p.detach().reshape(-1).tolist() for p in params]
        for g in opt.param_groups:
            g["lr"] = lrs[0] if g["name"] == "backbone" else lrs[1]
        opt.zero_grad()
        (model(x) ** 2).mean().backward()
        grads = [p.grad.reshape(-1).tolist() for p in params]
        opt.step()
        exp_b, bufs_b = oracles.hand_sgd_step(before[:1], grads[:1], bufs[:1], lrs[0], decay_mask=decay[:1])
        exp_h, bufs_h = oracles.hand_sgd_step(before[1:], grads[1:], bufs[1:], lrs[1], decay_mask=decay[1:])
        bufs = bufs_b + bufs_h
        for p, e in zip(params, exp_b + exp_h):
            assert max(abs(a - b) for a, b in zip(p.detach().reshape(-1).tolist(), e)) < 1e-12


def test_groups_split_decay_and_rates():
    cfg = tiny_cfg()
    from dasnet.model import DASNet
    opt = make_optimizer(DASNet(cfg.model_config()), cfg)
    names = sorted((g["name"], g["weight_decay"]) for g in opt.param_groups)
    assert names == [("backbone", 0.0), ("backbone", 5e-4), ("heads", 0.0), ("heads", 5e-4)]
    for g in opt.param_groups:
        assert all((p.ndim > 1) == (g["weight_decay"] > 0) for p in g["params"])


# --------------------------------------------------------------- training

def test_step_count_and_log(tiny_data, tmp_path):
    res = train(tiny_data, tiny_cfg(), tmp_path)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(res.records) == len(lines) == 4
    rec = json.loads(lines[0])
    for key in ("step", "epoch", "lr_backbone", "lr_heads", "total", "depth", "bce_1", "iou_3", "dec_2"):
        assert key in rec
    assert (tmp_path / "final.pt").exists()


def test_training_is_deterministic(tiny_data, tmp_path):
    cfg = tiny_cfg(augment=True, target_size=(32, 32), multiscale=(0.5, 1.0), checkpoint_epochs=(1,))
    train(tiny_data, cfg, tmp_path / "a")
    train(tiny_data, cfg, tmp_path / "b")
    for name in ("train_log.jsonl", "epoch_001.pt", "final.pt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_changes_run(tiny_data):
    a = train(tiny_data, tiny_cfg(seed=0)).records
    b = train(tiny_data, tiny_cfg(seed=1)).records
    assert a[-1]["total"] != b[-1]["total"]


def test_dec_switch_drops_terms(tiny_data):
    recs = train(tiny_data, tiny_cfg(use_dec=False)).records
    assert not any(k.startswith("dec_") for r in recs for k in r)


def test_ablation_switches_shape_the_log(tiny_data):
    recs = train(tiny_data, tiny_cfg(use_dam=False, use_dec=False, use_iou=False, use_mls=False,
                                     use_caf=False)).records
    assert {k for k in recs[0] if k not in ("step", "epoch", "lr_backbone", "lr_heads", "total")} == {"bce_1"}


def test_depth_free_trains_without_depth(tiny_data):
    from dasnet.datasets import Sample
    bare = [Sample(id=s.id, rgb=s.rgb, mask=s.mask) for s in tiny_data]
    with pytest.raises(ValueError, match="depth_free"):
        train(bare, tiny_cfg())
    recs = train(bare, tiny_cfg(depth_free=True)).records
    assert "depth" not in recs[0] and "dec_1" not in recs[0]


def test_batch_size_one_rejected():
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=1)


def test_dec_without_dam_rejected():
    with pytest.raises(ValueError, match="use_dec"):
        TrainConfig(use_dam=False)


def test_non_finite_loss_aborts_with_dump(tiny_data, tmp_path):
    from dasnet.model import DASNet
    cfg = tiny_cfg()
    model = DASNet(cfg.model_config())
    with torch.no_grad():
        model.sod_heads[0].bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError):
        train(tiny_data, cfg, tmp_path, model=model)
    dump = json.loads((tmp_path / "failure.json").read_text())
    assert len(dump["batch_ids"]) == 4


def test_loss_decreases(tiny_data):
    res = train(tiny_data, tiny_cfg(epochs=12))
    means = res.epoch_means()
    assert means[-1] < means[0]


def test_final_checkpoint_round_trip(tiny_data, tmp_path):
    res = train(tiny_data, tiny_cfg(), tmp_path)
    loaded, extra = load_checkpoint(tmp_path / "final.pt")
    assert extra["train_config"]["seed"] == 0
    x = torch.rand(1, 3, 32, 32)
    assert torch.equal(res.model.predict(x), loaded.predict(x))


# ----------------------------------------------------------------- config

def test_config_file_and_overrides(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# desk run\nepochs = 3\nuse_dec = false\nuse_dam = no\ntarget_size = 64\nwidths = 8,16,16\n")
    cfg = load_train_config(f, ["epochs=5", "lr_heads=0.1", "n_stages=3"])
    assert cfg.epochs == 5 and cfg.lr_heads == 0.1
    assert cfg.use_dec is False and cfg.use_dam is False
    assert cfg.target_size == (64, 64) and cfg.widths == (8, 16, 16)


def test_unknown_key_rejected():
    with pytest.raises(KeyError, match="bogus"):
        load_train_config(None, ["bogus=1"])


def test_override_syntax():
    assert parse_overrides(["a=1", "b=0.5", "c=x", "d=true", "e=(3, 5)"]) == \
        {"a": 1, "b": 0.5, "c": "x", "d": True, "e": (3, 5)}
    with pytest.raises(ValueError):
        parse_overrides(["novalue"])


def test_config_round_trip():
    cfg = tiny_cfg(dec_window=(3, 5))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
