import math

import pytest
import torch

from msvsr import errors
from msvsr.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from msvsr.data import make_synthetic_dataset
from msvsr.model import get_config
from msvsr.trainer import (
    TRAIN_PRESETS,
    TrainConfig,
    ablation_markdown,
    ablation_tsv,
    AblationRow,
    evaluate,
    lr_at,
    make_batch,
    train,
    write_history,
)

SMALL = get_config("tiny", channels=8)


@pytest.fixture(scope="module")
def dataset():
    return make_synthetic_dataset(2, 4, 48, 4, 0)


def _cfg(**kw):
    base = dict(total_iters=4, flow_freeze_iters=2, batch_size=1, patch_size=8, n_frames=3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_endpoints_and_monotonic():
    cfg = TRAIN_PRESETS["full-scale"]
    assert lr_at(0, cfg) == 2e-4
    assert lr_at(cfg.total_iters, cfg) == 2e-7
    values = [lr_at(t, cfg) for t in range(0, cfg.total_iters + 1, 1000)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    mid = lr_at(cfg.total_iters // 2, cfg)
    assert mid == pytest.approx((2e-4 + 2e-7) / 2, rel=1e-12)


def test_flow_lr_frozen_then_positive():
    cfg = TRAIN_PRESETS["full-scale"]
    assert all(lr_at(t, cfg, "flow") == 0.0 for t in (0, 1, 1000, 2499))
    assert lr_at(2500, cfg, "flow") > 0


def test_lr_rejects_out_of_range():
    with pytest.raises(errors.InvalidArgument):
        lr_at(-1, _cfg())
    with pytest.raises(errors.InvalidArgument):
        lr_at(5, _cfg())
    with pytest.raises(errors.InvalidArgument):
        lr_at(0, _cfg(), "other")


def test_train_config_validation():
    with pytest.raises(errors.InvalidArgument):
        TrainConfig(total_iters=10, flow_freeze_iters=20)
    with pytest.raises(errors.InvalidArgument):
        TrainConfig(lr_main_init=0.0)
    assert TrainConfig.from_dict(_cfg().to_dict()) == _cfg()


def test_make_batch_is_deterministic(dataset):
    cfg = _cfg(batch_size=2)
    a = make_batch(dataset, cfg, 3)
    b = make_batch(dataset, cfg, 3)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert a[0].shape == (2, 3, 3, 8, 8) and a[1].shape == (2, 3, 3, 32, 32)


def test_flow_network_frozen_during_warmup(dataset):
    r0 = train(SMALL, _cfg(), dataset, stop_at=0)
    r = train(SMALL, _cfg(), dataset, stop_at=2)
    for k, v in r0.model.flownet.state_dict().items():
        assert torch.equal(v, r.model.flownet.state_dict()[k])
    r4 = train(SMALL, _cfg(), dataset)
    assert any(not torch.equal(v, r4.model.flownet.state_dict()[k]) for k, v in r0.model.flownet.state_dict().items())


def test_identical_runs_identical_history(dataset):
    a = train(SMALL, _cfg(), dataset)
    b = train(SMALL, _cfg(), dataset)
    assert a.history == b.history
    assert len(a.history) == 4 and a.history[0]["lr_flow"] == 0.0


def test_resume_is_bit_identical(dataset, tmp_path):
    full = train(SMALL, _cfg(), dataset)
    path = tmp_path / "half.ckpt"
    train(SMALL, _cfg(), dataset, stop_at=2, checkpoint_path=path)
    resumed = train(SMALL, _cfg(), dataset, resume=load_checkpoint(path))
    assert resumed.history == full.history[2:]
    for k, v in full.model.state_dict().items():
        assert torch.equal(v, resumed.model.state_dict()[k]), k


def test_divergence_raises(dataset, monkeypatch):
    import msvsr.trainer as tr

    real = tr.total_loss

    def poisoned(out, gt, cfg):
        loss, parts = real(out, gt, cfg)
        return loss * float("nan"), {**parts, "total": float("nan")}

    monkeypatch.setattr(tr, "total_loss", poisoned)
    with pytest.raises(errors.NumericalDivergence):
        train(SMALL, _cfg(), dataset)


def test_checkpoint_roundtrip_truncation_and_version(dataset, tmp_path):
    r = train(SMALL, _cfg(total_iters=1, flow_freeze_iters=0), dataset)
    path = save_checkpoint(r.checkpoint, tmp_path / "c.ckpt")
    back = load_checkpoint(path)
    assert back.iteration == 1 and back.model_config == SMALL.to_dict()
    for k, v in r.checkpoint.model_state.items():
        assert torch.equal(v, back.model_state[k])

    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-100])
    with pytest.raises(errors.ChecksumMismatch):
        load_checkpoint(tmp_path / "t.ckpt")
    flipped = bytearray(raw)
    flipped[len(flipped) // 2] ^= 0xFF
    (tmp_path / "f.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(errors.ChecksumMismatch):
        load_checkpoint(tmp_path / "f.ckpt")
    with pytest.raises(errors.NotFound):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_version_skew(tmp_path, monkeypatch):
    import msvsr.checkpoint as ck

    ckpt = Checkpoint(0, {"w": torch.zeros(2)}, {"state": {}, "param_groups": []}, {}, {})
    monkeypatch.setattr(ck, "FORMAT_VERSION", 99)
    path = save_checkpoint(ckpt, tmp_path / "v.ckpt")
    monkeypatch.setattr(ck, "FORMAT_VERSION", 1)
    with pytest.raises(errors.VersionError):
        load_checkpoint(path)


def test_evaluate_reports_all_methods(dataset):
    r = train(SMALL, _cfg(total_iters=1, flow_freeze_iters=0), dataset)
    rep = evaluate(r.model, dataset, "y")
    assert rep.methods() == ["model", "bicubic", "bilinear"]
    assert all(math.isfinite(rep.mean(m)["psnr_db"]) for m in rep.methods())
    rep_ckpt = evaluate(r.checkpoint, dataset, "y")
    assert rep_ckpt.rows[0].psnr_db == rep.rows[0].psnr_db


def test_history_csv(tmp_path, dataset):
    r = train(SMALL, _cfg(), dataset)
    write_history(r.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().strip().split("\n")
    assert lines[0] == "iter,lr_main,lr_flow,loss_main,loss_aux,loss_total"
    assert len(lines) == 5


def test_ablation_tables():
    rows = [AblationRow("A", False, False, False, 10, 30.0, 0.9, 1.0, 0.5), AblationRow("full", True, True, True, 20, 31.0, 0.91, 1.0, 0.4)]
    md = ablation_markdown(rows)
    assert "| A |  |  |  | 10 |" in md and "| full | x | x | x | 20 |" in md
    tsv = ablation_tsv(rows).strip().split("\n")
    assert tsv[0].split("\t")[:4] == ["variant", "RAM", "LFM", "Aux-Loss"]
    assert tsv[1].split("\t")[:4] == ["A", "0", "0", "0"]


def test_zero_steps_returns_initialization(dataset):
    from msvsr.model import build_model

    r = train(SMALL, _cfg(), dataset, stop_at=0)
    init = build_model(SMALL, 0).state_dict()
    assert r.history == []
    for k, v in init.items():
        assert torch.equal(v, r.model.state_dict()[k])


@pytest.mark.slow
def test_overfit_regression_200_steps():
    from msvsr.model import build_model
    from msvsr.trainer import dataset_loss

    data = make_synthetic_dataset(2, 10, 128, 2, 0)
    mcfg = get_config("tiny")
    cfg = TrainConfig(total_iters=200, flow_freeze_iters=100, seed=0)
    initial = dataset_loss(build_model(mcfg, 0), data)
    final = dataset_loss(train(mcfg, cfg, data).model, data)
    assert final <= 0.5 * initial, (initial, final)
