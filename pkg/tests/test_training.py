import dataclasses

import numpy as np
import pytest

from swinmae.checkpoint import NamedTensorStore, load_checkpoint
from swinmae.config import ScheduleConfig, toy_profile
from swinmae.data import Modality, generate_synthetic, make_splits
from swinmae.mae import MaeModel
from swinmae.optim import NonFiniteError
from swinmae.training import (
    EpochLog,
    efficiency_sweep,
    evaluate_seg,
    finetune_cls,
    finetune_seg,
    mask_seed,
    pretrain_run,
    steps_per_epoch,
    write_log_csv,
)


def _sched(epochs=2, lr=1e-3, batch=4, warmup=0):
    return ScheduleConfig(base_lr=lr, warmup_epochs=warmup, total_epochs=epochs, batch_size=batch)


@pytest.fixture(scope="module")
def tiny_records():
    return generate_synthetic(12, (16, 16), 2, 0.05, seed=3)


def test_zero_epoch_run_is_initialization(tiny_config, tiny_records, tmp_path):
    model, history = pretrain_run(tiny_records, tiny_config, ScheduleConfig(total_epochs=0), out=tmp_path / "c.ckpt",
                                  seed=5, log_csv=tmp_path / "log.csv")
    assert history == []
    assert (tmp_path / "log.csv").read_text() == "epoch,mean_loss,lr\n"
    init = NamedTensorStore.from_module(MaeModel(tiny_config, seed=5))
    saved = load_checkpoint(tmp_path / "c.ckpt")
    assert list(saved.tensors) == list(init.tensors)
    for k, v in init.tensors.items():
        assert np.array_equal(saved.tensors[k].view("<u4"), v.view("<u4")), k
    assert saved.metadata["epoch"] == 0 and saved.metadata["seed"] == 5


def test_pretrain_metadata_and_log(tiny_config, tiny_records, tmp_path):
    _, history = pretrain_run(tiny_records, tiny_config, _sched(3, warmup=1), out=tmp_path / "c.ckpt", seed=1,
                              log_csv=tmp_path / "log.csv")
    assert [h.epoch for h in history] == [1, 2, 3]
    assert history[0].lr == 0.0 and history[1].lr == pytest.approx(1e-3)
    meta = load_checkpoint(tmp_path / "c.ckpt").metadata
    assert meta["kind"] == "mae" and meta["epoch"] == 3 and meta["model_config"] == tiny_config.to_dict()
    assert meta["schedule"]["total_epochs"] == 3 and meta["modality"] is None
    assert "blocks 0-1" in meta["note"]
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,lr" and len(lines) == 4


def test_pretrain_deterministic(tiny_config, tiny_records, tmp_path):
    for name in ("a", "b"):
        pretrain_run(tiny_records, tiny_config, _sched(2), out=tmp_path / f"{name}.ckpt", seed=7,
                     log_csv=tmp_path / f"{name}.csv")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_pretrain_modality_tag(tiny_config, tiny_records):
    mixed = [dataclasses.replace(r, modality=Modality.MR if i % 2 else Modality.US) for i, r in enumerate(tiny_records)]
    _, h = pretrain_run(mixed, tiny_config, _sched(1), seed=0, modality="MR")
    assert len(h) == 1
    with pytest.raises(ValueError, match="empty"):
        pretrain_run(mixed, tiny_config, _sched(1), modality="XRAY")


def test_pretrain_divergence_aborts_with_diagnostic(tiny_config, tiny_records):
    with pytest.raises(NonFiniteError, match="epoch"):
        pretrain_run(tiny_records, tiny_config, _sched(3, lr=1e30), seed=0)


def test_mask_seeds_do_not_collide_across_epochs():
    n = 200
    ranges = [set(range(mask_seed(0, e, n), mask_seed(0, e, n) + n)) for e in range(50)]
    assert len(set().union(*ranges)) == 50 * n


def test_pretrain_loss_halves_on_toy_corpus():
    """200 synthetic 64x64 images, 50 epochs, batch 16: last epoch < 0.5 x first."""
    records = generate_synthetic(200, (64, 64), 3, 0.05, seed=0)
    _, history = pretrain_run(records, toy_profile(), _sched(50, lr=1e-3, batch=16, warmup=5), seed=0)
    assert history[-1].mean_loss < 0.5 * history[0].mean_loss


def test_finetune_seg_and_evaluate(tiny_config, tiny_records):
    model, report, history = finetune_seg(tiny_records[:8], tiny_config, 3, _sched(2), seed=0, val=tiny_records[8:])
    assert report.policy.value == "scratch" and report.transferred() == []
    assert len(history) == 2 and "val_dice" in history[0].extra
    scores = evaluate_seg(model, tiny_records[8:])
    assert sorted(scores) == [r.id for r in tiny_records[8:]]
    assert all(0.0 <= v <= 1.0 for v in scores.values())


def test_finetune_with_pretrained_checkpoint(tiny_config, tiny_records):
    mae, _ = pretrain_run(tiny_records, tiny_config, _sched(1), seed=0)
    ckpt = NamedTensorStore.from_module(mae, {"model_config": tiny_config.to_dict()})
    _, report, _ = finetune_seg(tiny_records[:4], tiny_config, 3, ScheduleConfig(total_epochs=0), 0, ckpt)
    assert report.policy.value == "radiological-seg" and len(report.transferred()) > 0
    _, report, _ = finetune_cls(tiny_records[:4], tiny_config, 3, _sched(1), 0, ckpt)
    assert report.policy.value == "classify"


def test_efficiency_sweep_is_nested(tiny_config):
    records = generate_synthetic(40, (16, 16), 2, 0.05, seed=1)
    fold = make_splits([r.id for r in records], 0).folds[0]
    pts = efficiency_sweep(records, fold, tiny_config, 3, _sched(1), fractions=(0.1, 0.5, 1.0), seeds=(0, 1))
    assert [(p.fraction, p.seed) for p in pts] == [(0.1, 0), (0.1, 1), (0.5, 0), (0.5, 1), (1.0, 0), (1.0, 1)]
    assert [p.n_train for p in pts[::2]] == [3, 15, 29]
    assert all(sorted(p.per_case) == sorted(fold.test) for p in pts)


def test_steps_per_epoch():
    assert steps_per_epoch(20, 16) == 2 and steps_per_epoch(16, 16) == 1 and steps_per_epoch(1, 16) == 1


def test_log_csv_extra_columns(tmp_path):
    write_log_csv([EpochLog(1, 0.5, 0.001, {"val_dice": 0.25})], tmp_path / "l.csv", comment="seed=0")
    assert (tmp_path / "l.csv").read_text().splitlines() == ["# seed=0", "epoch,mean_loss,lr,val_dice",
                                                             "1,0.5,0.001,0.25"]
