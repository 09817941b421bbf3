"""Training loops: MAE pretraining, segmentation / classification finetuning, evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from swinmae.checkpoint import NamedTensorStore, save_checkpoint
from swinmae.config import ModelConfig, ScheduleConfig
from swinmae.data import DatasetManifest, ImageRecord, ingest_manifest
from swinmae.downstream import (
    STAGE3_NOTE,
    ClsModel,
    SegModel,
    TransferPolicy,
    TransferReport,
    build_classifier,
    build_segmenter,
    transfer_weights,
)
from swinmae.mae import MaeModel, mae_forward, mae_loss, mae_target
from swinmae.optim import AdamW, NonFiniteError, ce_loss, lr_at, seg_loss
from swinmae.stats import UndefinedMetric, auroc, dice_score

log = logging.getLogger(__name__)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    lr: float
    extra: dict = field(default_factory=dict)


def write_log_csv(entries: Sequence[EpochLog], path, comment: Optional[str] = None) -> None:
    extra_keys = sorted({k for e in entries for k in e.extra})
    with open(path, "w", newline="", encoding="utf-8") as f:
        if comment:
            f.write(f"# {comment}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "lr", *extra_keys])
        for e in entries:
            w.writerow([e.epoch, f"{e.mean_loss:.8g}", f"{e.lr:.8g}", *(f"{e.extra[k]:.8g}" for k in extra_keys)])


def _records(data) -> list[ImageRecord]:
    if isinstance(data, DatasetManifest):
        return ingest_manifest(data)
    return list(data)


def stack_pixels(records: Sequence[ImageRecord]) -> torch.Tensor:
    return torch.from_numpy(np.stack([r.pixels for r in records]).astype(np.float32))


def stack_masks(records: Sequence[ImageRecord]) -> torch.Tensor:
    if any(r.seg_mask is None for r in records):
        raise ValueError("every record needs a segmentation mask")
    return torch.from_numpy(np.stack([r.seg_mask for r in records]).astype(np.int64))


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    perm = np.random.default_rng([seed, 5, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(loss: torch.Tensor, where: str):
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite loss at {where}")


def mask_seed(seed: int, epoch: int, n: int) -> int:
    """Base mask seed for an epoch; image at permutation slot ``j`` uses base + j."""
    return (seed * 1_000_003 + epoch) * max(n, 1)


def pretrain_run(
    corpus,
    config: ModelConfig,
    schedule: ScheduleConfig,
    out: Optional[str | Path] = None,
    seed: int = 0,
    modality: Optional[str] = None,
    log_csv: Optional[str | Path] = None,
    extra_metadata: Optional[dict] = None,
) -> tuple[MaeModel, list[EpochLog]]:
    """Self-supervised MAE training with AdamW and warmup + cosine lr.

    ``corpus`` is a manifest (ingested here) or a list of records. Writes the
    checkpoint to ``out`` and the per-epoch log to ``log_csv`` when given.
    """
    if isinstance(corpus, DatasetManifest) and modality is not None:
        corpus = corpus.filter(modality)
    records = _records(corpus)
    if modality is not None:
        records = [r for r in records if r.modality.value == str(getattr(modality, "value", modality))]
    if not records:
        raise ValueError("pretraining corpus is empty")
    torch.manual_seed(seed)
    model = MaeModel(config, seed)
    opt = AdamW(model, schedule)
    images = stack_pixels(records)
    n = len(images)
    history = []
    for epoch in range(schedule.total_epochs):
        batches = _batches(n, schedule.batch_size, seed, epoch)
        base = mask_seed(seed, epoch, n)
        total, lr0 = 0.0, lr_at(schedule, epoch)
        start = 0
        for b, idx in enumerate(batches):
            x = images[torch.from_numpy(idx)]
            pred, plans = mae_forward(x, model, base + start)
            loss = mae_loss(pred, mae_target(x, config), plans, config.loss_all_positions)
            _check_finite(loss, f"epoch {epoch} batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step(epoch + b / len(batches))
            total += float(loss.detach()) * len(idx)
            start += len(idx)
        history.append(EpochLog(epoch + 1, total / n, lr0))
        log.info("pretrain epoch %d loss %.5f lr %.3g", epoch + 1, total / n, lr0)
    metadata = {
        "kind": "mae",
        "model_config": config.to_dict(),
        "schedule": schedule.to_dict(),
        "modality": None if modality is None else str(getattr(modality, "value", modality)),
        "epoch": schedule.total_epochs,
        "seed": seed,
        "note": STAGE3_NOTE,
        **(extra_metadata or {}),
    }
    if out is not None:
        save_checkpoint(NamedTensorStore.from_module(model, metadata), out)
    if log_csv is not None:
        write_log_csv(history, log_csv)
    return model, history


@torch.no_grad()
def predict_seg(model: SegModel, records: Sequence[ImageRecord], batch_size: int = 32) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(records), batch_size):
        x = stack_pixels(records[i:i + batch_size]).to(next(model.parameters()).dtype)
        out.append(model(x).argmax(dim=-1).numpy())
    return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)


def evaluate_seg(model: SegModel, records: Sequence[ImageRecord], include_background: bool = False) -> dict[str, float]:
    """Per-case mean Dice keyed by record id."""
    preds = predict_seg(model, records)
    return {
        r.id: dice_score(p, r.seg_mask, model.n_classes, include_background).mean
        for r, p in zip(records, preds)
    }


@torch.no_grad()
def predict_proba(model: ClsModel, records: Sequence[ImageRecord], batch_size: int = 32) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(records), batch_size):
        x = stack_pixels(records[i:i + batch_size]).to(next(model.parameters()).dtype)
        out.append(model(x).softmax(dim=-1).double().numpy())
    return np.concatenate(out)


def evaluate_cls(model: ClsModel, records: Sequence[ImageRecord]) -> float:
    probs = predict_proba(model, records)
    labels = np.array([r.class_label for r in records])
    return auroc(probs, labels)


def _prepare_downstream(model, ckpt, policy, seed) -> TransferReport:
    if ckpt is None:
        policy = TransferPolicy.SCRATCH
        ckpt = NamedTensorStore()
    return transfer_weights(ckpt, model, policy, seed)


def finetune_seg(
    train: Sequence[ImageRecord],
    config: ModelConfig,
    n_classes: int,
    schedule: ScheduleConfig,
    seed: int = 0,
    ckpt: Optional[NamedTensorStore] = None,
    policy: TransferPolicy | str = TransferPolicy.RADIOLOGICAL_SEG,
    val: Optional[Sequence[ImageRecord]] = None,
    loss_weights: tuple[float, float] = (0.5, 0.5),
) -> tuple[SegModel, TransferReport, list[EpochLog]]:
    """Build a segmenter, apply ``policy`` (scratch when ``ckpt`` is None) and
    train with Dice + cross-entropy."""
    torch.manual_seed(seed)
    model = build_segmenter(config, n_classes, seed)
    report = _prepare_downstream(model, ckpt, policy, seed)
    train = list(train)
    if not train:
        raise ValueError("no training images")
    x_all, y_all = stack_pixels(train), stack_masks(train)
    opt = AdamW(model, schedule)
    history = []
    for epoch in range(schedule.total_epochs):
        model.train()
        batches = _batches(len(train), schedule.batch_size, seed, epoch)
        total, lr0 = 0.0, lr_at(schedule, epoch)
        for b, idx in enumerate(batches):
            t = torch.from_numpy(idx)
            loss = seg_loss(model(x_all[t]), y_all[t], loss_weights)
            _check_finite(loss, f"epoch {epoch} batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step(epoch + b / len(batches))
            total += float(loss.detach()) * len(idx)
        extra = {}
        if val:
            extra["val_dice"] = float(np.mean(list(evaluate_seg(model, val).values())))
        history.append(EpochLog(epoch + 1, total / len(train), lr0, extra))
    return model, report, history


def finetune_cls(
    train: Sequence[ImageRecord],
    config: ModelConfig,
    n_classes: int,
    schedule: ScheduleConfig,
    seed: int = 0,
    ckpt: Optional[NamedTensorStore] = None,
    policy: TransferPolicy | str = TransferPolicy.CLASSIFY,
    val: Optional[Sequence[ImageRecord]] = None,
) -> tuple[ClsModel, TransferReport, list[EpochLog]]:
    torch.manual_seed(seed)
    model = build_classifier(config, n_classes, seed)
    report = _prepare_downstream(model, ckpt, policy, seed)
    train = list(train)
    x_all = stack_pixels(train)
    y_all = torch.tensor([r.class_label for r in train], dtype=torch.int64)
    opt = AdamW(model, schedule)
    history = []
    for epoch in range(schedule.total_epochs):
        model.train()
        batches = _batches(len(train), schedule.batch_size, seed, epoch)
        total, lr0 = 0.0, lr_at(schedule, epoch)
        for b, idx in enumerate(batches):
            t = torch.from_numpy(idx)
            loss = ce_loss(model(x_all[t]), y_all[t])
            _check_finite(loss, f"epoch {epoch} batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step(epoch + b / len(batches))
            total += float(loss.detach()) * len(idx)
        extra = {}
        if val:
            try:
                extra["val_auroc"] = evaluate_cls(model, val)
            except UndefinedMetric:
                pass
        history.append(EpochLog(epoch + 1, total / len(train), lr0, extra))
    return model, report, history


def downstream_store(model, report: TransferReport, schedule: ScheduleConfig, seed: int, extra=None) -> NamedTensorStore:
    meta = {
        "kind": "seg" if isinstance(model, SegModel) else "cls",
        "model_config": model.config.to_dict(),
        "n_classes": model.n_classes,
        "policy": report.policy.value,
        "schedule": schedule.to_dict(),
        "epoch": schedule.total_epochs,
        "seed": seed,
        "note": STAGE3_NOTE,
        **(extra or {}),
    }
    return NamedTensorStore.from_module(model, meta)


@dataclass
class SweepPoint:
    fraction: float
    seed: int
    n_train: int
    per_case: dict[str, float]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_case.values())))


def efficiency_sweep(
    records: Sequence[ImageRecord],
    fold,
    config: ModelConfig,
    n_classes: int,
    schedule: ScheduleConfig,
    fractions: Sequence[float] = (0.1, 0.5, 0.8, 1.0),
    seeds: Sequence[int] = (0,),
    ckpt: Optional[NamedTensorStore] = None,
    policy: TransferPolicy | str = TransferPolicy.RADIOLOGICAL_SEG,
    split_seed: int = 0,
) -> list[SweepPoint]:
    """Finetune on nested fractions of one fold's train set; score its test set."""
    from swinmae.data import SplitAssignment, SplitPolicy, subset_fraction

    by_id = {r.id: r for r in records}
    split = SplitAssignment(SplitPolicy.HOLDOUT, (fold,), 1.0, split_seed)
    test = [by_id[i] for i in fold.test]
    points = []
    for frac in fractions:
        sub = subset_fraction(split, frac, split_seed).folds[0]
        train = [by_id[i] for i in sub.train]
        for s in seeds:
            model, _, _ = finetune_seg(train, config, n_classes, schedule, s, ckpt, policy)
            points.append(SweepPoint(frac, s, len(train), evaluate_seg(model, test)))
            log.info("sweep fraction %.2f seed %d: %d train, dice %.4f", frac, s, len(train), points[-1].mean)
    return points


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
