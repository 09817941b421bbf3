"""Swin-UNet segmenter, encoder+head classifier and pretrained-weight transfer."""

from __future__ import annotations

import csv
import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn

from swinmae.checkpoint import NamedTensorStore
from swinmae.config import ModelConfig
from swinmae.patching import patchify_batch
from swinmae.swin import FinalExpand, SwinDecoder, SwinEncoder, init_weights

STAGE3_NOTE = (
    "stage-3 partial transfer: downstream blocks 0-1 take upstream stage-3 blocks 0-1; "
    "blocks 2-5 are randomly initialized"
)


class SegModel(nn.Module):
    """Swin encoder (downstream depths) + Swin decoder with skip fusion + per-pixel head."""

    def __init__(self, config: ModelConfig, n_classes: int, seed: Optional[int] = 0):
        super().__init__()
        if n_classes < 2:
            raise ValueError("segmentation needs at least 2 classes (background + 1)")
        self.config = config
        self.n_classes = n_classes
        self.encoder = SwinEncoder(config, config.down_depths)
        self.decoder = SwinDecoder(config, skip=True)
        self.final = FinalExpand(config.embed_dim, config.patch)
        self.seg_head = nn.Linear(config.embed_dim, n_classes)
        if seed is not None:
            init_weights(self, torch.Generator().manual_seed(seed))

    def forward(self, images: torch.Tensor, drop_skip: Optional[int] = None) -> torch.Tensor:
        """``(B, H, W, c)`` -> logits ``(B, H, W, n_classes)``.

        ``drop_skip`` zeroes the skip feeding decoder stage ``k`` (ablation hook).
        """
        feats = self.encoder(patchify_batch(images, self.config.patch))
        if drop_skip is not None:
            feats = list(feats)
            feats[-2 - drop_skip] = torch.zeros_like(feats[-2 - drop_skip])
        x = self.decoder(feats, use_skips=True)
        return self.seg_head(self.final(x))


class ClsModel(nn.Module):
    def __init__(self, config: ModelConfig, n_classes: int, seed: Optional[int] = 0):
        super().__init__()
        self.config = config
        self.n_classes = n_classes
        self.encoder = SwinEncoder(config, config.down_depths)
        self.head = nn.Linear(config.stage_dim(config.num_stages - 1), n_classes)
        if seed is not None:
            init_weights(self, torch.Generator().manual_seed(seed))

    def pool(self, images: torch.Tensor) -> torch.Tensor:
        feats = self.encoder(patchify_batch(images, self.config.patch))
        return feats[-1].mean(dim=(1, 2))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.pool(images))


def build_segmenter(config: ModelConfig, n_classes: int, seed: int = 0) -> SegModel:
    config.validate()
    return SegModel(config, n_classes, seed)


def build_classifier(config: ModelConfig, n_classes: int, seed: int = 0) -> ClsModel:
    config.validate()
    if n_classes < 2:
        raise ValueError("classification needs at least 2 classes")
    return ClsModel(config, n_classes, seed)


class TransferPolicy(str, enum.Enum):
    RADIOLOGICAL_SEG = "radiological-seg"
    COLOR_SEG = "color-seg"
    CLASSIFY = "classify"
    SCRATCH = "scratch"


class Status(str, enum.Enum):
    TRANSFERRED = "TRANSFERRED"
    RANDOM_INIT = "RANDOM_INIT"


@dataclass(frozen=True)
class TransferRow:
    tensor: str
    status: Status
    source: Optional[str]
    shape: tuple[int, ...]


@dataclass
class TransferReport:
    policy: TransferPolicy
    rows: list[TransferRow]
    note: str = STAGE3_NOTE
    seed: int = 0

    def transferred(self) -> list[str]:
        return [r.tensor for r in self.rows if r.status is Status.TRANSFERRED]

    def random_init(self) -> list[str]:
        return [r.tensor for r in self.rows if r.status is Status.RANDOM_INIT]

    def to_csv(self, path, comment: Optional[str] = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write(f"# policy={self.policy.value}; seed={self.seed}; {self.note}\n")
            if comment:
                f.write(f"# {comment}\n")
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["tensor", "status", "source", "shape"])
            for r in self.rows:
                w.writerow([r.tensor, r.status.value, r.source or "", "x".join(map(str, r.shape))])

    @classmethod
    def from_csv(cls, path) -> "TransferReport":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        meta = dict(kv.split("=", 1) for kv in lines[0][2:].split("; ")[:2])
        rows = []
        for rec in csv.DictReader(ln for ln in lines[1:] if not ln.startswith("#")):
            shape = tuple(int(v) for v in rec["shape"].split("x")) if rec["shape"] else ()
            rows.append(TransferRow(rec["tensor"], Status(rec["status"]), rec["source"] or None, shape))
        return cls(TransferPolicy(meta["policy"]), rows, seed=int(meta["seed"]))


class TransferError(ValueError):
    pass


_BLOCK = re.compile(r"^encoder\.stages\.(\d+)\.blocks\.(\d+)\.")
_COMPAT_KEYS = ("patch", "in_chans", "embed_dim", "window", "heads", "mlp_ratio", "rel_pos_bias")


def _upstream_depths(ckpt: NamedTensorStore) -> dict[int, int]:
    depths: dict[int, int] = {}
    for name in ckpt.tensors:
        m = _BLOCK.match(name)
        if m:
            i, j = int(m.group(1)), int(m.group(2))
            depths[i] = max(depths.get(i, 0), j + 1)
    return depths


def _source_for(name: str, policy: TransferPolicy, up_depths: dict[int, int]) -> Optional[str]:
    """Upstream tensor a downstream tensor copies, or None for random init."""
    if policy is TransferPolicy.SCRATCH:
        return None
    m = _BLOCK.match(name)
    if m:
        # the first blocks of each stage line up with upstream; deeper extras start random
        i, j = int(m.group(1)), int(m.group(2))
        return name if j < up_depths.get(i, 0) else None
    if name.startswith("encoder."):
        return name
    if policy is TransferPolicy.RADIOLOGICAL_SEG and name.startswith("decoder."):
        return None if ".reduce." in name else name
    return None


def _check_compatible(ckpt: NamedTensorStore, config: ModelConfig) -> None:
    up = ckpt.metadata.get("model_config")
    if up is None:
        return
    for key in _COMPAT_KEYS:
        a, b = up.get(key), getattr(config, key)
        if isinstance(b, tuple):
            b = list(b)
        if a is not None and a != b:
            raise TransferError(f"checkpoint {key}={a!r} is incompatible with model {key}={b!r}")


@torch.no_grad()
def transfer_weights(
    ckpt: NamedTensorStore,
    model: Union[SegModel, ClsModel],
    policy: TransferPolicy | str,
    seed: int = 0,
) -> TransferReport:
    """Re-initialize ``model`` from ``seed`` and copy pretrained tensors per ``policy``.

    All mapped pairs are validated before anything is written, so a failure
    leaves the model untouched.
    """
    policy = TransferPolicy(policy)
    if policy is TransferPolicy.CLASSIFY and not isinstance(model, ClsModel):
        raise TransferError("the classify policy needs a ClsModel")
    if policy in (TransferPolicy.RADIOLOGICAL_SEG, TransferPolicy.COLOR_SEG) and not isinstance(model, SegModel):
        raise TransferError(f"the {policy.value} policy needs a SegModel")
    if policy is not TransferPolicy.SCRATCH:
        _check_compatible(ckpt, model.config)

    up_depths = _upstream_depths(ckpt)
    current = model.state_dict()
    rows, copies = [], {}
    for name, t in current.items():
        src = _source_for(name, policy, up_depths)
        shape = tuple(t.shape)
        if src is not None:
            if src not in ckpt.tensors:
                raise TransferError(f"upstream tensor {src!r} missing for {name!r}")
            if tuple(ckpt.tensors[src].shape) != shape:
                raise TransferError(f"shape mismatch: {name} {shape} vs upstream {src} {tuple(ckpt.tensors[src].shape)}")
            copies[name] = torch.from_numpy(ckpt.tensors[src].astype(np.float32)).to(t.dtype)
            rows.append(TransferRow(name, Status.TRANSFERRED, src, shape))
        else:
            rows.append(TransferRow(name, Status.RANDOM_INIT, None, shape))

    fresh = type(model)(model.config, model.n_classes, seed=None).to(next(model.parameters()).dtype)
    init_weights(fresh, torch.Generator().manual_seed(seed))
    state = fresh.state_dict()
    state.update(copies)
    model.load_state_dict(state)
    return TransferReport(policy, rows, seed=seed)


@dataclass
class VerifyResult:
    ok: bool
    checked: list[str] = field(default_factory=list)
    failure: Optional[str] = None

    def __bool__(self):
        return self.ok


def _bits(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype="<f4").view("<u4")


def verify_transfer(ckpt: NamedTensorStore, model: nn.Module, report: TransferReport) -> VerifyResult:
    """Bitwise comparison of every TRANSFERRED tensor against the checkpoint.

    Stops at the first difference; RANDOM_INIT tensors are not compared.
    """
    state = model.state_dict()
    checked = []
    for row in report.rows:
        if row.status is not Status.TRANSFERRED:
            continue
        have = state[row.tensor].detach().cpu().to(torch.float32).numpy()
        want = ckpt.tensors[row.source]
        checked.append(row.tensor)
        if have.shape != want.shape or not np.array_equal(_bits(have), _bits(want)):
            return VerifyResult(False, checked, row.tensor)
    return VerifyResult(True, checked, None)
