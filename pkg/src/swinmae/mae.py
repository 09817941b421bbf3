"""Masked autoencoder: Swin encoder, Swin decoder and the reconstruction objective."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from swinmae.config import ModelConfig
from swinmae.patching import (
    MaskPlan,
    apply_mask,
    normalize_patches,
    patchify_batch,
    plans_to_mask,
    sample_mask,
)
from swinmae.swin import SwinDecoder, SwinEncoder, init_weights


class MaeModel(nn.Module):
    """Encoder sees every position (masked ones as a learned token); the decoder
    expands back to the full token grid and a linear head predicts pixels."""

    def __init__(self, config: ModelConfig, seed: Optional[int] = 0):
        super().__init__()
        self.config = config
        self.encoder = SwinEncoder(config, config.enc_depths)
        self.mask_token = nn.Parameter(torch.zeros(config.embed_dim))
        self.decoder = SwinDecoder(config, skip=False)
        self.head = nn.Linear(config.embed_dim, config.patch * config.patch * config.in_chans)
        if seed is not None:
            init_weights(self, torch.Generator().manual_seed(seed))

    def masks_for(self, batch_size: int, seed: int, ratio: Optional[float] = None) -> list[MaskPlan]:
        ratio = self.config.mask_ratio if ratio is None else ratio
        n = self.config.grid[0] * self.config.grid[1]
        if ratio == 0.0:
            return [MaskPlan.empty(n) for _ in range(batch_size)]
        return [sample_mask(n, ratio, seed + i) for i in range(batch_size)]

    def forward_tokens(self, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        emb = self.encoder.embed(tokens)
        emb = apply_mask(emb, mask, self.mask_token)
        feats = self.encoder.forward_stages(emb)
        return self.head(self.decoder(feats))

    def forward(self, images: torch.Tensor, plans: list[MaskPlan]) -> torch.Tensor:
        """``images``: ``(B, H, W, c)``; returns predicted patches ``(B, Nh, Nw, p*p*c)``."""
        cfg = self.config
        if tuple(images.shape[1:]) != (*cfg.image_size, cfg.in_chans):
            raise ValueError(f"expected images (B, {cfg.image_size[0]}, {cfg.image_size[1]}, {cfg.in_chans}), "
                             f"got {tuple(images.shape)}")
        tokens = patchify_batch(images, cfg.patch)
        mask = plans_to_mask(plans, cfg.grid)
        return self.forward_tokens(tokens, mask)


def as_image_batch(batch, dtype=torch.float32) -> torch.Tensor:
    """Stack records / arrays into ``(B, H, W, c)``."""
    if isinstance(batch, torch.Tensor):
        x = batch
    else:
        arrs = [np.asarray(getattr(b, "pixels", b)) for b in batch]
        x = torch.from_numpy(np.stack(arrs))
    if x.dim() == 3:
        x = x.unsqueeze(-1)
    return x.to(dtype)


def mae_forward(batch, model: MaeModel, seed: int, mask_ratio: Optional[float] = None):
    """Predict patches for a batch; image ``i`` gets its mask from ``seed + i``.

    Returns ``(pred, plans)``.
    """
    images = as_image_batch(batch, next(model.parameters()).dtype)
    plans = model.masks_for(images.shape[0], seed, mask_ratio)
    return model(images, plans), plans


def mae_target(images: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    t = patchify_batch(images, config.patch)
    if config.patch_norm_target:
        t = normalize_patches(t)
    return t


def mae_loss(pred: torch.Tensor, target: torch.Tensor, plans, all_positions: bool = False) -> torch.Tensor:
    """Mean squared error over masked patches (or every patch with ``all_positions``)."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    sq = (pred - target) ** 2
    if all_positions:
        return sq.mean()
    if isinstance(plans, MaskPlan):
        plans = [plans]
    if isinstance(plans, torch.Tensor):
        mask = plans.reshape(sq.shape[:-1])
    else:
        mask = plans_to_mask(list(plans), tuple(sq.shape[1:3])).reshape(sq.shape[:-1])
    if not bool(mask.any()):
        raise ValueError("mask plan is empty; masked-only loss is undefined")
    # select rather than multiply so non-finite values at unmasked positions stay out
    picked = sq[mask]
    return picked.mean()


def batch_loss(model: MaeModel, images: torch.Tensor, seed: int) -> torch.Tensor:
    pred, plans = mae_forward(images, model, seed)
    target = mae_target(images, model.config)
    return mae_loss(pred, target, plans, model.config.loss_all_positions)
