"""Patch tokenization, random patch masking and reconstruction targets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class PatchGrid:
    tokens: np.ndarray  # (Nh, Nw, p*p*c)
    patch_size: int
    channels: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.tokens.shape[0], self.tokens.shape[1]


@dataclass(frozen=True)
class MaskPlan:
    ratio: float
    masked_indices: tuple[int, ...]
    n_patches: int
    seed: int | None = None

    def __post_init__(self):
        idx = self.masked_indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("masked indices must be strictly increasing")
        if idx and (idx[0] < 0 or idx[-1] >= self.n_patches):
            raise IndexError(f"masked index out of range for {self.n_patches} patches")

    @classmethod
    def empty(cls, n_patches: int) -> "MaskPlan":
        """A plan masking nothing. Only meant for tests and ablations."""
        return cls(0.0, (), n_patches, None)

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.n_patches, dtype=bool)
        out[list(self.masked_indices)] = True
        return out


def _pixels(image) -> np.ndarray:
    px = np.asarray(getattr(image, "pixels", image))
    if px.ndim == 2:
        px = px[:, :, None]
    if px.ndim != 3:
        raise ValueError(f"expected an H x W or H x W x c image, got shape {px.shape}")
    return px


def patchify(image, p: int) -> PatchGrid:
    """Split an image (array or record) into non-overlapping p x p patches."""
    px = _pixels(image)
    H, W, c = px.shape
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} is not divisible by patch size {p}")
    t = px.reshape(H // p, p, W // p, p, c).transpose(0, 2, 1, 3, 4).reshape(H // p, W // p, p * p * c)
    return PatchGrid(t, p, c)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    """Inverse of :func:`patchify`; returns ``H x W x c``."""
    p, c = grid.patch_size, grid.channels
    Nh, Nw, D = grid.tokens.shape
    if D != p * p * c:
        raise ValueError(f"token width {D} != p*p*c = {p * p * c}")
    return grid.tokens.reshape(Nh, Nw, p, p, c).transpose(0, 2, 1, 3, 4).reshape(Nh * p, Nw * p, c)


def patchify_batch(x: torch.Tensor, p: int) -> torch.Tensor:
    """``(B, H, W, c) -> (B, H/p, W/p, p*p*c)`` with the same token layout as :func:`patchify`."""
    B, H, W, c = x.shape
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} is not divisible by patch size {p}")
    x = x.reshape(B, H // p, p, W // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H // p, W // p, p * p * c)


def unpatchify_batch(t: torch.Tensor, p: int, c: int) -> torch.Tensor:
    B, Nh, Nw, D = t.shape
    if D != p * p * c:
        raise ValueError(f"token width {D} != p*p*c = {p * p * c}")
    t = t.reshape(B, Nh, Nw, p, p, c).permute(0, 1, 3, 2, 4, 5)
    return t.reshape(B, Nh * p, Nw * p, c)


def mask_count(n_patches: int, ratio: float) -> int:
    # round half away from zero; Python's round() is banker's rounding
    return int(math.floor(ratio * n_patches + 0.5))


def sample_mask(n_patches: int, ratio: float, seed: int) -> MaskPlan:
    """Uniformly choose ``round(ratio * n_patches)`` patches to mask, without replacement."""
    if n_patches < 1:
        raise ValueError("n_patches must be >= 1")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    k = mask_count(n_patches, ratio)
    if k == 0 or k == n_patches:
        raise ValueError(f"ratio {ratio} masks {k} of {n_patches} patches; nothing to learn")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.permutation(n_patches)[:k])
    return MaskPlan(ratio, tuple(int(i) for i in idx), n_patches, seed)


def plans_to_mask(plans: list[MaskPlan], grid: tuple[int, int]) -> torch.Tensor:
    """Stack plans into a boolean ``(B, Nh, Nw)`` tensor (True = masked)."""
    n = grid[0] * grid[1]
    for plan in plans:
        if plan.n_patches != n:
            raise IndexError(f"plan built for {plan.n_patches} patches, grid has {n}")
    m = np.stack([plan.as_bool() for plan in plans]).reshape(len(plans), *grid)
    return torch.from_numpy(m)


def apply_mask(tokens: torch.Tensor, mask: torch.Tensor, mask_token: torch.Tensor) -> torch.Tensor:
    """Replace masked tokens by ``mask_token``.

    ``tokens`` is ``(B, Nh, Nw, C)``; ``mask`` is boolean ``(B, Nh, Nw)`` or a
    single :class:`MaskPlan` for an unbatched ``(Nh, Nw, C)`` grid. Unmasked
    tokens pass through bit-for-bit and masked content is never read, so NaNs
    there cannot leak.
    """
    if isinstance(mask, MaskPlan):
        grid = tuple(tokens.shape[-3:-1])
        if tokens.dim() != 3:
            raise ValueError("a single MaskPlan applies to one unbatched (Nh, Nw, C) grid")
        mask = plans_to_mask([mask], grid)[0]
    if mask.shape != tokens.shape[:-1]:
        raise IndexError(f"mask shape {tuple(mask.shape)} does not match token grid {tuple(tokens.shape[:-1])}")
    return torch.where(mask.unsqueeze(-1), mask_token.to(tokens.dtype).expand_as(tokens), tokens)


def normalize_patches(t, eps: float = 1e-6):
    """Per-patch standardization over the last axis (numpy or torch)."""
    mean = t.mean(axis=-1, keepdims=True) if isinstance(t, np.ndarray) else t.mean(dim=-1, keepdim=True)
    var = t.var(axis=-1, keepdims=True) if isinstance(t, np.ndarray) else t.var(dim=-1, unbiased=False, keepdim=True)
    return (t - mean) / (var + eps) ** 0.5


def reconstruction_target(image, p: int, patch_norm_target: bool = False, eps: float = 1e-6) -> np.ndarray:
    tokens = patchify(image, p).tokens
    if patch_norm_target:
        tokens = normalize_patches(tokens.astype(np.float64), eps).astype(tokens.dtype)
    return tokens
