"""Windowed / shifted-window self-attention and the Swin building blocks.

All feature maps use the channels-last layout ``(B, H, W, C)``.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from swinmae.config import ModelConfig, StageConfig


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """Tile ``(B, H, W, C)`` into ``(B * nW, window**2, C)`` row-major windows."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    B, H, W, C = x.shape
    if H % window or W % window:
        raise ValueError(f"grid {(H, W)} is not divisible by window {window}")
    x = x.view(B, H // window, window, W // window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, C)


def window_reverse(windows: torch.Tensor, window: int, H: int, W: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.view(-1, H // window, W // window, window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
    coords = coords.flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel = rel + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


def shifted_attention_mask(grid: tuple[int, int], window: int, shift: int) -> Optional[torch.Tensor]:
    """Additive ``(nW, M*M, M*M)`` masks (0 / -inf) for attention after a cyclic shift.

    Returns ``None`` for ``shift == 0``: unshifted windows need no mask.
    """
    if shift == 0:
        return None
    if not 0 < shift < window:
        raise ValueError(f"shift must satisfy 0 < shift < window, got shift={shift}, window={window}")
    H, W = grid
    region = torch.zeros(1, H, W, 1)
    label = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            region[:, hs, ws, :] = label
            label += 1
    win = window_partition(region, window).squeeze(-1)
    diff = win.unsqueeze(1) - win.unsqueeze(2)
    return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))


def attention(
    x: torch.Tensor,
    qkv_weight: torch.Tensor,
    qkv_bias: Optional[torch.Tensor],
    proj_weight: torch.Tensor,
    proj_bias: Optional[torch.Tensor],
    heads: int,
    bias: Optional[torch.Tensor] = None,
    mask: Optional[torch.Tensor] = None,
    return_probs: bool = False,
):
    """Multi-head self-attention over windows ``x`` of shape ``(B_, N, C)``.

    ``bias`` is ``(heads, N, N)``; ``mask`` is ``(nW, N, N)`` and is tiled over
    the leading batch dimension (windows of one image are contiguous).
    """
    B_, N, C = x.shape
    hd = C // heads
    qkv = F.linear(x, qkv_weight, qkv_bias).reshape(B_, N, 3, heads, hd).permute(2, 0, 3, 1, 4)
    q, k, v = qkv.unbind(0)
    attn = (q * hd**-0.5) @ k.transpose(-2, -1)
    if bias is not None:
        attn = attn + bias.unsqueeze(0)
    if mask is not None:
        nW = mask.shape[0]
        attn = attn.view(B_ // nW, nW, heads, N, N) + mask.unsqueeze(1).unsqueeze(0)
        attn = attn.view(B_, heads, N, N)
    probs = attn.softmax(dim=-1)
    out = (probs @ v).transpose(1, 2).reshape(B_, N, C)
    out = F.linear(out, proj_weight, proj_bias)
    if return_probs:
        return out, probs
    return out


class WindowAttention(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, rel_pos_bias: bool = True):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.window = window
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        if rel_pos_bias:
            self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        else:
            self.register_parameter("rel_bias", None)
        self.register_buffer("rel_index", relative_position_index(window), persistent=False)

    def position_bias(self) -> Optional[torch.Tensor]:
        if self.rel_bias is None:
            return None
        n = self.window * self.window
        return self.rel_bias[self.rel_index.reshape(-1)].view(n, n, -1).permute(2, 0, 1)

    def forward(self, x, mask=None, return_probs=False):
        return attention(
            x, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias,
            self.heads, self.position_bias(), mask, return_probs,
        )


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(nn.Module):
    """Pre-norm transformer block over (shifted) windows."""

    def __init__(
        self,
        dim: int,
        heads: int,
        window: int,
        shift: int,
        grid: tuple[int, int],
        mlp_ratio: float = 4.0,
        rel_pos_bias: bool = True,
    ):
        super().__init__()
        self.window = window
        self.shift = shift
        self.grid = tuple(grid)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, rel_pos_bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.register_buffer("attn_mask", shifted_attention_mask(self.grid, window, shift), persistent=False)

    def mix(self, x: torch.Tensor) -> torch.Tensor:
        """(S)W-MSA on an already-normalized map, returned in the input frame."""
        B, H, W, C = x.shape
        if (H, W) != self.grid:
            raise ValueError(f"block built for grid {self.grid}, got {(H, W)}")
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
        win = window_partition(x, self.window)
        win = self.attn(win, self.attn_mask)
        x = window_reverse(win, self.window, H, W)
        if self.shift:
            x = torch.roll(x, shifts=(self.shift, self.shift), dims=(1, 2))
        return x

    def forward(self, x):
        x = x + self.mix(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchMerge(nn.Module):
    """2x2 neighbourhood concat -> LayerNorm -> linear 4C -> 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise ValueError(f"patch merge needs an even grid, got {(H, W)}")
        x = x.view(B, H // 2, 2, W // 2, 2, C).permute(0, 1, 3, 2, 4, 5).reshape(B, H // 2, W // 2, 4 * C)
        return self.reduction(self.norm(x))


def pixel_shuffle(x: torch.Tensor, scale: int) -> torch.Tensor:
    """``(B, H, W, s*s*C) -> (B, s*H, s*W, C)``; channel blocks fill the s x s tile row-major."""
    B, H, W, D = x.shape
    C = D // (scale * scale)
    x = x.view(B, H, W, scale, scale, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H * scale, W * scale, C)


class PatchExpand(nn.Module):
    """Linear C -> 2C, then shuffle into a 2x2 tile of C/2 channels.

    The 2x2 tile order matches :class:`PatchMerge`, so a merge with the
    transposed permutation undoes an expand exactly.
    """

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ValueError(f"patch expand needs an even channel count, got {dim}")
        self.expand = nn.Linear(dim, 2 * dim, bias=False)

    def forward(self, x):
        if x.shape[-1] % 2:
            raise ValueError(f"patch expand needs an even channel count, got {x.shape[-1]}")
        return pixel_shuffle(self.expand(x), 2)


class FinalExpand(nn.Module):
    """Token grid back to pixel resolution: linear C -> p*p*C then shuffle."""

    def __init__(self, dim: int, patch: int):
        super().__init__()
        self.patch = patch
        self.expand = nn.Linear(dim, patch * patch * dim, bias=False)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        return self.norm(pixel_shuffle(self.expand(x), self.patch))


class PatchEmbed(nn.Module):
    def __init__(self, patch_dim: int, dim: int):
        super().__init__()
        self.proj = nn.Linear(patch_dim, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, tokens):
        return self.norm(self.proj(tokens))


def make_blocks(stage: StageConfig, grid: tuple[int, int], shift: int, rel_pos_bias: bool = True) -> nn.ModuleList:
    return nn.ModuleList(
        SwinBlock(stage.dim, stage.heads, stage.window, shift if j % 2 else 0, grid, stage.mlp_ratio, rel_pos_bias)
        for j in range(stage.depth)
    )


class EncoderStage(nn.Module):
    def __init__(self, stage: StageConfig, grid, shift: int, merge: bool, rel_pos_bias: bool = True):
        super().__init__()
        self.merge = PatchMerge(stage.dim // 2) if merge else None
        self.blocks = make_blocks(stage, grid, shift, rel_pos_bias)

    def forward(self, x):
        if self.merge is not None:
            x = self.merge(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class SwinEncoder(nn.Module):
    """Patch embedding followed by hierarchical Swin stages.

    Stage 0 runs directly on the embedded token grid; later stages start with
    a patch merge. :meth:`forward_stages` returns every stage output, the last
    one passed through the final LayerNorm.
    """

    def __init__(self, config: ModelConfig, depths: Optional[tuple[int, ...]] = None):
        super().__init__()
        self.config = config
        depths = config.enc_depths if depths is None else depths
        self.depths = tuple(depths)
        patch_dim = config.patch * config.patch * config.in_chans
        self.embed = PatchEmbed(patch_dim, config.embed_dim)
        self.stages = nn.ModuleList(
            EncoderStage(s, config.stage_grid(i), config.stage_shift(i), i > 0, config.rel_pos_bias)
            for i, s in enumerate(config.encoder_stages(self.depths))
        )
        self.norm = nn.LayerNorm(config.stage_dim(config.num_stages - 1))

    def forward_stages(self, x: torch.Tensor) -> list[torch.Tensor]:
        gh, gw = self.config.grid
        if tuple(x.shape[1:3]) != (gh, gw) or x.shape[-1] != self.config.embed_dim:
            raise ValueError(f"expected embedded grid (B, {gh}, {gw}, {self.config.embed_dim}), got {tuple(x.shape)}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        feats[-1] = self.norm(feats[-1])
        return feats

    def forward(self, tokens: torch.Tensor) -> list[torch.Tensor]:
        """``tokens``: raw patch grid ``(B, Gh, Gw, p*p*c)``."""
        return self.forward_stages(self.embed(tokens))


class DecoderStage(nn.Module):
    """Expand from the deeper stage, optionally fuse a skip, then Swin blocks."""

    def __init__(self, stage: StageConfig, grid, shift: int, skip: bool, rel_pos_bias: bool = True):
        super().__init__()
        self.expand = PatchExpand(2 * stage.dim)
        self.reduce = nn.Linear(2 * stage.dim, stage.dim) if skip else None
        self.blocks = make_blocks(stage, grid, shift, rel_pos_bias)

    def forward(self, x, skip: Optional[torch.Tensor] = None):
        x = self.expand(x)
        if self.reduce is not None:
            if skip is None:
                raise ValueError("this decoder stage expects a skip connection")
            x = self.reduce(torch.cat([x, skip], dim=-1))
        for blk in self.blocks:
            x = blk(x)
        return x


class SwinDecoder(nn.Module):
    def __init__(self, config: ModelConfig, skip: bool = False):
        super().__init__()
        n = config.num_stages
        self.stages = nn.ModuleList(
            DecoderStage(s, config.stage_grid(n - 2 - k), config.stage_shift(n - 2 - k), skip, config.rel_pos_bias)
            for k, s in enumerate(config.decoder_stages())
        )

    def forward(self, feats: list[torch.Tensor], use_skips: bool = False) -> torch.Tensor:
        x = feats[-1]
        for k, stage in enumerate(self.stages):
            skip = feats[-2 - k] if use_skips else None
            x = stage(x, skip)
        return x


@torch.no_grad()
def init_weights(module: nn.Module, generator: Optional[torch.Generator] = None) -> nn.Module:
    """Truncated-normal(0.02) linears, zero biases, unit LayerNorms, zero position bias."""
    for name, m in module.named_modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04, generator=generator)
            if m.bias is not None:
                m.bias.zero_()
        elif isinstance(m, nn.LayerNorm):
            m.weight.fill_(1.0)
            m.bias.zero_()
        elif isinstance(m, WindowAttention) and m.rel_bias is not None:
            m.rel_bias.zero_()
    return module

