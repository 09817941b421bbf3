"""AdamW, the warmup + half-cycle cosine schedule and the downstream losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from swinmae.config import ScheduleConfig


class NonFiniteError(FloatingPointError):
    pass


def lr_at(sched: ScheduleConfig, epoch: float) -> float:
    """Learning rate at a (fractional) epoch: linear warmup then half-cycle cosine."""
    if not 0 <= epoch <= sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs}]")
    if epoch < sched.warmup_epochs:
        return sched.base_lr * epoch / sched.warmup_epochs
    progress = (epoch - sched.warmup_epochs) / (sched.total_epochs - sched.warmup_epochs)
    return sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptState:
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: OptState,
    sched: ScheduleConfig,
    epoch: float,
    lr: float | None = None,
    no_decay: frozenset[str] | set[str] = frozenset(),
) -> float:
    """One in-place AdamW update of ``params``; returns the learning rate used.

    Weight decay is decoupled and applied before the Adam term; names in
    ``no_decay`` are exempt. Parameters whose gradient is ``None`` are skipped
    (and their moments untouched).
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in {name}")
    lr = lr_at(sched, epoch) if lr is None else lr
    b1, b2 = sched.betas
    state.step += 1
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.exp_avg:
            state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        if m.shape != p.shape:
            raise ValueError(f"optimizer state for {name} has shape {tuple(m.shape)}, parameter {tuple(p.shape)}")
        if name not in no_decay:
            p.mul_(1 - lr * sched.weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / bc2).sqrt_().add_(sched.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return lr


class AdamW:
    """Stateful wrapper over :func:`adamw_step` for an ``nn.Module``.

    Biases, LayerNorm parameters, position-bias tables and the mask token are
    exempt from weight decay.
    """

    def __init__(self, model: torch.nn.Module, sched: ScheduleConfig):
        self.model = model
        self.sched = sched
        self.state = OptState()
        self.params = {n: p for n, p in model.named_parameters() if p.requires_grad}
        self.no_decay = frozenset(
            n for n, p in self.params.items() if p.dim() <= 1 or n.endswith("rel_bias") or n == "mask_token"
        )

    def step(self, epoch: float) -> float:
        grads = {n: p.grad for n, p in self.params.items()}
        return adamw_step(self.params, grads, self.state, self.sched, epoch, no_decay=self.no_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _check_targets(target: torch.Tensor, n_classes: int):
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n_classes):
        raise ValueError(f"target class index outside [0, {n_classes})")


def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy with classes on the last axis.

    ``logits``: ``(..., K)``; ``target``: integer tensor of shape ``(...)``.
    Works for per-sample (``(B, K)``) and per-pixel (``(B, H, W, K)``) logits.
    """
    _check_targets(target, logits.shape[-1])
    shifted = logits - logits.max(dim=-1, keepdim=True).values.detach()
    logp = shifted - torch.logsumexp(shifted, dim=-1, keepdim=True)
    return -logp.gather(-1, target.long().unsqueeze(-1)).mean()


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft Dice loss: ``1 - mean_k (2 sum p_k t_k + eps) / (sum p_k + sum t_k + eps)``.

    ``probs`` is ``(..., H, W, K)``; sums run over every axis except the class axis.
    """
    K = probs.shape[-1]
    _check_targets(target, K)
    onehot = F.one_hot(target.long(), K).to(probs.dtype)
    dims = tuple(range(probs.dim() - 1))
    inter = (probs * onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + onehot.sum(dim=dims)
    return 1.0 - ((2 * inter + eps) / (denom + eps)).mean()


def seg_loss(logits: torch.Tensor, target: torch.Tensor, weights: tuple[float, float] = (0.5, 0.5)) -> torch.Tensor:
    """Weighted Dice + cross-entropy from segmentation logits ``(..., K)``."""
    w_dice, w_ce = weights
    out = logits.new_zeros(())
    if w_dice:
        out = out + w_dice * dice_loss(logits.softmax(dim=-1), target)
    if w_ce:
        out = out + w_ce * ce_loss(logits, target)
    return out
