"""Architecture and schedule configuration plus the two named profiles."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    depth: int
    dim: int
    heads: int
    window: int
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigError(f"stage depth must be >= 0, got {self.depth}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.window < 2:
            raise ConfigError(f"window must be >= 2, got {self.window}")

    @property
    def shift(self) -> int:
        return self.window // 2


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters shared by the MAE, the segmenter and the classifier.

    ``enc_depths`` is the upstream encoder layout. Downstream models use
    ``down_depths`` for the encoder; ``dec_depths`` lists decoder stages from
    the deepest (just above the bottleneck) to the shallowest.
    """

    image_size: tuple[int, int] = (64, 64)
    in_chans: int = 1
    patch: int = 4
    embed_dim: int = 32
    enc_depths: tuple[int, ...] = (2, 2, 2, 2)
    down_depths: tuple[int, ...] = (2, 2, 6, 2)
    dec_depths: tuple[int, ...] = (2, 2, 2)
    heads: tuple[int, ...] = (2, 4, 8, 8)
    window: int = 4
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.75
    patch_norm_target: bool = False
    loss_all_positions: bool = False
    rel_pos_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        for name in ("enc_depths", "down_depths", "dec_depths", "heads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.enc_depths)

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch, self.image_size[1] // self.patch

    def stage_dim(self, i: int) -> int:
        return self.embed_dim * 2**i

    def stage_grid(self, i: int) -> tuple[int, int]:
        gh, gw = self.grid
        return gh // 2**i, gw // 2**i

    def stage_window(self, i: int) -> int:
        # windows larger than the grid collapse to the whole grid (no shift then)
        return min(self.window, *self.stage_grid(i))

    def stage_shift(self, i: int) -> int:
        if min(self.stage_grid(i)) <= self.window:
            return 0
        return self.window // 2

    def encoder_stages(self, depths: tuple[int, ...] | None = None) -> list[StageConfig]:
        depths = self.enc_depths if depths is None else depths
        return [
            StageConfig(d, self.stage_dim(i), self.heads[i], self.stage_window(i), self.mlp_ratio)
            for i, d in enumerate(depths)
        ]

    def decoder_stages(self) -> list[StageConfig]:
        out = []
        for k, d in enumerate(self.dec_depths):
            i = self.num_stages - 2 - k
            out.append(StageConfig(d, self.stage_dim(i), self.heads[i], self.stage_window(i), self.mlp_ratio))
        return out

    def validate(self) -> None:
        h, w = self.image_size
        if h % self.patch or w % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")
        n = self.num_stages
        if len(self.down_depths) != n or len(self.heads) != n:
            raise ConfigError("enc_depths, down_depths and heads must have the same length")
        if len(self.dec_depths) != n - 1:
            raise ConfigError(f"dec_depths needs {n - 1} stages, got {len(self.dec_depths)}")
        gh, gw = self.grid
        scale = 2 ** (n - 1)
        if gh % scale or gw % scale:
            raise ConfigError(f"token grid {self.grid} cannot be halved {n - 1} times")
        if self.window < 2:
            raise ConfigError("window must be >= 2")
        for i in range(n):
            sh, sw = self.stage_grid(i)
            m = self.stage_window(i)
            if sh % m or sw % m:
                raise ConfigError(f"stage {i} grid {(sh, sw)} not divisible by window {m}")
            if self.stage_dim(i) % self.heads[i]:
                raise ConfigError(f"stage {i} dim {self.stage_dim(i)} not divisible by {self.heads[i]} heads")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 1e-4
    warmup_epochs: int = 10
    total_epochs: int = 800
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 640

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.total_epochs > 0 and not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError(
                f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs}/{self.total_epochs}"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScheduleConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(**d)


def toy_profile(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def paper_profile(**overrides) -> ModelConfig:
    base = dict(
        image_size=(224, 224),
        in_chans=1,
        patch=4,
        embed_dim=96,
        enc_depths=(2, 2, 2, 2),
        down_depths=(2, 2, 6, 2),
        dec_depths=(2, 2, 2),
        heads=(3, 6, 12, 24),
        window=7,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True)
class Profile:
    """Model config plus the three training schedules of one profile."""

    model: ModelConfig
    pretrain: ScheduleConfig
    finetune_seg: ScheduleConfig
    finetune_cls: ScheduleConfig
    extras: dict = field(default_factory=dict)


def profile(name: str) -> Profile:
    if name == "paper":
        return Profile(
            model=paper_profile(),
            pretrain=ScheduleConfig(base_lr=1e-4, warmup_epochs=10, total_epochs=800, batch_size=640),
            # segmentation lr and batch are tuned per task upstream; 1e-4 / 640 are placeholders
            finetune_seg=ScheduleConfig(base_lr=1e-4, warmup_epochs=40, total_epochs=150, batch_size=640),
            finetune_cls=ScheduleConfig(base_lr=1e-3, warmup_epochs=10, total_epochs=50, batch_size=640),
        )
    if name == "toy":
        return Profile(
            model=toy_profile(),
            pretrain=ScheduleConfig(base_lr=1e-3, warmup_epochs=5, total_epochs=50, batch_size=16),
            finetune_seg=ScheduleConfig(base_lr=1e-3, warmup_epochs=5, total_epochs=30, batch_size=16),
            finetune_cls=ScheduleConfig(base_lr=1e-3, warmup_epochs=3, total_epochs=30, batch_size=16),
        )
    raise ConfigError(f"unknown profile {name!r} (expected 'toy' or 'paper')")
