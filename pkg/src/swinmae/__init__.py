"""Swin-backbone masked autoencoder pretraining, downstream adaptation and evaluation."""

from swinmae.config import ModelConfig, ScheduleConfig, StageConfig, paper_profile, toy_profile

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "ScheduleConfig",
    "StageConfig",
    "paper_profile",
    "toy_profile",
]
