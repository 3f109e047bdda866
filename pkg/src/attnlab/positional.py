"""Rotary position embeddings with dynamic NTK base rescaling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .errors import ConfigError
from .numcore import DTYPE

# Rotation pairs are adjacent dimensions (2k, 2k+1). Recorded in checkpoints.
PAIRING = "interleaved"


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0
    train_len: int = 128

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigError(f"rope head_dim must be a positive even integer, got {self.head_dim}")
        if self.train_len < 1:
            raise ConfigError("rope train_len must be >= 1")
        if not self.base > 1:
            raise ConfigError("rope base must be > 1")


def ntk_scaled_base(cfg: RopeConfig, current_len: int) -> float:
    """Dynamic NTK base: unchanged up to the training length, then
    ``base * s ** (d / (d - 2))`` with ``s = current_len / train_len``."""
    if cfg.head_dim == 2:
        raise ConfigError("dynamic NTK scaling is undefined for head_dim == 2")
    if current_len < 1:
        raise ValueError("current_len must be >= 1")
    if current_len <= cfg.train_len:
        return float(cfg.base)
    s = current_len / cfg.train_len
    d = cfg.head_dim
    return float(cfg.base * s ** (d / (d - 2)))


def rope_angles(n_pos: int, head_dim: int, base: float, positions: Optional[torch.Tensor] = None) -> torch.Tensor:
    if positions is None:
        positions = torch.arange(n_pos, dtype=DTYPE)
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=DTYPE) / head_dim)
    return positions.to(DTYPE).unsqueeze(-1) * inv_freq


def rope_apply(x: torch.Tensor, cfg: RopeConfig, effective_base: Optional[float] = None,
               positions: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Rotate each pair (x[2k], x[2k+1]) at position m by m * base^(-2k/d).

    ``x`` is ``(..., L, head_dim)``; positions default to 0..L-1.
    """
    d = x.shape[-1]
    if d % 2:
        raise ConfigError(f"rope needs an even head dimension, got {d}")
    if d != cfg.head_dim:
        raise ConfigError(f"tensor head dim {d} does not match rope config {cfg.head_dim}")
    base = cfg.base if effective_base is None else effective_base
    theta = rope_angles(x.shape[-2], d, base, positions)
    cos, sin = torch.cos(theta), torch.sin(theta)
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    r0 = x0 * cos - x1 * sin
    r1 = x0 * sin + x1 * cos
    return torch.stack((r0, r1), dim=-1).flatten(-2)
