"""3D rotary position embeddings with NTK-aware base rescaling.

The head dimension is split into a temporal block and two spatial blocks;
each block rotates adjacent pairs (x[2i], x[2i+1]) by angles
pos * base_axis**(-2i/d_axis). When generating above the trained resolution,
the spatial bases are enlarged by the NTK rule so the denser position grid
stays in-distribution; the temporal axis is never rescaled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


def default_axis_split(head_dim: int) -> tuple[int, int, int]:
    """Temporal ~head_dim/4, remainder split over (y, x), all even."""
    if head_dim % 2 or head_dim < 6:
        raise ConfigError(f"head_dim must be even and >= 6, got {head_dim}")
    d_t = max(2, 2 * round(head_dim / 8))
    rem = head_dim - d_t
    d_y = max(2, (rem // 2) & ~1)
    d_x = rem - d_y
    if d_x < 2 or d_x % 2:
        raise ConfigError(f"no even 3-way split for head_dim={head_dim}")
    return d_t, d_y, d_x


def ntk_rescaled_base(base: float, scale: float, d_axis: int) -> float:
    """NTK-aware frequency base: base * scale**(d_axis / (d_axis - 2))."""
    if d_axis < 4 or d_axis % 2:
        raise ConfigError(f"NTK rescaling needs an even axis dim >= 4, got {d_axis}")
    if scale < 1.0:
        raise ConfigError(f"NTK scale must be >= 1, got {scale}")
    if base <= 0.0:
        raise ConfigError(f"rope base must be positive, got {base}")
    return base * scale ** (d_axis / (d_axis - 2))


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    axis_split: tuple[int, int, int]
    base: float = 10000.0
    # spatial (y, x) scales applied to high-resolution tokens; low res uses 1
    ntk_scale: tuple[float, float] = (2.0, 2.0)

    def __post_init__(self):
        d_t, d_y, d_x = self.axis_split
        if d_t + d_y + d_x != self.head_dim:
            raise ConfigError(f"axis_split {self.axis_split} does not sum to head_dim {self.head_dim}")
        if any(d % 2 or d < 2 for d in self.axis_split):
            raise ConfigError(f"axis_split entries must be even and >= 2, got {self.axis_split}")
        if self.base <= 0:
            raise ConfigError(f"rope base must be positive, got {self.base}")
        for s, d in zip(self.ntk_scale, (d_y, d_x)):
            if s < 1.0:
                raise ConfigError(f"ntk_scale must be >= 1, got {s}")
            if s > 1.0 and d < 4:
                raise ConfigError(f"cannot NTK-rescale a {d}-dim axis (needs >= 4)")

    @classmethod
    def default(cls, head_dim: int, ntk_scale: tuple[float, float] = (2.0, 2.0)) -> "RopeConfig":
        return cls(head_dim=head_dim, axis_split=default_axis_split(head_dim), ntk_scale=ntk_scale)


def _axis_inv_freq(base: float, d_axis: int) -> np.ndarray:
    k = np.arange(d_axis // 2, dtype=np.float64)
    return base ** (-2.0 * k / d_axis)


def rope_tables(cfg: RopeConfig, positions: np.ndarray, spatial_scale: tuple[float, float] = (1.0, 1.0), dtype=np.float32):
    """Per-token (cos, sin) tables of shape [N, head_dim // 2].

    positions: integer array [N, 3] of (frame, y, x). spatial_scale selects the
    NTK scale actually applied ((1, 1) at the trained resolution).
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ConfigError(f"positions must be [N, 3], got {positions.shape}")
    d_t, d_y, d_x = cfg.axis_split
    bases = [cfg.base]
    for s, d in zip(spatial_scale, (d_y, d_x)):
        bases.append(ntk_rescaled_base(cfg.base, s, d) if s > 1.0 else cfg.base)
    angles = []
    for axis, (b, d) in enumerate(zip(bases, (d_t, d_y, d_x))):
        angles.append(positions[:, axis : axis + 1] * _axis_inv_freq(b, d)[None, :])
    theta = np.concatenate(angles, axis=1)
    return np.cos(theta).astype(dtype), np.sin(theta).astype(dtype)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate adjacent pairs of the last axis; x is [N, heads, head_dim].

    cos/sin are [N, head_dim // 2] and broadcast over heads. Pure rotation,
    so norms are preserved.
    """
    c = cos[:, None, :]
    s = sin[:, None, :]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def apply_rope_inverse(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotation by the opposite angle (transpose of apply_rope)."""
    return apply_rope(x, cos, -sin)


def rope_rotate(vec: np.ndarray, pos: tuple[int, int, int], cfg: RopeConfig,
                spatial_scale: tuple[float, float] = (1.0, 1.0)) -> np.ndarray:
    """Rotate a single head vector at one (frame, y, x) position."""
    vec = np.asarray(vec)
    if vec.shape[-1] != cfg.head_dim:
        raise ConfigError(f"vector dim {vec.shape[-1]} != head_dim {cfg.head_dim}")
    cos, sin = rope_tables(cfg, np.asarray([pos]), spatial_scale, dtype=vec.dtype)
    return apply_rope(vec.reshape(1, 1, cfg.head_dim), cos, sin).reshape(vec.shape)
