"""Timestep grids with shift, the renoising map, and per-chunk denoise plans.

Timesteps live in [0, 1] with 1 = pure noise. The shift map s*t / (1+(s-1)t)
fixes both endpoints and concentrates steps near the noisy end for s > 1.
Renoising follows the rectified-flow interpolation (1-t)*x0 + t*eps, the same
path the flow-matching loss trains against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

MODES = ("histream", "histream_plus", "baseline_full", "no_drc", "no_agsw", "naive_two_step")

# raw 4-step grid before shifting, noisiest first
_GRID4 = (1.0, 0.75, 0.5, 0.25)
# 2-step chunks take the max-noise point and the low/high boundary
_GRID2 = (1.0, 0.5)


def shift_timestep(t: float, s: float) -> float:
    """Monotone endpoint-fixing reparameterization of [0, 1]."""
    if not (0.0 <= t <= 1.0):
        raise ContractError(f"timestep {t} outside [0, 1]")
    if s <= 0.0:
        raise ConfigError(f"shift parameter must be positive, got {s}")
    return s * t / (1.0 + (s - 1.0) * t)


def renoise_psi(x0: np.ndarray, eps: np.ndarray, t: float) -> np.ndarray:
    """Rectified-flow forward map (1-t)*x0 + t*eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"renoise shapes differ: {x0.shape} vs {eps.shape}")
    if not (0.0 <= t <= 1.0):
        raise ContractError(f"timestep {t} outside [0, 1]")
    one_m_t = x0.dtype.type(1.0 - t)
    return one_m_t * x0 + x0.dtype.type(t) * eps


@dataclass(frozen=True)
class Phase:
    resolution: str  # "low" | "high"
    timesteps: tuple[float, ...]  # strictly decreasing


@dataclass(frozen=True)
class DenoisePlan:
    mode: str
    shift: float
    chunks: tuple[tuple[Phase, ...], ...]

    @property
    def n_chunks(self) -> int:
        return len(self.chunks)

    def forwards_per_chunk(self, index: int) -> dict:
        counts = {"low": 0, "high": 0}
        for phase in self.chunks[index]:
            counts[phase.resolution] += len(phase.timesteps)
        return counts

    def total_forwards(self) -> int:
        return sum(sum(len(p.timesteps) for p in chunk) for chunk in self.chunks)

    def steps(self, index: int):
        """Flattened (resolution, t) pairs for one chunk, in execution order."""
        return [(p.resolution, t) for p in self.chunks[index] for t in p.timesteps]

    def table(self) -> str:
        lines = [f"mode: {self.mode}  shift: {self.shift:g}",
                 f"{'chunk':>5}  {'phase':>5}  {'res':>4}  timesteps"]
        for ci, chunk in enumerate(self.chunks, start=1):
            for pi, phase in enumerate(chunk, start=1):
                ts = ", ".join(f"{t:.6f}" for t in phase.timesteps)
                lines.append(f"{ci:>5}  {pi:>5}  {phase.resolution:>4}  {ts}")
        return "\n".join(lines)


def _four_step(s: float) -> tuple[Phase, ...]:
    ts = [shift_timestep(t, s) for t in _GRID4]
    return (Phase("low", tuple(ts[:2])), Phase("high", tuple(ts[2:])))


def _two_step(s: float) -> tuple[Phase, ...]:
    ts = [shift_timestep(t, s) for t in _GRID2]
    return (Phase("low", (ts[0],)), Phase("high", (ts[1],)))


def _all_high(s: float) -> tuple[Phase, ...]:
    ts = tuple(shift_timestep(t, s) for t in _GRID4)
    return (Phase("high", ts),)


def make_plan(mode: str, n_chunks: int, s: float) -> DenoisePlan:
    """Per-chunk phase schedule for one of the six generation modes."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if n_chunks < 1:
        raise ConfigError(f"n_chunks must be >= 1, got {n_chunks}")
    if mode in ("histream", "no_agsw"):
        chunks = tuple(_four_step(s) for _ in range(n_chunks))
    elif mode == "histream_plus":
        chunks = (_four_step(s),) + tuple(_two_step(s) for _ in range(n_chunks - 1))
    elif mode == "naive_two_step":
        chunks = tuple(_two_step(s) for _ in range(n_chunks))
    else:  # baseline_full, no_drc: every step at high resolution
        chunks = tuple(_all_high(s) for _ in range(n_chunks))
    return DenoisePlan(mode=mode, shift=s, chunks=chunks)
