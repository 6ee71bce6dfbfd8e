"""Chunk-by-chunk autoregressive generation.

Per chunk: draw noise at the plan's starting resolution, run the low phase
against the low cache, upsample the clean estimate and renoise across the
phase boundary, refine at high resolution against the high cache, then embed
the finished chunk into both caches (the low side from the downsampled final
output, so the next chunk's low context is spatially consistent with what was
actually generated) and apply the retention policy.

All noise is drawn from substreams keyed by (chunk, step), never from a
sequential stream, so a chunk's draws do not depend on how many chunks follow
or which mode is running. That is what makes the cross-mode bit-equality
checks and prefix stability hold exactly.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import hstn
from .cache import DualKVCache
from .errors import ConfigError, NumericError
from .model import ConditionVector, Denoiser, FlopCounter, LatentChunk, config_hash
from .numerics import downsample_avg2, upsample_bilinear2
from .report import ChunkStats, RunReport
from .rng import Rng
from .schedule import DenoisePlan, make_plan, renoise_psi

# retention policy per mode; the denoise phases come from make_plan
MODE_POLICY = {
    "histream": "agsw",
    "histream_plus": "agsw",
    "naive_two_step": "agsw",
    "no_drc": "agsw",
    "no_agsw": "full_history",
    "baseline_full": "full_history",
}


@dataclass
class GenerationRequest:
    mode: str
    n_chunks: int
    seed: int
    cond: ConditionVector | None = None
    shift: float = 7.0
    attn_scale_first: float | None = None  # defaults to the model config
    attn_scale_rest: float | None = None
    mask_policy: object = None  # callable(generated_frames: list[int]) -> set[int]
    attn_recorder: object = None

    def __post_init__(self):
        if self.mode not in MODE_POLICY:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.n_chunks < 1:
            raise ConfigError(f"n_chunks must be >= 1, got {self.n_chunks}")


@dataclass
class GenerationResult:
    chunks: list[LatentChunk]
    report: RunReport
    plan: DenoisePlan
    cache: DualKVCache

    @property
    def n_frames(self) -> int:
        return sum(c.n_frames for c in self.chunks)


def generate(model: Denoiser, req: GenerationRequest) -> GenerationResult:
    cfg = model.cfg
    plan = make_plan(req.mode, req.n_chunks, req.shift)
    cache = DualKVCache(cfg.n_layers, policy=MODE_POLICY[req.mode])
    rng = Rng(req.seed)
    cond = req.cond if req.cond is not None else ConditionVector.zeros(cfg.d_cond)
    scale_first = cfg.attn_scale_first_chunk if req.attn_scale_first is None else req.attn_scale_first
    scale_rest = cfg.attn_scale_rest if req.attn_scale_rest is None else req.attn_scale_rest

    out_chunks: list[LatentChunk] = []
    stats: list[ChunkStats] = []
    generated_frames: list[int] = []

    for ci in range(1, req.n_chunks + 1):
        start_frame = (ci - 1) * cfg.chunk_frames
        if req.mask_policy is not None:
            cache.apply_retention_mask(req.mask_policy(list(generated_frames)))
        attn_scale = scale_first if ci == 1 else scale_rest
        steps = plan.steps(ci - 1)
        counter = FlopCounter()
        forwards = {"low": 0, "high": 0}

        first_res = steps[0][0]
        h0, w0 = cfg.resolution_hw(first_res)
        x = rng.substream("chunk", ci, "init").standard_normal((cfg.chunk_frames, cfg.latent_channels, h0, w0))

        final: LatentChunk | None = None
        t_start = time.perf_counter()
        for s_idx, (res, t) in enumerate(steps):
            chunk_in = LatentChunk(x, res, start_frame)
            context = cache.context_for(res)
            est = model.forward(chunk_in, t, cond, context, attn_scale,
                                flops=counter, attn_recorder=req.attn_recorder)
            if not np.all(np.isfinite(est.frames)):
                raise NumericError(f"NaN/Inf in x0_hat at chunk {ci}, step {s_idx + 1} (t={t:.6f}, {res})")
            forwards[res] += 1
            if s_idx + 1 < len(steps):
                next_res, next_t = steps[s_idx + 1][0], steps[s_idx + 1][1]
                x0 = est.frames
                if next_res != res:
                    x0 = upsample_bilinear2(x0)
                eps = rng.substream("chunk", ci, "renoise", s_idx).standard_normal(x0.shape)
                x = renoise_psi(x0, eps, next_t)
            else:
                final = est
        latency = time.perf_counter() - t_start

        kv_high = model.forward_kv(final, cache.context_for("high"), flops=counter)
        low_final = LatentChunk(downsample_avg2(final.frames), "low", start_frame)
        kv_low = model.forward_kv(low_final, cache.context_for("low"), flops=counter)
        cache.update_after_chunk(kv_low, kv_high, ci)

        out_chunks.append(final)
        generated_frames.extend(final.frame_indices)
        stats.append(ChunkStats(ci, latency, forwards["low"], forwards["high"],
                                counter.total, cache.byte_size()))

    report = RunReport(mode=req.mode, config_hash=config_hash(cfg),
                       chunk_frames=cfg.chunk_frames, chunks=stats)
    return GenerationResult(chunks=out_chunks, report=report, plan=plan, cache=cache)


def _write_pgm(path, frame2d: np.ndarray) -> None:
    lo, hi = float(frame2d.min()), float(frame2d.max())
    if hi > lo:
        scaled = np.round((frame2d - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(frame2d)  # constant frames carry no signal; map to 0
    data = scaled.astype(np.uint8)
    header = f"P5\n{frame2d.shape[1]} {frame2d.shape[0]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + data.tobytes())


def export_frames(result: GenerationResult, dir_path, fmt: str = "hstn") -> list[str]:
    """Write generated chunks as HSTN tensors or channel-0 PGM snapshots."""
    if fmt not in ("hstn", "pgm"):
        raise ConfigError(f"unknown export format {fmt!r}")
    os.makedirs(dir_path, exist_ok=True)
    written = []
    if fmt == "hstn":
        for i, chunk in enumerate(result.chunks):
            path = os.path.join(dir_path, f"chunk_{i:04d}.hstn")
            hstn.write_tensor(path, chunk.frames)
            written.append(path)
    else:
        for chunk in result.chunks:
            for local, frame_idx in enumerate(chunk.frame_indices):
                path = os.path.join(dir_path, f"frame_{frame_idx:04d}.pgm")
                _write_pgm(path, chunk.frames[local, 0])
                written.append(path)
    return written
