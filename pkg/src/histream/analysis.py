"""Efficiency and attention-structure measurements.

analytic_flops mirrors the model's instrumented matmul counter closed-form
(2*q*kv*d_model for attention scores and value mixing, 2*tokens*d_in*d_out per
linear, summed over layers, steps and resolutions, cache-embedding passes
included), so the two must agree to the exact integer. Attention statistics
aggregate softmax mass per (layer, head, query frame) onto each attendable
context frame; the frame-drop ablation regenerates under retention masks and
reports latent-space MSE against the full-history baseline.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .engine import MODE_POLICY, GenerationRequest, GenerationResult, generate
from .errors import ConfigError, ContractError
from .model import Denoiser, ModelConfig
from .report import RunReport, ChunkStats
from .schedule import DenoisePlan, make_plan

ATTN_CSV_FIELDS = ("layer", "head", "query_frame", "context_frame", "mass")
DROP_CSV_FIELDS = ("mask_id", "chunk", "mse")


def forward_flops(cfg: ModelConfig, q_tokens: int, ctx_tokens: int, with_head: bool) -> int:
    """Closed-form matmul FLOPs of one transformer pass."""
    t, d = q_tokens, cfg.d_model
    s = ctx_tokens + t
    hidden = cfg.mlp_ratio * d
    total = 2 * t * cfg.latent_channels * d  # token embedding
    total += 2 * (cfg.t_embed_dim + cfg.d_cond) * d + 2 * d * d  # condition trunk
    per_layer = (
        2 * d * 4 * d  # modulation
        + 3 * (2 * t * d * d)  # q, k, v projections
        + 2 * t * s * d  # attention scores
        + 2 * t * s * d  # value mixing
        + 2 * t * d * d  # output projection
        + 2 * t * d * hidden + 2 * t * hidden * d  # mlp
    )
    total += cfg.n_layers * per_layer
    if with_head:
        total += 2 * d * 2 * d + 2 * t * d * cfg.latent_channels
    return total


def context_frames_before(policy: str, chunk_index: int, chunk_frames: int) -> int:
    """Cached frames visible while denoising chunk ``chunk_index`` (1-based)."""
    if chunk_index == 1:
        return 0
    if policy == "agsw":
        return chunk_frames  # anchor + last M-1
    return (chunk_index - 1) * chunk_frames


def analytic_flops(cfg: ModelConfig, plan: DenoisePlan, policy: str) -> list[int]:
    """Exact per-chunk FLOP counts for a plan under a retention policy."""
    if policy not in ("agsw", "full_history"):
        raise ConfigError(f"unknown policy {policy!r}")
    m = cfg.chunk_frames
    p_low, p_high = cfg.tokens_per_frame("low"), cfg.tokens_per_frame("high")
    out = []
    for ci in range(1, plan.n_chunks + 1):
        ctx = context_frames_before(policy, ci, m)
        total = 0
        for res, _t in plan.steps(ci - 1):
            p = p_low if res == "low" else p_high
            total += forward_flops(cfg, m * p, ctx * p, with_head=True)
        # dual cache-embedding passes at t = 0
        total += forward_flops(cfg, m * p_high, ctx * p_high, with_head=False)
        total += forward_flops(cfg, m * p_low, ctx * p_low, with_head=False)
        out.append(total)
    return out


def attention_score_flops(cfg: ModelConfig, resolution: str, ctx_frames: int) -> int:
    """Score FLOPs of a single attention at one resolution (ratio checks)."""
    p = cfg.tokens_per_frame(resolution)
    t = cfg.chunk_frames * p
    return 2 * t * (ctx_frames * p + t) * cfg.d_model


# -- attention mass aggregation -----------------------------------------------


class AttentionAggregator:
    """Accumulates per-(layer, head, query-frame) mass onto context frames."""

    def __init__(self):
        self._acc: dict = {}  # (layer, q_frame) -> {kv_frame: float64[heads]}
        self._norm: dict = {}  # (layer, q_frame) -> total queries accumulated

    def record(self, layer: int, probs: np.ndarray, q_frames, kv_frames, tokens_per_frame: int):
        nh, t, s = probs.shape
        nq, nk = len(q_frames), len(kv_frames)
        if t != nq * tokens_per_frame or s != nk * tokens_per_frame:
            raise ContractError("attention record extents mismatch frame layout")
        p = tokens_per_frame
        masses = probs.reshape(nh, nq, p, nk, p).sum(axis=(2, 4), dtype=np.float64)
        for qi, qf in enumerate(q_frames):
            key = (layer, qf)
            slot = self._acc.setdefault(key, {})
            self._norm[key] = self._norm.get(key, 0) + p
            for ki, kf in enumerate(kv_frames):
                if kf in slot:
                    slot[kf] += masses[:, qi, ki]
                else:
                    slot[kf] = masses[:, qi, ki].copy()

    def finalize(self) -> "AttnStats":
        rows = []
        for (layer, qf), slot in sorted(self._acc.items()):
            total = self._norm[(layer, qf)]
            for kf, per_head in sorted(slot.items()):
                for head, mass in enumerate(per_head):
                    rows.append({"layer": layer, "head": head, "query_frame": qf,
                                 "context_frame": kf, "mass": float(mass / total)})
        return AttnStats(rows=rows)


@dataclass
class AttnStats:
    rows: list[dict] = field(default_factory=list)

    def row_sum(self, layer: int, head: int, query_frame: int) -> float:
        return sum(r["mass"] for r in self.rows
                   if r["layer"] == layer and r["head"] == head and r["query_frame"] == query_frame)

    def frame_mass(self, context_frame: int) -> float:
        """Mean attention mass a context frame receives across all rows that saw it."""
        vals = [r["mass"] for r in self.rows if r["context_frame"] == context_frame]
        return float(np.mean(vals)) if vals else 0.0

    def rank_frames(self) -> list[tuple[int, float]]:
        frames = sorted({r["context_frame"] for r in self.rows})
        ranked = sorted(((f, self.frame_mass(f)) for f in frames), key=lambda kv: -kv[1])
        return ranked

    def csv_rows(self) -> list[dict]:
        return [{**r, "mass": f"{r['mass']:.8f}"} for r in self.rows]


def attn_sink_stats(model: Denoiser, n_chunks: int, seed: int, cond=None,
                    shift: float = 7.0, mode: str = "no_agsw") -> AttnStats:
    """Attention-mass statistics from a live full-history run."""
    if MODE_POLICY.get(mode) != "full_history":
        raise ContractError(
            f"attention statistics need a full_history mode so every frame is attendable; got {mode!r}")
    agg = AttentionAggregator()
    req = GenerationRequest(mode=mode, n_chunks=n_chunks, seed=seed, cond=cond,
                            shift=shift, attn_recorder=agg)
    generate(model, req)
    return agg.finalize()


# -- frame-drop ablation -------------------------------------------------------

MASK_NAMES = ("keep_all", "drop_anchor", "drop_mid", "only_anchor", "agsw_equiv")


def make_mask_policy(name: str, chunk_frames: int):
    """A retention-mask policy: generated frame list -> frames to keep."""
    m = chunk_frames

    def policy(frames: list[int]) -> set[int]:
        frames = sorted(frames)
        if name == "keep_all":
            return set(frames)
        if name == "drop_anchor":
            return set(frames[1:])
        if name == "only_anchor":
            return set(frames[:1])
        if name == "agsw_equiv":
            return set(frames[:1]) | set(frames[-(m - 1):] if frames else [])
        if name == "drop_mid":
            interior = frames[1 : len(frames) - (m - 1)] if len(frames) > m else []
            if not interior:
                return set(frames)
            return set(frames) - {interior[len(interior) // 2]}
        raise ConfigError(f"unknown mask name {name!r}; expected one of {MASK_NAMES}")

    if name not in MASK_NAMES:
        raise ConfigError(f"unknown mask name {name!r}; expected one of {MASK_NAMES}")
    return policy


def frame_drop_ablation(model: Denoiser, seed: int, masks: list[str], n_chunks: int,
                        cond=None, shift: float = 7.0):
    """Per-chunk MSE deviation from the full-history baseline for each mask."""
    base = generate(model, GenerationRequest(mode="no_agsw", n_chunks=n_chunks,
                                             seed=seed, cond=cond, shift=shift))
    rows = []
    results = {}
    for name in masks:
        policy = make_mask_policy(name, model.cfg.chunk_frames)
        run = generate(model, GenerationRequest(mode="no_agsw", n_chunks=n_chunks,
                                                seed=seed, cond=cond, shift=shift,
                                                mask_policy=policy))
        results[name] = run
        for ci, (a, b) in enumerate(zip(run.chunks, base.chunks), start=1):
            mse = float(np.mean((a.frames.astype(np.float64) - b.frames.astype(np.float64)) ** 2))
            rows.append({"mask_id": name, "chunk": ci, "mse": mse})
    return rows, base, results


# -- benchmark harness ----------------------------------------------------------


@dataclass
class BenchResult:
    reports: dict  # mode -> RunReport with per-chunk median latency
    rows: list[dict]
    table: str


def bench(model: Denoiser, modes: list[str], n_chunks: int, repeats: int, seed: int,
          cond=None, shift: float = 7.0) -> BenchResult:
    """Median-of-repeats per-chunk latency per mode, plus speedup ratios."""
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    for mode in modes:
        if mode not in MODE_POLICY:
            raise ConfigError(f"unknown mode {mode!r}")
    # warm up allocators and BLAS before anything is timed
    generate(model, GenerationRequest(mode=modes[0], n_chunks=min(2, n_chunks), seed=seed,
                                      cond=cond, shift=shift))
    reports = {}
    for mode in modes:
        runs = [generate(model, GenerationRequest(mode=mode, n_chunks=n_chunks, seed=seed,
                                                  cond=cond, shift=shift))
                for _ in range(repeats)]
        first = runs[0].report
        for other in runs[1:]:
            for a, b in zip(first.chunks, other.report.chunks):
                if (a.forwards_low, a.forwards_high, a.flops) != (b.forwards_low, b.forwards_high, b.flops):
                    raise ContractError("forward/FLOP counters differ across repeats")
        merged = RunReport(mode=mode, config_hash=first.config_hash,
                           chunk_frames=first.chunk_frames)
        for ci, stat in enumerate(first.chunks):
            lat = statistics.median(r.report.chunks[ci].latency_s for r in runs)
            merged.chunks.append(ChunkStats(stat.chunk, lat, stat.forwards_low,
                                            stat.forwards_high, stat.flops, stat.cache_bytes))
        reports[mode] = merged

    baseline = reports.get("baseline_full", reports[modes[0]])
    header = (f"{'mode':>16} {'forwards':>9} {'flops':>16} {'latency_s':>10} "
              f"{'s_per_frame':>12} {'speedup':>8} {'flop_ratio':>10}")
    lines = [header]
    for mode in modes:
        rep = reports[mode]
        speed = baseline.per_frame_latency_s() / rep.per_frame_latency_s() if rep.per_frame_latency_s() else float("nan")
        fratio = baseline.total_flops / rep.total_flops if rep.total_flops else float("nan")
        lines.append(f"{mode:>16} {rep.total_forwards:>9} {rep.total_flops:>16} "
                     f"{rep.total_latency_s:>10.4f} {rep.per_frame_latency_s():>12.6f} "
                     f"{speed:>8.2f} {fratio:>10.2f}")
    rows = []
    for mode in modes:
        rows.extend(reports[mode].csv_rows())
    return BenchResult(reports=reports, rows=rows, table="\n".join(lines))
