"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. The heavy fixtures (32-chunk latency runs, 500-step training) are
session-scoped and shared across criteria; the whole module takes on the
order of 10-15 minutes on a laptop CPU at the default toy configuration.
"""

import statistics
import time

import numpy as np
import pytest

from conftest import micro_config
from test_training import _grad_check
from histream.analysis import (analytic_flops, attention_score_flops, frame_drop_ablation)
from histream.cache import DualKVCache
from histream.engine import MODE_POLICY, GenerationRequest, generate
from histream.model import ConditionVector, Denoiser, LatentChunk, ModelConfig
from histream.numerics import downsample_avg2
from histream.rng import Rng
from histream.rope import ntk_rescaled_base, rope_rotate, RopeConfig
from histream.schedule import MODES, make_plan, renoise_psi, shift_timestep
from histream.training import (SyntheticVideoSpec, TrainConfig, eps_loss, fm_loss,
                               synth_chunk, train)

SEED = 2024
LATENCY_CHUNKS = 32
HIST_REPEATS = 5  # medians over 5 runs absorb this host's scheduler jitter
FULL_HISTORY_CHUNKS = 16  # growth-ordering leg; relative growth per chunk stays >=7%
FULL_HISTORY_REPEATS = 3


def report(num: int, name: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f"  [{detail}]" if detail else ""
    print(f"[ACCEPTANCE] criterion {num:2d} ({name}): {status}{suffix}")
    assert ok, f"criterion {num} ({name}) failed: {detail}"


@pytest.fixture(scope="session")
def toy_model():
    return Denoiser.init(ModelConfig(), seed=SEED)


@pytest.fixture(scope="session")
def runs_n7(toy_model):
    modes = ("histream", "histream_plus", "naive_two_step", "no_drc", "baseline_full")
    return {m: generate(toy_model, GenerationRequest(mode=m, n_chunks=7, seed=SEED))
            for m in modes}


@pytest.fixture(scope="session")
def latency_runs(toy_model):
    """Warmed-up latency measurements.

    histream: 32 chunks, HIST_REPEATS repeats (flatness over per-chunk medians,
    the bench statistic). no_agsw: one 32-chunk run for the cache-byte series,
    plus FULL_HISTORY_REPEATS shorter runs for the latency-growth ordering.
    """
    # one discarded full-size run warms the allocator and BLAS kernels
    generate(toy_model, GenerationRequest(mode="histream", n_chunks=LATENCY_CHUNKS, seed=SEED))
    hist = [generate(toy_model, GenerationRequest(mode="histream", n_chunks=LATENCY_CHUNKS, seed=SEED))
            for _ in range(HIST_REPEATS)]
    full32 = generate(toy_model, GenerationRequest(mode="no_agsw", n_chunks=LATENCY_CHUNKS, seed=SEED))
    full_reps = [generate(toy_model, GenerationRequest(mode="no_agsw", n_chunks=FULL_HISTORY_CHUNKS, seed=SEED))
                 for _ in range(FULL_HISTORY_REPEATS)]
    return hist, full32, full_reps


@pytest.fixture(scope="session")
def trained():
    model = Denoiser.init(ModelConfig(), seed=SEED)
    tcfg = TrainConfig(steps=500, batch=2, lr=1e-3, loss="fm", shift=5.0, high_res_every=8)
    result = train(model, tcfg, SyntheticVideoSpec(), seed=SEED)
    return model, result, tcfg


def test_c01_chunk2_agsw_exactness(toy_model):
    """AGSW's retained set after chunk 1 equals full history, bit for bit."""
    a = generate(toy_model, GenerationRequest(mode="histream", n_chunks=2, seed=SEED))
    b = generate(toy_model, GenerationRequest(mode="no_agsw", n_chunks=2, seed=SEED))
    ok = all(np.array_equal(ca.frames, cb.frames) for ca, cb in zip(a.chunks, b.chunks))
    report(1, "chunk-2 AGSW exactness", ok, "bit-identical outputs, tolerance 0")


def test_c02_constant_cache_memory(latency_runs):
    hist, full32, _full_reps = latency_runs
    agsw_sizes = {c.cache_bytes for r in hist for c in r.report.chunks}
    full_sizes = [c.cache_bytes for c in full32.report.chunks]
    ok = len(agsw_sizes) == 1 and all(b > a for a, b in zip(full_sizes, full_sizes[1:]))
    report(2, "constant cache memory", ok,
           f"agsw bytes constant at {agsw_sizes} over {LATENCY_CHUNKS} chunks; "
           f"full history grows {full_sizes[0]} -> {full_sizes[-1]}")


def test_c03_flat_latency(latency_runs):
    hist, _full32, full_reps = latency_runs
    medians = [statistics.median(r.report.chunks[i].latency_s for r in hist)
               for i in range(LATENCY_CHUNKS)]
    tail = medians[1:]
    variation = (max(tail) - min(tail)) / statistics.median(tail)
    # per-chunk minimum over repeats: scheduler noise only ever adds delay, so
    # the minimum estimates the true cost, whose growth is what the ordering
    # claim is about
    full_lat = [min(r.report.chunks[i].latency_s for r in full_reps)
                for i in range(FULL_HISTORY_CHUNKS)]
    nondecreasing = all(b >= a for a, b in zip(full_lat, full_lat[1:]))
    ok = variation < 0.20 and nondecreasing
    report(3, "flat per-chunk latency", ok,
           f"histream chunks 2..{LATENCY_CHUNKS} vary {100 * variation:.1f}% (<20%); "
           f"no_agsw series {'non-decreasing' if nondecreasing else 'NOT monotone'} "
           f"({full_lat[0]:.2f}s -> {full_lat[-1]:.2f}s over {FULL_HISTORY_CHUNKS} chunks)")


def test_c04_asymmetric_step_accounting(runs_n7):
    counts = {m: runs_n7[m].report.total_forwards for m in ("histream", "histream_plus", "naive_two_step")}
    ok = counts == {"histream": 28, "histream_plus": 16, "naive_two_step": 14}
    report(4, "asymmetric step accounting", ok, f"forwards at n=7: {counts}")


def test_c05_flop_ordering_and_drc_ratio(toy_model, runs_n7):
    cfg = toy_model.cfg
    totals = {}
    exact = True
    for mode, result in runs_n7.items():
        expected = analytic_flops(cfg, make_plan(mode, 7, 7.0), MODE_POLICY[mode])
        got = [c.flops for c in result.report.chunks]
        exact = exact and got == expected
        totals[mode] = sum(got)
    ordering = (totals["histream_plus"] < totals["histream"]
                < totals["no_drc"] < totals["baseline_full"])
    ratio = all(attention_score_flops(cfg, "high", ctx) == 16 * attention_score_flops(cfg, "low", ctx)
                for ctx in (0, cfg.chunk_frames))
    ok = exact and ordering and ratio
    report(5, "FLOP ordering and DRC ratio", ok,
           f"instrumented==analytic: {exact}; ordering: {ordering}; low step = 1/16 high step: {ratio}")


def test_c06_dual_cache_consistency(toy_model):
    """Replay oracle: every retained KV_low entry equals forward_kv of the
    downsampled final chunk under the low context at its write time."""
    res = generate(toy_model, GenerationRequest(mode="histream", n_chunks=4, seed=SEED))
    replay = DualKVCache(toy_model.cfg.n_layers, policy="agsw")
    for ci, chunk in enumerate(res.chunks, start=1):
        kv_high = toy_model.forward_kv(chunk, replay.context_for("high"))
        low_chunk = LatentChunk(downsample_avg2(chunk.frames), "low", chunk.start_frame)
        kv_low = toy_model.forward_kv(low_chunk, replay.context_for("low"))
        replay.update_after_chunk(kv_low, kv_high, ci)
    worst = 0.0
    ok = replay.retained == res.cache.retained
    for mine, theirs in zip(replay.low, res.cache.low):
        ok = ok and mine.frame_indices == theirs.frame_indices
        worst = max(worst, float(np.max(np.abs(mine.k - theirs.k))),
                    float(np.max(np.abs(mine.v - theirs.v))))
    ok = ok and worst <= 1e-6
    report(6, "dual-cache consistency oracle", ok, f"max |replay - cache| = {worst:.2e} <= 1e-6")


def test_c07_gradient_checks():
    cfg = micro_config()
    fm_rel, _, _, _ = _grad_check(fm_loss, cfg, h=1e-4)
    eps_rel, _, _, _ = _grad_check(eps_loss, cfg, h=1e-5)
    ok = fm_rel < 1e-3 and eps_rel < 1e-3
    report(7, "gradient checks", ok,
           f"max rel err vs f64 central differences: fm {fm_rel:.2e}, eps {eps_rel:.2e} (<1e-3)")


def test_c08_toy_training_converges(trained):
    model, result, tcfg = trained
    halved = result.ema[-1] <= 0.5 * result.ema[0]

    # determinism probe on a short prefix of the same configuration
    probe_cfg = TrainConfig(steps=5, batch=tcfg.batch, lr=tcfg.lr, loss=tcfg.loss,
                            shift=tcfg.shift, high_res_every=tcfg.high_res_every)
    r1 = train(Denoiser.init(ModelConfig(), seed=SEED), probe_cfg, SyntheticVideoSpec(), seed=SEED)
    r2 = train(Denoiser.init(ModelConfig(), seed=SEED), probe_cfg, SyntheticVideoSpec(), seed=SEED)
    deterministic = r1.losses == r2.losses

    # report-only: clean-input reconstruction at t=0 after training
    chunk, cond = synth_chunk(SyntheticVideoSpec(), seed=SEED + 1, chunk_index=0,
                              chunk_frames=model.cfg.chunk_frames, d_cond=model.cfg.d_cond)
    out = model.forward(chunk, 0.0, cond)
    rel = float(np.linalg.norm(out.frames - chunk.frames) / np.linalg.norm(chunk.frames))
    ok = halved and deterministic
    report(8, "toy training converges", ok,
           f"EMA {result.ema[0]:.4f} -> {result.ema[-1]:.4f} "
           f"({100 * result.ema[-1] / result.ema[0]:.1f}% of initial, need <=50%); "
           f"deterministic: {deterministic}; t=0 clean-input residual {rel:.3f} (reported)")


def test_c09_prefix_stability(toy_model):
    failures = []
    for mode in MODES:
        results = {n: generate(toy_model, GenerationRequest(mode=mode, n_chunks=n, seed=SEED))
                   for n in (1, 2, 3, 4, 5)}
        for k in (1, 2, 4):
            shorter, longer = results[k], results[k + 1]
            for ca, cb in zip(shorter.chunks, longer.chunks[:k]):
                if not np.array_equal(ca.frames, cb.frames):
                    failures.append((mode, k))
                    break
    ok = not failures
    report(9, "prefix stability", ok,
           "bit-exact prefixes for k in {1,2,4} under all six modes" if ok else f"failures: {failures}")


def test_c10_sampler_positional_unit_properties():
    x0 = Rng(SEED).substream("x").standard_normal((3, 4, 8, 8))
    eps = Rng(SEED).substream("e").standard_normal((3, 4, 8, 8))
    psi_exact = (np.array_equal(renoise_psi(x0, eps, 0.0), x0)
                 and np.array_equal(renoise_psi(x0, eps, 1.0), eps))
    shift_ok = (shift_timestep(0.0, 7.0) == 0.0 and shift_timestep(1.0, 7.0) == 1.0
                and abs(shift_timestep(0.5, 5.0) - 0.8333333333333334) <= 1e-6)
    ntk_ok = ntk_rescaled_base(10000.0, 1.0, 12) == 10000.0

    cfg = RopeConfig.default(32)
    rng = Rng(SEED + 1)
    rope_ok = True
    for trial in range(20):
        q = rng.substream("q", trial).standard_normal((32,))
        k = rng.substream("k", trial).standard_normal((32,))
        q, k = q / np.linalg.norm(q), k / np.linalg.norm(k)
        u = rng.substream("u", trial).uniform(7)
        p1 = np.array([int(x * 64) for x in u[:3]])
        p2 = np.array([int(x * 64) for x in u[3:6]])
        delta = np.zeros(3, dtype=int)
        delta[trial % 3] = int(u[6] * 64)
        d1 = float(np.dot(rope_rotate(q, tuple(p1), cfg), rope_rotate(k, tuple(p2), cfg)))
        d2 = float(np.dot(rope_rotate(q, tuple(p1 + delta), cfg), rope_rotate(k, tuple(p2 + delta), cfg)))
        rope_ok = rope_ok and abs(d1 - d2) <= 1e-5
    ok = psi_exact and shift_ok and ntk_ok and rope_ok
    report(10, "sampler/positional unit properties", ok,
           f"psi endpoints exact: {psi_exact}; shift fixpoints/value: {shift_ok}; "
           f"ntk scale-1 exact: {ntk_ok}; rope relative-position <=1e-5: {rope_ok}")


def test_c11_frame_drop_harness(trained):
    model, _result, _tcfg = trained
    rows, _base, runs = frame_drop_ablation(
        model, seed=SEED, masks=["keep_all", "agsw_equiv", "drop_anchor", "drop_mid"], n_chunks=4)
    by_mask = {}
    for r in rows:
        by_mask.setdefault(r["mask_id"], []).append(r["mse"])

    keep_all_zero = all(m == 0.0 for m in by_mask["keep_all"])
    sliding = generate(model, GenerationRequest(mode="histream", n_chunks=4, seed=SEED))
    agsw_equiv_exact = all(
        np.array_equal(runs["agsw_equiv"].chunks[ci].frames, sliding.chunks[ci].frames)
        for ci in range(2, 4))

    anchor_dev = sum(by_mask["drop_anchor"][1:])
    mid_dev = sum(by_mask["drop_mid"][1:])
    ordering_matches_expectation = anchor_dev > mid_dev  # logged, not asserted
    ok = keep_all_zero and agsw_equiv_exact
    report(11, "frame-drop harness sanity", ok,
           f"keep_all deviation 0: {keep_all_zero}; agsw-equivalent mask bit-exact from chunk 3: "
           f"{agsw_equiv_exact}; drop-anchor dev {anchor_dev:.5f} vs drop-intermediate {mid_dev:.5f} "
           f"(anchor>intermediate as the sink picture predicts: {ordering_matches_expectation}, reported only)")
