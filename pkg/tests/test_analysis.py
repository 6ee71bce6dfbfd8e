"""FLOP accounting, attention aggregation, frame-drop ablation, bench harness."""

import numpy as np
import pytest

from conftest import small_config
from histream.analysis import (AttentionAggregator, analytic_flops, attention_score_flops,
                               attn_sink_stats, bench, frame_drop_ablation, forward_flops,
                               make_mask_policy)
from histream.engine import MODE_POLICY, GenerationRequest, generate
from histream.errors import ConfigError, ContractError
from histream.model import Denoiser
from histream.report import CSV_FIELDS
from histream.schedule import MODES, make_plan


@pytest.fixture(scope="module")
def model():
    return Denoiser.init(small_config(), seed=202)


class TestAnalyticFlops:
    @pytest.mark.parametrize("mode", MODES)
    def test_matches_instrumented_counter_exactly(self, model, mode):
        n = 3
        plan = make_plan(mode, n, 7.0)
        expected = analytic_flops(model.cfg, plan, MODE_POLICY[mode])
        result = generate(model, GenerationRequest(mode=mode, n_chunks=n, seed=5))
        got = [c.flops for c in result.report.chunks]
        assert got == expected

    def test_low_res_step_is_sixteenth_of_high(self, model):
        for ctx_frames in (0, 3):
            low = attention_score_flops(model.cfg, "low", ctx_frames)
            high = attention_score_flops(model.cfg, "high", ctx_frames)
            assert high == 16 * low

    def test_steady_state_per_chunk_constant_under_agsw(self, model):
        plan = make_plan("histream", 6, 7.0)
        per_chunk = analytic_flops(model.cfg, plan, "agsw")
        assert len(set(per_chunk[1:])) == 1
        # chunk 1 denoises with an empty context, so it costs less
        assert per_chunk[0] < per_chunk[1]
        # totals are additive in the steady-state constant
        plan12 = make_plan("histream", 12, 7.0)
        total12 = sum(analytic_flops(model.cfg, plan12, "agsw"))
        assert total12 == sum(per_chunk) + 6 * per_chunk[1]

    def test_full_history_flops_strictly_increase(self, model):
        plan = make_plan("baseline_full", 5, 7.0)
        per_chunk = analytic_flops(model.cfg, plan, "full_history")
        assert all(b > a for a, b in zip(per_chunk, per_chunk[1:]))

    def test_mode_ordering_at_n7(self, model):
        cfg = model.cfg
        totals = {}
        for mode in ("histream_plus", "histream", "no_drc", "baseline_full"):
            plan = make_plan(mode, 7, 7.0)
            totals[mode] = sum(analytic_flops(cfg, plan, MODE_POLICY[mode]))
        assert totals["histream_plus"] < totals["histream"]
        assert totals["histream"] < totals["no_drc"]
        assert totals["no_drc"] < totals["baseline_full"]

    def test_no_drc_equals_baseline_at_n2(self, model):
        """AGSW context for chunk 2 equals full history, so the two all-high
        modes cost the same until a third chunk exists."""
        cfg = model.cfg
        a = sum(analytic_flops(cfg, make_plan("no_drc", 2, 7.0), "agsw"))
        b = sum(analytic_flops(cfg, make_plan("baseline_full", 2, 7.0), "full_history"))
        assert a == b

    def test_default_config_single_step_instrumented(self):
        """One empty-context low step at the default toy config (M=3, 8x8,
        d_model=128, 4 layers) hits the closed form exactly."""
        from histream.model import ConditionVector, FlopCounter, LatentChunk, ModelConfig
        from histream.rng import Rng

        cfg = ModelConfig()
        toy = Denoiser.init(cfg, seed=1)
        frames = Rng(2).substream("x").standard_normal((3, 4, 8, 8))
        counter = FlopCounter()
        toy.forward(LatentChunk(frames, "low", 0), 0.5,
                    ConditionVector.zeros(cfg.d_cond), flops=counter)
        assert counter.total == forward_flops(cfg, 192, 0, with_head=True)

    def test_forward_flops_head_term(self, model):
        cfg = model.cfg
        with_head = forward_flops(cfg, 48, 0, with_head=True)
        without = forward_flops(cfg, 48, 0, with_head=False)
        assert with_head - without == 2 * cfg.d_model * 2 * cfg.d_model + 2 * 48 * cfg.d_model * cfg.latent_channels


class TestAttentionAggregation:
    def test_all_mass_on_frame_zero(self):
        agg = AttentionAggregator()
        p = 2
        probs = np.zeros((1, 2, 4), dtype=np.float32)
        probs[:, :, 0] = 0.5
        probs[:, :, 1] = 0.5  # both tokens of frame 0
        agg.record(0, probs, q_frames=(3,), kv_frames=(0, 3), tokens_per_frame=p)
        stats = agg.finalize()
        assert stats.frame_mass(0) == pytest.approx(1.0, abs=1e-12)
        assert stats.frame_mass(3) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_attention_equal_masses(self):
        agg = AttentionAggregator()
        p = 4
        nk = 3
        probs = np.full((2, p, nk * p), 1.0 / (nk * p), dtype=np.float32)
        agg.record(1, probs, q_frames=(6,), kv_frames=(0, 5, 6), tokens_per_frame=p)
        stats = agg.finalize()
        for f in (0, 5, 6):
            assert stats.frame_mass(f) == pytest.approx(1.0 / nk, abs=1e-6)

    def test_rows_sum_to_one(self):
        agg = AttentionAggregator()
        p = 3
        rng = np.random.default_rng(0)
        raw = rng.random((2, 2 * p, 3 * p))
        probs = raw / raw.sum(axis=-1, keepdims=True)
        agg.record(0, probs.astype(np.float32), q_frames=(4, 5), kv_frames=(0, 4, 5), tokens_per_frame=p)
        stats = agg.finalize()
        for head in (0, 1):
            for qf in (4, 5):
                assert stats.row_sum(0, head, qf) == pytest.approx(1.0, abs=1e-5)

    def test_extent_mismatch_rejected(self):
        agg = AttentionAggregator()
        with pytest.raises(ContractError):
            agg.record(0, np.zeros((1, 3, 4), dtype=np.float32), (0,), (0, 1), 2)


class TestAttnSinkStats:
    def test_live_run_rows_are_probabilities(self, model):
        stats = attn_sink_stats(model, n_chunks=3, seed=9)
        layers = {r["layer"] for r in stats.rows}
        assert layers == set(range(model.cfg.n_layers))
        for layer in layers:
            for head in range(model.cfg.n_heads):
                for qf in range(3 * model.cfg.chunk_frames):
                    s = stats.row_sum(layer, head, qf)
                    assert s == pytest.approx(1.0, abs=1e-5)

    def test_rank_covers_all_frames(self, model):
        stats = attn_sink_stats(model, n_chunks=2, seed=9)
        ranked = dict(stats.rank_frames())
        assert set(ranked) == set(range(2 * model.cfg.chunk_frames))

    def test_agsw_mode_rejected(self, model):
        with pytest.raises(ContractError):
            attn_sink_stats(model, n_chunks=2, seed=9, mode="histream")


class TestFrameDrop:
    def test_keep_all_zero_deviation(self, model):
        rows, _base, _runs = frame_drop_ablation(model, seed=4, masks=["keep_all"], n_chunks=3)
        assert all(r["mse"] == 0.0 for r in rows)

    def test_agsw_equiv_mask_reproduces_agsw_outputs(self, model):
        """anchor + last (M-1) masking of full history IS the sliding window."""
        _rows, _base, runs = frame_drop_ablation(model, seed=4, masks=["agsw_equiv"], n_chunks=4)
        masked = runs["agsw_equiv"]
        agsw = generate(model, GenerationRequest(mode="no_agsw", n_chunks=4, seed=4))
        # compare against the true sliding-window mode
        sliding = generate(model, GenerationRequest(mode="histream", n_chunks=4, seed=4))
        for ci in range(2, 4):  # from chunk 3 onward (0-based index 2)
            assert np.array_equal(masked.chunks[ci].frames, sliding.chunks[ci].frames)
        assert not np.array_equal(agsw.chunks[3].frames, sliding.chunks[3].frames)

    def test_drop_anchor_differs_from_baseline(self, model):
        rows, _b, _r = frame_drop_ablation(model, seed=4, masks=["drop_anchor", "drop_mid"], n_chunks=3)
        by_mask = {}
        for r in rows:
            by_mask.setdefault(r["mask_id"], []).append(r["mse"])
        # chunk 1 has no context: all masks agree there
        assert by_mask["drop_anchor"][0] == 0.0
        assert any(m > 0 for m in by_mask["drop_anchor"][1:])

    def test_unknown_mask_rejected(self, model):
        with pytest.raises(ConfigError):
            make_mask_policy("drop_everything", 3)

    def test_mask_policies(self):
        frames = list(range(9))
        assert make_mask_policy("keep_all", 3)(frames) == set(range(9))
        assert make_mask_policy("drop_anchor", 3)(frames) == set(range(1, 9))
        assert make_mask_policy("only_anchor", 3)(frames) == {0}
        assert make_mask_policy("agsw_equiv", 3)(frames) == {0, 7, 8}
        dropped = set(frames) - make_mask_policy("drop_mid", 3)(frames)
        assert len(dropped) == 1 and dropped.pop() in range(1, 7)


class TestBench:
    def test_counters_stable_and_csv_schema(self, model):
        result = bench(model, ["histream", "histream_plus"], n_chunks=3, repeats=2, seed=3)
        assert set(result.reports) == {"histream", "histream_plus"}
        assert result.rows and set(result.rows[0]) == set(CSV_FIELDS)
        assert result.reports["histream"].total_forwards == 12
        assert result.reports["histream_plus"].total_forwards == 8

    def test_flops_match_analytic(self, model):
        result = bench(model, ["naive_two_step"], n_chunks=3, repeats=1, seed=3)
        plan = make_plan("naive_two_step", 3, 7.0)
        expected = analytic_flops(model.cfg, plan, "agsw")
        got = [c.flops for c in result.reports["naive_two_step"].chunks]
        assert got == expected

    def test_table_has_speedup_columns(self, model):
        result = bench(model, ["baseline_full", "histream"], n_chunks=2, repeats=1, seed=3)
        assert "speedup" in result.table and "flop_ratio" in result.table
        assert "baseline_full" in result.table and "histream" in result.table

    def test_unknown_mode_rejected(self, model):
        with pytest.raises(ConfigError):
            bench(model, ["hyperspeed"], n_chunks=2, repeats=1, seed=3)
