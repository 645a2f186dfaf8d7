"""Feature-ladder machinery: configs, cumulative training, scoring."""
import pytest
import torch

from conftest import seeded_frames, small_config
from dgvc.ablation import (LADDER, AblationReport, DualPathStats,
                           SequenceCost, dual_path_stats, ladder_config,
                           run_ablation, sequence_cost, train_ladder)
from dgvc.core import InvalidInputError
from dgvc.model import CodecModel
from dgvc.synthetic import make_training_clips
from dgvc.training import TrainPlan


class TestLadderConfig:
    def test_rungs_enable_features_cumulatively(self):
        base = small_config()
        flags = {rung: (c.use_mv_prediction, c.use_mc_enhancement,
                        c.use_quality_enhancement)
                 for rung in LADDER
                 for c in [ladder_config(base, rung)]}
        assert flags["baseline"] == (True, False, False)
        assert flags["+mc"] == (True, True, False)
        assert flags["+pqe"] == (True, True, True)
        assert flags["+joint"] == (True, True, True)

    def test_unrelated_settings_survive(self):
        base = small_config(gop_size=7)
        assert ladder_config(base, "+mc").gop_size == 7

    def test_unknown_rung_rejected(self):
        with pytest.raises(KeyError):
            ladder_config(small_config(), "+magic")


class TestTrainLadder:
    def test_weights_carry_forward_and_stay_put(self):
        clips = make_training_clips(2, 4, 48, 48, seed=0)
        plan = TrainPlan(batch_size=2, crop_size=32, desk_scale=600_000)
        snapshots = train_ladder(small_config(), plan, clips, seed=0)
        assert list(snapshots) == list(LADDER)
        base, mc, pqe, joint = (snapshots[r] for r in LADDER)
        # motion-vector coding is only trained on the first rung
        for a, b in ((base, mc), (mc, pqe), (pqe, joint)):
            for (n, pa), (_, pb) in zip(a.mv_codec.named_parameters(),
                                        b.mv_codec.named_parameters()):
                if a is pqe:   # +joint retrains everything
                    continue
                assert torch.equal(pa, pb), f"mv_codec.{n} drifted"
        # the +mc rung must actually move the compensation enhancer
        changed = any(not torch.equal(pa, pb) for (_, pa), (_, pb) in zip(
            base.mc_enhancer.named_parameters(),
            mc.mc_enhancer.named_parameters()))
        assert changed
        # rungs carry the cumulative feature switches
        assert not base.config.use_mc_enhancement
        assert mc.config.use_mc_enhancement
        assert not mc.config.use_quality_enhancement
        assert pqe.config.use_quality_enhancement


class TestSequenceCost:
    def test_j_cost_is_lagrangian_of_real_encode(self, tiny_model):
        from dgvc.metrics import mse as frame_mse
        from dgvc.pipeline import encode_sequence

        frames = seeded_frames(4, 24, 36, seed=2)
        cost = sequence_cost(tiny_model, [frames], lmbda=100.0)
        result = encode_sequence(frames, tiny_model)
        mean_mse = sum(frame_mse(s, r) for s, r in
                       zip(frames, result.recon_frames)) / len(frames)
        bpf = result.container.payload_bytes * 8 / len(frames)
        assert cost.mean_mse == pytest.approx(mean_mse, rel=1e-9)
        assert cost.bits_per_frame == pytest.approx(bpf, rel=1e-9)
        assert cost.j_cost == pytest.approx(100.0 * mean_mse + bpf, rel=1e-9)
        assert cost.psnr_db > 0


class TestDualPathStats:
    def test_threshold_properties(self):
        stats = DualPathStats(psnr_input=30.0, psnr_structure=31.0,
                              psnr_texture=31.5, psnr_fused=31.46)
        assert stats.fused_beats_paths          # within the 0.05 dB margin
        assert stats.both_paths_improve
        worse = DualPathStats(30.0, 31.0, 31.5, 31.44)
        assert not worse.fused_beats_paths
        degraded = DualPathStats(30.0, 29.9, 31.5, 31.5)
        assert not degraded.both_paths_improve

    def test_measured_on_real_decoded_motion(self, tiny_model):
        frames = seeded_frames(3, 32, 32, seed=4)
        stats = dual_path_stats(tiny_model, [frames])
        for value in (stats.psnr_input, stats.psnr_structure,
                      stats.psnr_texture, stats.psnr_fused):
            assert 0 < value < 99

    def test_rejects_unaligned_dims(self, tiny_model):
        with pytest.raises(InvalidInputError):
            dual_path_stats(tiny_model, [seeded_frames(3, 24, 36, seed=4)])

    def test_rejects_empty_input(self, tiny_model):
        with pytest.raises(InvalidInputError):
            dual_path_stats(tiny_model, [])


class TestAblationReport:
    def make_report(self, means):
        costs = {rung: {0: SequenceCost(means[rung], 0.0, 0.0, 0.0)}
                 for rung in LADDER}
        dual = DualPathStats(30.0, 31.0, 31.0, 31.0)
        return AblationReport(costs, dict(means), dual, (0,))

    def test_strict_improvements_ordering(self):
        report = self.make_report({"baseline": 100.0, "+mc": 90.0,
                                   "+pqe": 85.0, "+joint": 80.0})
        steps = report.strict_improvements()
        assert [s[:2] for s in steps] == [("baseline", "+mc"),
                                          ("+mc", "+pqe"),
                                          ("+pqe", "+joint")]
        assert report.trend_holds

    def test_trend_breaks_on_any_regression(self):
        report = self.make_report({"baseline": 100.0, "+mc": 90.0,
                                   "+pqe": 90.0, "+joint": 80.0})
        assert not report.trend_holds   # ties are not improvements

    def test_needs_three_seeds(self):
        clips = make_training_clips(2, 4, 48, 48, seed=0)
        plan = TrainPlan(batch_size=2, crop_size=32, desk_scale=600_000)
        with pytest.raises(InvalidInputError):
            run_ablation(small_config(), plan, (0, 1), clips, clips)
