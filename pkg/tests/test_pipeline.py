"""GOP planning, sequence coding, decoder/encoder agreement."""
import pytest
import torch

from conftest import seeded_frames, small_config
from dgvc.container import BitstreamContainer, FrameType
from dgvc.core import (CheckpointMismatchError, CorruptStreamError, Frame,
                       InvalidInputError)
from dgvc.model import CodecModel
from dgvc.pipeline import (GopPlan, decode_sequence, encode_sequence,
                           feature_flags_bits, features_from_bits,
                           quality_enhance)


class TestGopPlan:
    def test_sixteen_frame_span_order_is_canonical(self):
        plan = GopPlan.build(16, 15)
        assert plan.coding_order() == [0, 15, 1, 2, 3, 4, 5, 6, 7,
                                       14, 13, 12, 11, 10, 9, 8]

    def test_span_frame_types(self):
        plan = GopPlan.build(16, 15)
        types = {e.display_index: e.frame_type for e in plan.entries}
        assert types[0] == types[15] == FrameType.INTRA
        for d in range(1, 8):
            assert types[d] == FrameType.P_FORWARD
        for d in range(8, 15):
            assert types[d] == FrameType.P_BACKWARD

    def test_references_chain_toward_nearest_intra(self):
        plan = GopPlan.build(16, 15)
        refs = {e.display_index: e.ref_display for e in plan.entries}
        assert refs[0] is None and refs[15] is None
        assert refs[1] == 0 and refs[7] == 6
        assert refs[14] == 15 and refs[8] == 9

    def test_every_length_passes_reference_check(self):
        for n in range(1, 65):
            plan = GopPlan.build(n, 15)
            plan.check_references()
            assert sorted(plan.coding_order()) == list(range(n))

    def test_shared_closing_intra_coded_once(self):
        plan = GopPlan.build(31, 15)   # spans [0..15] and [15..30]
        order = plan.coding_order()
        assert order.count(15) == 1
        intra = [e.display_index for e in plan.entries
                 if e.frame_type == FrameType.INTRA]
        assert intra == [0, 15, 30]

    def test_trailing_partial_gop_is_all_forward(self):
        plan = GopPlan.build(20, 15)   # 16-frame span + frames 16..19
        tail = [e for e in plan.entries if e.display_index >= 16]
        assert [e.display_index for e in tail] == [16, 17, 18, 19]
        assert all(e.frame_type == FrameType.P_FORWARD for e in tail)
        assert all(e.ref_display == e.display_index - 1 for e in tail)
        assert all(e.span_start == 15 for e in tail)

    def test_short_sequence_has_single_intra(self):
        plan = GopPlan.build(5, 15)
        types = [e.frame_type for e in plan.entries]
        assert types[0] == FrameType.INTRA
        assert all(t == FrameType.P_FORWARD for t in types[1:])

    def test_single_frame(self):
        plan = GopPlan.build(1, 15)
        assert plan.coding_order() == [0]

    def test_rejects_degenerate_sizes(self):
        with pytest.raises(InvalidInputError):
            GopPlan.build(0, 15)
        with pytest.raises(InvalidInputError):
            GopPlan.build(4, 1)


class TestFeatureBits:
    def test_all_combinations_roundtrip(self):
        for mvp in (False, True):
            for mc in (False, True):
                for pqe in (False, True):
                    feats = (mvp, mc, pqe)
                    assert features_from_bits(feature_flags_bits(feats)) == feats


class TestSequenceCoding:
    def test_parity_full_span_bit_exact(self, tiny_model):
        frames = seeded_frames(6, 24, 36, seed=3)   # gop 5 -> one full span
        result = encode_sequence(frames, tiny_model)
        decoded = decode_sequence(result.container, tiny_model)
        assert len(decoded) == 6
        for enc, dec in zip(result.recon_frames, decoded):
            assert enc.display_index == dec.display_index
            assert torch.equal(enc.pixels, dec.pixels)

    def test_parity_partial_tail(self, tiny_model):
        frames = seeded_frames(8, 24, 36, seed=4)   # span + 2 trailing
        result = encode_sequence(frames, tiny_model)
        decoded = decode_sequence(result.container, tiny_model)
        for enc, dec in zip(result.recon_frames, decoded):
            assert torch.equal(enc.pixels, dec.pixels)

    def test_recons_returned_in_display_order_with_input_dims(self, tiny_model):
        frames = seeded_frames(6, 24, 36, seed=5)
        result = encode_sequence(frames, tiny_model)
        for i, rec in enumerate(result.recon_frames):
            assert rec.display_index == i
            assert (rec.height, rec.width) == (24, 36)
            assert rec.pixels.min() >= 0 and rec.pixels.max() <= 1

    def test_encode_is_deterministic(self, tiny_model):
        frames = seeded_frames(6, 24, 36, seed=6)
        a = encode_sequence(frames, tiny_model).container.serialize()
        b = encode_sequence(frames, tiny_model).container.serialize()
        assert a == b

    def test_bit_accounting_exact(self, tiny_model):
        frames = seeded_frames(6, 24, 36, seed=7)
        result = encode_sequence(frames, tiny_model)
        c = result.container
        assert result.bpp == c.bpp
        assert c.bpp * 36 * 24 * 6 == 8 * c.payload_bytes
        assert sum(result.per_frame_bits) == 8 * c.payload_bytes

    def test_container_header_reflects_model(self, tiny_model):
        frames = seeded_frames(3, 24, 36, seed=8)
        c = encode_sequence(frames, tiny_model).container
        cfg = tiny_model.config
        assert c.gop_size == cfg.gop_size
        assert c.lambda_id == cfg.lambda_id
        assert c.metric == cfg.distortion_metric
        assert c.prior_hash == tiny_model.prior_hash()
        assert features_from_bits(c.feature_flags) == (
            cfg.use_mv_prediction, cfg.use_mc_enhancement,
            cfg.use_quality_enhancement)

    def test_record_layout_matches_plan(self, tiny_model):
        frames = seeded_frames(6, 24, 36, seed=9)
        c = encode_sequence(frames, tiny_model).container
        plan = GopPlan.build(6, tiny_model.config.gop_size)
        assert [r.display_index for r in c.records] == plan.coding_order()
        assert [r.frame_type for r in c.records] == \
            [e.frame_type for e in plan.entries]
        for r in c.records:
            if r.frame_type == FrameType.INTRA:
                assert r.mvd_payload == b""
            else:
                assert len(r.mvd_payload) > 0

    def test_rejects_inconsistent_resolutions(self, tiny_model):
        frames = [Frame(torch.rand(24, 36, 3), 0),
                  Frame(torch.rand(24, 32, 3), 1)]
        with pytest.raises(InvalidInputError):
            encode_sequence(frames, tiny_model)

    def test_decode_rejects_wrong_model(self, tiny_model, tiny_config):
        frames = seeded_frames(3, 24, 36, seed=10)
        container = encode_sequence(frames, tiny_model).container
        torch.manual_seed(99)
        other = CodecModel(tiny_config)
        with pytest.raises(CheckpointMismatchError):
            decode_sequence(container, other)

    def test_decode_truncated_stream_reports_prefix(self, tiny_model):
        frames = seeded_frames(6, 24, 36, seed=11)
        blob = encode_sequence(frames, tiny_model).container.serialize()
        with pytest.raises(CorruptStreamError) as err:
            decode_sequence(BitstreamContainer.parse(blob[:-4]), tiny_model)
        # parse itself may throw first; when it does the error already
        # carries the decodable prefix
        assert err.value.decodable_frames is not None

    def test_decode_flipped_payload_byte_fails_or_differs(self, tiny_model):
        """Corrupting one payload byte must never silently yield the
        original reconstruction."""
        frames = seeded_frames(3, 24, 36, seed=12)
        result = encode_sequence(frames, tiny_model)
        blob = bytearray(result.container.serialize())
        blob[-1] ^= 0xFF
        try:
            decoded = decode_sequence(BitstreamContainer.parse(bytes(blob)),
                                      tiny_model)
        except CorruptStreamError:
            return
        changed = any(not torch.equal(d.pixels, e.pixels)
                      for d, e in zip(decoded, result.recon_frames))
        assert changed


class TestFeatureAblations:
    @pytest.mark.parametrize("flags", [
        (True, False, False),
        (True, True, False),
        (False, False, False),
    ])
    def test_disabled_features_still_give_parity(self, flags):
        mvp, mc, pqe = flags
        torch.manual_seed(0)
        model = CodecModel(small_config(use_mv_prediction=mvp,
                                        use_mc_enhancement=mc,
                                        use_quality_enhancement=pqe))
        frames = seeded_frames(4, 24, 36, seed=13)
        result = encode_sequence(frames, model)
        assert features_from_bits(result.container.feature_flags) == flags
        decoded = decode_sequence(result.container, model)
        for enc, dec in zip(result.recon_frames, decoded):
            assert torch.equal(enc.pixels, dec.pixels)


class TestQualityEnhanceDegeneracy:
    def test_zero_weights_return_input_bit_exact(self, tiny_model):
        torch.manual_seed(0)
        comp = torch.rand(1, 3, 32, 32)
        ref = torch.rand(1, 3, 32, 32)
        s1 = tiny_model.pqe_comp.initial_state(32, 32)
        s2 = tiny_model.pqe_align.initial_state(32, 32)
        with torch.no_grad():
            x_hat, _, _, (w1, w2, w3) = quality_enhance(
                tiny_model, comp, ref, s1, s2, weight_override=(0.0, 0.0))
        assert torch.equal(x_hat, comp)
        assert torch.count_nonzero(w1) == 0
        assert torch.count_nonzero(w2) == 0
        assert torch.all(w3 == 1.0)

    def test_learned_weights_stay_in_simplex(self, tiny_model):
        torch.manual_seed(1)
        comp = torch.rand(1, 3, 32, 32)
        ref = torch.rand(1, 3, 32, 32)
        s1 = tiny_model.pqe_comp.initial_state(32, 32)
        s2 = tiny_model.pqe_align.initial_state(32, 32)
        with torch.no_grad():
            _, _, _, (w1, w2, w3) = quality_enhance(tiny_model, comp, ref,
                                                    s1, s2)
        for w in (w1, w2):
            assert (w > 0).all() and (w < 0.5).all()
        assert torch.allclose(w1 + w2 + w3, torch.ones_like(w3))
        assert (w3 > 0).all()
