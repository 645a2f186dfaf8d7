"""Sequence codec: GOP planning, per-frame coding, container assembly.

Groups of pictures are coded bi-directionally: both ends of a span are intra
(shared with the neighbouring span, coded once), the first half of the
interior is predicted forward along the display axis and the second half
backward from the closing intra frame. Each direction keeps its own motion
buffer and enhancement states, reset at span boundaries.

The decoder never re-derives anything the encoder knew: both sides run the
same reconstruction functions on the same quantized latents, so encoder-side
reconstructions equal decoder output bit-exactly on the same machine.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import torch

from .container import (FEATURE_MC_ENHANCEMENT, FEATURE_MV_PREDICTION,
                        FEATURE_QUALITY_ENHANCEMENT, BitstreamContainer,
                        FrameRecord, FrameType)
from .core import (CheckpointMismatchError, CorruptStreamError, EnhancerState,
                   Frame, MotionField, crop_to, pad_to_alignment, require)
from .entropy import LatentCode, ModelId, quantize, range_decode, range_encode
from .model import CodecModel
from .motion import warp_tensor
from .mv_coding import MvBuffer

PAD_MULTIPLE = 16


@dataclass(frozen=True)
class PlanEntry:
    display_index: int
    frame_type: FrameType
    ref_display: int | None
    span_start: int


@dataclass(frozen=True)
class GopPlan:
    """Coding order for a sequence: which frame, which type, which reference."""

    n_frames: int
    gop_size: int
    entries: tuple

    @classmethod
    def build(cls, n_frames: int, gop_size: int) -> "GopPlan":
        require(n_frames >= 1, "a sequence needs at least one frame")
        require(gop_size >= 2, "gop_size must be >= 2")
        entries = [PlanEntry(0, FrameType.INTRA, None, 0)]
        start = 0
        while start + gop_size <= n_frames - 1:
            closing = start + gop_size
            entries.append(PlanEntry(closing, FrameType.INTRA, None, start))
            for d in range(start + 1, start + gop_size // 2 + 1):
                entries.append(PlanEntry(d, FrameType.P_FORWARD, d - 1, start))
            for d in range(start + gop_size - 1, start + gop_size // 2, -1):
                entries.append(PlanEntry(d, FrameType.P_BACKWARD, d + 1, start))
            start = closing
        for d in range(start + 1, n_frames):
            entries.append(PlanEntry(d, FrameType.P_FORWARD, d - 1, start))
        plan = cls(n_frames, gop_size, tuple(entries))
        plan.check_references()
        return plan

    def check_references(self) -> None:
        coded = set()
        for e in self.entries:
            require(e.display_index not in coded,
                    f"display {e.display_index} planned twice")
            if e.ref_display is not None:
                require(e.ref_display in coded,
                        f"display {e.display_index} planned before its "
                        f"reference {e.ref_display}")
            coded.add(e.display_index)
        require(coded == set(range(self.n_frames)),
                "plan must cover every display index exactly once")

    def coding_order(self) -> list[int]:
        return [e.display_index for e in self.entries]


@dataclass(frozen=True)
class DirectionState:
    """Per-direction carry: motion buffer plus three ConvLSTM states."""

    buffer: MvBuffer
    mc_state: EnhancerState
    pqe_comp_state: EnhancerState
    pqe_align_state: EnhancerState

    @classmethod
    def fresh(cls, model: CodecModel, height: int, width: int) -> "DirectionState":
        return cls(
            buffer=MvBuffer(height, width),
            mc_state=model.mc_enhancer.initial_state(height, width),
            pqe_comp_state=model.pqe_comp.initial_state(height, width),
            pqe_align_state=model.pqe_align.initial_state(height, width),
        )


def _features_of(config) -> tuple[bool, bool, bool]:
    return (config.use_mv_prediction, config.use_mc_enhancement,
            config.use_quality_enhancement)


def feature_flags_bits(features: tuple[bool, bool, bool]) -> int:
    use_mvp, use_mc, use_pqe = features
    return ((FEATURE_MV_PREDICTION if use_mvp else 0)
            | (FEATURE_MC_ENHANCEMENT if use_mc else 0)
            | (FEATURE_QUALITY_ENHANCEMENT if use_pqe else 0))


def features_from_bits(bits: int) -> tuple[bool, bool, bool]:
    return (bool(bits & FEATURE_MV_PREDICTION),
            bool(bits & FEATURE_MC_ENHANCEMENT),
            bool(bits & FEATURE_QUALITY_ENHANCEMENT))


def motion_compensate(enhancer, prev_recon: Frame, v_hat: MotionField,
                      state: EnhancerState):
    """Warp the reference by decoded motion, then enhance the warped frame."""
    require(prev_recon.height == v_hat.height and prev_recon.width == v_hat.width,
            "motion field dims disagree with reference")
    compensated, state = _compensate_tensor(enhancer, prev_recon.chw(),
                                            v_hat.chw(), state)
    return Frame.from_chw(compensated), state


def _compensate_tensor(enhancer, ref: torch.Tensor, flow: torch.Tensor,
                       state: EnhancerState):
    warped = warp_tensor(ref, flow)
    fused, _, _, _, state = enhancer(warped, state)
    return fused.clamp(0.0, 1.0), state


def quality_enhance(model: CodecModel, comp: torch.Tensor, ref: torch.Tensor,
                    state_comp: EnhancerState, state_align: EnhancerState,
                    weight_override: tuple | None = None):
    """Final fusion: enhanced compensated frame, enhanced re-aligned reference,
    and the compensated frame itself, blended with halved sigmoid weights.

    Returns (x_hat, new_comp_state, new_align_state, (w1, w2, w3)).
    ``weight_override=(0, 0)`` forces the identity blend for ablation tests.
    """
    with torch.no_grad():
        realign = model.flow(ref, comp)
    aligned = warp_tensor(ref, realign)
    enh_comp, _, _, _, state_comp = model.pqe_comp(comp, state_comp)
    enh_align, _, _, _, state_align = model.pqe_align(aligned, state_align)
    if weight_override is None:
        w1 = 0.5 * model.pqe_weight_comp(torch.cat([enh_comp, comp], dim=1))
        w2 = 0.5 * model.pqe_weight_align(torch.cat([enh_align, comp], dim=1))
    else:
        w1 = torch.full_like(comp[:, :1], float(weight_override[0]))
        w2 = torch.full_like(comp[:, :1], float(weight_override[1]))
    w3 = 1.0 - (w1 + w2)
    x_hat = (w1 * enh_comp + w2 * enh_align + w3 * comp).clamp(0.0, 1.0)
    return x_hat, state_comp, state_align, (w1, w2, w3)


def reconstruct_intra(model: CodecModel, y_hat: torch.Tensor) -> torch.Tensor:
    return (model.intra_codec.synthesize(y_hat) + 0.5).clamp(0.0, 1.0)


def reconstruct_motion_part(model: CodecModel, ref: torch.Tensor,
                            vbar: torch.Tensor, y_hat: torch.Tensor,
                            mc_state: EnhancerState, use_mc: bool):
    """Decoded-motion half of P-frame reconstruction (shared both sides)."""
    d_hat = model.mv_codec.synthesize(y_hat)
    v_hat = vbar + d_hat
    if use_mc:
        comp, mc_state = _compensate_tensor(model.mc_enhancer, ref, v_hat, mc_state)
    else:
        comp = warp_tensor(ref, v_hat).clamp(0.0, 1.0)
    return comp, v_hat, mc_state


def reconstruct_texture_part(model: CodecModel, ref: torch.Tensor,
                             comp_m: torch.Tensor, z_hat: torch.Tensor,
                             state_comp: EnhancerState, state_align: EnhancerState,
                             use_pqe: bool):
    """Residual-and-enhancement half of P-frame reconstruction."""
    r_hat = model.res_codec.synthesize(z_hat)
    comp_r = (comp_m + r_hat).clamp(0.0, 1.0)
    if use_pqe:
        x_hat, state_comp, state_align, _ = quality_enhance(
            model, comp_r, ref, state_comp, state_align)
    else:
        x_hat = comp_r
    return x_hat, comp_r, state_comp, state_align


def _advance(dstate: DirectionState, v_hat: torch.Tensor, mc_state, comp_state,
             align_state) -> DirectionState:
    return DirectionState(
        buffer=dstate.buffer.pushed(MotionField.from_chw(v_hat)),
        mc_state=mc_state,
        pqe_comp_state=comp_state,
        pqe_align_state=align_state,
    )


def encode_p_frame(model: CodecModel, tables: dict, x: torch.Tensor,
                   ref: torch.Tensor, dstate: DirectionState,
                   features: tuple):
    use_mvp, use_mc, use_pqe = features
    v = model.flow(ref, x)
    if use_mvp:
        vbar = model.mv_predictor(dstate.buffer.stacked())
    else:
        vbar = torch.zeros_like(v)
    d = v - vbar
    y_hat = quantize(model.mv_codec.analyze(d), "infer")
    mvd_payload = range_encode(LatentCode.from_nchw(y_hat, ModelId.MV_DIFF),
                               tables[ModelId.MV_DIFF])
    comp_m, v_hat, mc_state = reconstruct_motion_part(
        model, ref, vbar, y_hat, dstate.mc_state, use_mc)
    residual = x - comp_m
    z_hat = quantize(model.res_codec.analyze(residual), "infer")
    res_payload = range_encode(LatentCode.from_nchw(z_hat, ModelId.RESIDUAL),
                               tables[ModelId.RESIDUAL])
    x_hat, _, state_comp, state_align = reconstruct_texture_part(
        model, ref, comp_m, z_hat, dstate.pqe_comp_state,
        dstate.pqe_align_state, use_pqe)
    dstate = _advance(dstate, v_hat, mc_state, state_comp, state_align)
    return (mvd_payload, res_payload), x_hat, dstate


def decode_p_frame(model: CodecModel, tables: dict, record: FrameRecord,
                   ref: torch.Tensor, dstate: DirectionState,
                   latent_shape: tuple, features: tuple):
    use_mvp, use_mc, use_pqe = features
    if use_mvp:
        vbar = model.mv_predictor(dstate.buffer.stacked())
    else:
        b, _, h, w = ref.shape
        vbar = torch.zeros(b, 2, h, w, dtype=ref.dtype, device=ref.device)
    y_hat = range_decode(record.mvd_payload, tables[ModelId.MV_DIFF],
                         latent_shape, ModelId.MV_DIFF).to_nchw()
    comp_m, v_hat, mc_state = reconstruct_motion_part(
        model, ref, vbar, y_hat, dstate.mc_state, use_mc)
    z_hat = range_decode(record.res_payload, tables[ModelId.RESIDUAL],
                         latent_shape, ModelId.RESIDUAL).to_nchw()
    x_hat, _, state_comp, state_align = reconstruct_texture_part(
        model, ref, comp_m, z_hat, dstate.pqe_comp_state,
        dstate.pqe_align_state, use_pqe)
    dstate = _advance(dstate, v_hat, mc_state, state_comp, state_align)
    return x_hat, dstate


def encode_intra_frame(model: CodecModel, tables: dict, x: torch.Tensor):
    y_hat = quantize(model.intra_codec.analyze(x - 0.5), "infer")
    payload = range_encode(LatentCode.from_nchw(y_hat, ModelId.INTRA),
                           tables[ModelId.INTRA])
    return payload, reconstruct_intra(model, y_hat)


def decode_intra_frame(model: CodecModel, tables: dict, record: FrameRecord,
                       latent_shape: tuple):
    y_hat = range_decode(record.res_payload, tables[ModelId.INTRA],
                         latent_shape, ModelId.INTRA).to_nchw()
    return reconstruct_intra(model, y_hat)


@dataclass(frozen=True)
class EncodeResult:
    container: BitstreamContainer
    recon_frames: tuple
    per_frame_bits: tuple

    @property
    def bpp(self) -> Fraction:
        return self.container.bpp


def _validate_sequence(frames) -> tuple[int, int]:
    require(len(frames) >= 1, "cannot encode an empty sequence")
    h, w = frames[0].height, frames[0].width
    for f in frames:
        require(isinstance(f, Frame), "sequence entries must be Frame values")
        require(f.height == h and f.width == w,
                f"frame dims drift: {f.height}x{f.width} vs {h}x{w}")
    return h, w


def _latent_shape(config, padded_h: int, padded_w: int) -> tuple:
    return (padded_h // PAD_MULTIPLE, padded_w // PAD_MULTIPLE,
            config.latent_channels)


class _StateBank:
    def __init__(self, model: CodecModel, height: int, width: int):
        self._model = model
        self._dims = (height, width)
        self._states: dict = {}

    def get(self, entry: PlanEntry) -> DirectionState:
        key = (entry.span_start, entry.frame_type)
        if key not in self._states:
            self._states[key] = DirectionState.fresh(self._model, *self._dims)
        return self._states[key]

    def put(self, entry: PlanEntry, state: DirectionState) -> None:
        self._states[(entry.span_start, entry.frame_type)] = state


def encode_sequence(frames, model: CodecModel) -> EncodeResult:
    """Encode display-ordered frames into a container plus reconstructions.

    Reconstructions are the decoder's view: they come from quantized latents
    through the exact decode path.
    """
    height, width = _validate_sequence(frames)
    config = model.config
    features = _features_of(config)
    model.eval()
    with torch.no_grad():
        tables = model.coding_tables()
        prior_hash = model.prior_hash(tables)
        plan = GopPlan.build(len(frames), config.gop_size)
        padded = {}
        for position, frame in enumerate(frames):
            pframe, _ = pad_to_alignment(
                Frame(frame.pixels, position), PAD_MULTIPLE)
            padded[position] = pframe.chw()
        ph, pw = padded[0].shape[2], padded[0].shape[3]
        bank = _StateBank(model, ph, pw)
        recons: dict = {}
        records = []
        for entry in plan.entries:
            x = padded[entry.display_index]
            if entry.frame_type == FrameType.INTRA:
                payload, x_hat = encode_intra_frame(model, tables, x)
                records.append(FrameRecord(FrameType.INTRA, entry.display_index,
                                           b"", payload))
            else:
                dstate = bank.get(entry)
                (mvd, res), x_hat, dstate = encode_p_frame(
                    model, tables, x, recons[entry.ref_display], dstate, features)
                bank.put(entry, dstate)
                records.append(FrameRecord(entry.frame_type, entry.display_index,
                                           mvd, res))
            recons[entry.display_index] = x_hat
    container = BitstreamContainer(
        width=width, height=height, frame_count=len(frames),
        gop_size=config.gop_size, lambda_id=config.lambda_id,
        metric=config.distortion_metric,
        feature_flags=feature_flags_bits(features),
        prior_hash=prior_hash, records=tuple(records))
    recon_frames = tuple(
        crop_to(Frame.from_chw(recons[i], i), (height, width))
        for i in range(len(frames)))
    bits = tuple(records[plan.coding_order().index(i)].bits
                 for i in range(len(frames)))
    return EncodeResult(container, recon_frames, bits)


def decode_sequence(container: BitstreamContainer, model: CodecModel):
    """Decode a container back to display-ordered frames.

    Raises CheckpointMismatchError when the model's prior tables do not match
    the hash the encoder embedded, CorruptStreamError when records disagree
    with the GOP plan derived from the header.
    """
    model.eval()
    with torch.no_grad():
        tables = model.coding_tables()
        if model.prior_hash(tables) != container.prior_hash:
            raise CheckpointMismatchError(
                "container was encoded with different prior tables")
        plan = GopPlan.build(container.frame_count, container.gop_size)
        if len(container.records) != container.frame_count:
            raise CorruptStreamError(
                f"header promises {container.frame_count} frames but the "
                f"stream holds {len(container.records)} records",
                decodable_frames=len(container.records))
        features = features_from_bits(container.feature_flags)
        ph = -(-container.height // PAD_MULTIPLE) * PAD_MULTIPLE
        pw = -(-container.width // PAD_MULTIPLE) * PAD_MULTIPLE
        latent_shape = _latent_shape(model.config, ph, pw)
        bank = _StateBank(model, ph, pw)
        recons: dict = {}
        for entry, record in zip(plan.entries, container.records):
            if (record.frame_type != entry.frame_type
                    or record.display_index != entry.display_index):
                raise CorruptStreamError(
                    f"record for display {record.display_index} "
                    f"({record.frame_type.name}) arrived out of coding order; "
                    f"expected display {entry.display_index} ({entry.frame_type.name})",
                    display_index=record.display_index,
                    decodable_frames=len(recons))
            if entry.frame_type == FrameType.INTRA:
                x_hat = decode_intra_frame(model, tables, record, latent_shape)
            else:
                dstate = bank.get(entry)
                x_hat, dstate = decode_p_frame(
                    model, tables, record, recons[entry.ref_display], dstate,
                    latent_shape, features)
                bank.put(entry, dstate)
            recons[entry.display_index] = x_hat
    return [crop_to(Frame.from_chw(recons[i], i),
                    (container.height, container.width))
            for i in range(container.frame_count)]
