"""Two-phase, stage-wise training with adversarial alternation.

Phase 1 walks the stages in a fixed order with ground-truth reference
frames at lr 1e-4; phase 2 continues joint training with rolled-out
reconstructions as references at lr 1e-5. Two preparation stages precede
the six contract stages: "flow" (supervised on synthetic shifts, frozen
afterwards) and "intra" (the keyframe codec, which no later stage touches).

Iteration counts derive from the full-scale budget divided by a desk-scale
factor, so the same code runs a lunch-break smoke pass or an overnight job.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .core import (CodecConfig, ConfigError, Frame, MotionField,
                   TrainingDivergedError, require)
from .enhancer import discriminator_loss, generator_loss
from .entropy import quantize, rate_estimate
from .metrics import distortion
from .model import CodecModel
from .motion import warp_tensor
from .mv_coding import MV_BUFFER_DEPTH, MvBuffer
from .pipeline import quality_enhance, reconstruct_texture_part
from .synthetic import shift_pair

PRE_STAGES = ("flow", "intra")
MODULE_STAGES = ("mvp", "mvdc", "mc", "rc", "pqe", "joint")
FULL_PHASE1_ITERS = 300_000
FULL_PHASE2_ITERS = 600_000


@dataclass
class TrainPlan:
    """Everything a training run needs beyond the model and the data."""

    lmbda: float = 1024.0
    gamma: float = 1000.0
    metric: str = "mse"
    batch_size: int = 4
    crop_size: int = 64
    desk_scale: int = 600
    phase1_lr: float = 1e-4
    phase2_lr: float = 1e-5
    seed: int = 0
    # Extra weight, relative to the stage's distortion scale, on per-path
    # reconstruction terms for the dual-path enhancer. Without it the fused
    # output alone is trained and the two paths are free to straddle the
    # target (blend great, each path individually poor). 0 disables.
    path_anchor: float = 0.0

    def __post_init__(self):
        require(self.desk_scale >= 1, "desk_scale must be >= 1", ConfigError)
        require(self.path_anchor >= 0.0, "path_anchor must be >= 0", ConfigError)
        require(self.batch_size >= 1, "batch_size must be >= 1", ConfigError)
        require(self.crop_size >= 16 and self.crop_size % 16 == 0,
                "crop_size must be a positive multiple of 16", ConfigError)
        require(self.metric in ("mse", "ms-ssim"),
                f"unknown metric {self.metric!r}", ConfigError)

    @property
    def phase1_iters(self) -> int:
        return max(1, FULL_PHASE1_ITERS // self.desk_scale)

    @property
    def phase2_iters(self) -> int:
        return max(1, FULL_PHASE2_ITERS // self.desk_scale)

    def to_file(self, path) -> None:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_file(cls, path) -> "TrainPlan":
        known = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {text!r}")
            key, _, raw = text.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown plan key {key!r}")
            kind = known[key]
            try:
                if kind in ("int", int):
                    values[key] = int(raw)
                elif kind in ("float", float):
                    values[key] = float(raw)
                else:
                    values[key] = raw
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {raw!r}") from exc
        return cls(**values)


@dataclass(frozen=True)
class TrainBatch:
    """One optimizer step's worth of aligned crops."""

    x: torch.Tensor             # (B,3,s,s) target frame
    ref: torch.Tensor           # (B,3,s,s) reference frame
    buffer: torch.Tensor        # (B,6,s,s) stacked prior motion fields
    reference_source: str       # "ground-truth" | "reconstruction"


@dataclass(frozen=True)
class TrainRecord:
    iteration: int
    stage: str
    phase: int
    loss: float
    bits: float
    distortion: float
    reference_source: str


@dataclass(frozen=True)
class TrainResult:
    records: tuple
    checkpoints: dict
    log_path: Path | None


def rd_objective(lmbda: float, dist, bits):
    """The scalarized rate-distortion target: lambda * distortion + bits."""
    return lmbda * dist + bits


def _fresh_states(model: CodecModel, height: int, width: int, batch: int):
    return (model.mc_enhancer.initial_state(height, width, batch),
            model.pqe_comp.initial_state(height, width, batch),
            model.pqe_align.initial_state(height, width, batch))


def p_frame_forward(model: CodecModel, ref: torch.Tensor, x: torch.Tensor,
                    buffer: torch.Tensor, *, quant: str,
                    features: tuple) -> dict:
    """Run the full P-frame chain on a batch and return every intermediate.

    ``quant="train"`` uses dithered latents (differentiable); ``"infer"``
    uses rounding, matching the bitstream path. The flow net always runs
    detached: motion estimation stays frozen after its warm-up stage.
    """
    use_mvp, use_mc, use_pqe = features
    batch, _, height, width = x.shape
    with torch.no_grad():
        v = model.flow(ref, x)
    if use_mvp:
        vbar = model.mv_predictor(buffer)
    else:
        vbar = torch.zeros_like(v)
    d = v - vbar
    y_q = quantize(model.mv_codec.analyze(d), quant)
    bits_mvd = rate_estimate(y_q, model.prior_mv)
    mc_state, comp_state, align_state = _fresh_states(model, height, width, batch)
    v_hat = vbar + model.mv_codec.synthesize(y_q)
    warped = warp_tensor(ref, v_hat)
    if use_mc:
        fused, comp_s, comp_t, _, _ = model.mc_enhancer(warped, mc_state)
        comp_m = fused.clamp(0.0, 1.0)
    else:
        comp_s = comp_t = None
        comp_m = warped.clamp(0.0, 1.0)
    r = x - comp_m
    z_q = quantize(model.res_codec.analyze(r), quant)
    bits_res = rate_estimate(z_q, model.prior_res)
    x_hat, comp_r, _, _ = reconstruct_texture_part(
        model, ref, comp_m, z_q, comp_state, align_state, use_pqe)
    return {"v": v, "vbar": vbar, "d": d, "y_q": y_q, "v_hat": v_hat,
            "comp_m": comp_m, "comp_s": comp_s, "comp_t": comp_t,
            "r": r, "z_q": z_q, "comp_r": comp_r,
            "x_hat": x_hat, "bits_mvd": bits_mvd, "bits_res": bits_res}


def stage_loss(model: CodecModel, stage: str, batch: TrainBatch, *,
               lmbda: float, gamma: float, metric: str,
               path_anchor: float = 0.0):
    """The per-stage objective in its contract form.

    Returns (loss, parts) where parts carries the bits and distortion terms
    that go into the log. "all" is accepted as an alias for "joint".
    ``path_anchor > 0`` adds per-path MSE terms (scaled by the stage's own
    distortion weight) wherever the dual-path enhancer runs, keeping each
    path a usable reconstruction on its own instead of one side of a
    blend-only compromise.
    """
    if stage == "all":
        stage = "joint"
    config = model.config
    use_mvp = config.use_mv_prediction
    x, ref, buffer = batch.x, batch.ref, batch.buffer
    if stage == "mvp":
        with torch.no_grad():
            v = model.flow(ref, x)
        vbar = model.mv_predictor(buffer)
        dist = torch.nn.functional.mse_loss(vbar, v)
        return dist, {"bits": 0.0, "distortion": float(dist.detach())}
    if stage == "mvdc":
        with torch.no_grad():
            v = model.flow(ref, x)
            vbar = model.mv_predictor(buffer) if use_mvp else torch.zeros_like(v)
        d = v - vbar
        y_q = quantize(model.mv_codec.analyze(d), "train")
        d_hat = model.mv_codec.synthesize(y_q)
        bits = rate_estimate(y_q, model.prior_mv)
        dist = torch.nn.functional.mse_loss(d_hat, d)
        loss = rd_objective(lmbda, dist, bits)
        return loss, {"bits": float(bits.detach()), "distortion": float(dist.detach())}
    if stage == "mc":
        with torch.no_grad():
            v = model.flow(ref, x)
            vbar = model.mv_predictor(buffer) if use_mvp else torch.zeros_like(v)
            y_q = quantize(model.mv_codec.analyze(v - vbar), "infer")
            v_hat = vbar + model.mv_codec.synthesize(y_q)
        mc_state, _, _ = _fresh_states(model, *x.shape[2:], x.shape[0])
        fused, comp_s, comp_t, _, _ = model.mc_enhancer(
            warp_tensor(ref, v_hat), mc_state)
        comp_m = fused.clamp(0.0, 1.0)
        loss = generator_loss(x, comp_m, model.disc_mc, gamma)
        if path_anchor > 0.0:
            loss = loss + gamma * path_anchor * (
                torch.nn.functional.mse_loss(comp_s, x)
                + torch.nn.functional.mse_loss(comp_t, x))
        dist = torch.nn.functional.mse_loss(comp_m, x)
        return loss, {"bits": 0.0, "distortion": float(dist.detach()),
                      "generated": comp_m}
    if stage == "rc":
        with torch.no_grad():
            fwd = p_frame_forward(
                model, ref, x, buffer, quant="infer",
                features=(use_mvp, config.use_mc_enhancement, False))
            comp_m = fwd["comp_m"]
        r = x - comp_m
        z_q = quantize(model.res_codec.analyze(r), "train")
        r_hat = model.res_codec.synthesize(z_q)
        bits = rate_estimate(z_q, model.prior_res)
        dist = torch.nn.functional.mse_loss(r_hat, r)
        loss = rd_objective(lmbda, dist, bits)
        return loss, {"bits": float(bits.detach()), "distortion": float(dist.detach())}
    if stage == "pqe":
        with torch.no_grad():
            fwd = p_frame_forward(
                model, ref, x, buffer, quant="infer",
                features=(use_mvp, config.use_mc_enhancement, False))
            comp_r = fwd["comp_r"]
        _, comp_state, align_state = _fresh_states(model, *x.shape[2:], x.shape[0])
        x_hat, _, _, _ = quality_enhance(model, comp_r, ref, comp_state,
                                         align_state)
        dist = distortion(metric, x_hat, x)
        return dist, {"bits": 0.0, "distortion": float(dist.detach()),
                      "generated": x_hat}
    if stage == "joint":
        fwd = p_frame_forward(
            model, ref, x, buffer, quant="train",
            features=(use_mvp, config.use_mc_enhancement,
                      config.use_quality_enhancement))
        dist = distortion(metric, fwd["x_hat"], x)
        bits = fwd["bits_mvd"] + fwd["bits_res"]
        loss = rd_objective(lmbda, dist, bits)
        if path_anchor > 0.0 and fwd["comp_s"] is not None:
            loss = loss + lmbda * path_anchor * (
                torch.nn.functional.mse_loss(fwd["comp_s"], x)
                + torch.nn.functional.mse_loss(fwd["comp_t"], x))
        return loss, {"bits": float(bits.detach()), "distortion": float(dist.detach()),
                      "generated": fwd["x_hat"], "comp_m": fwd["comp_m"]}
    raise ConfigError(f"unknown training stage {stage!r}")


def stage_parameters(model: CodecModel, stage: str) -> list:
    modules = {
        "flow": [model.flow],
        "intra": [model.intra_codec, model.prior_intra],
        "mvp": [model.mv_predictor],
        "mvdc": [model.mv_codec, model.prior_mv],
        "mc": [model.mc_enhancer],
        "rc": [model.res_codec, model.prior_res],
        "pqe": [model.pqe_comp, model.pqe_align,
                model.pqe_weight_comp, model.pqe_weight_align],
    }
    modules["joint"] = (modules["mvp"] + modules["mvdc"] + modules["mc"]
                        + modules["rc"] + modules["pqe"]
                        + [model.intra_codec, model.prior_intra])
    if stage not in modules:
        raise ConfigError(f"unknown training stage {stage!r}")
    params = []
    for m in modules[stage]:
        params.extend(m.parameters())
    return params


def _stage_discriminators(model: CodecModel, stage: str) -> list:
    if stage == "mc":
        return [model.disc_mc]
    if stage == "pqe":
        return [model.disc_pqe]
    if stage == "joint":
        return [model.disc_mc, model.disc_pqe]
    return []


class Trainer:
    """Runs a TrainPlan over in-memory clips, logging and checkpointing.

    ``clips`` is a list of (frames, 3, H, W) float tensors in [0,1]. Updates
    touch only the active stage's parameters (plus its discriminator), so a
    parameter snapshot outside the stage is bit-identical before and after.
    """

    def __init__(self, model: CodecModel, plan: TrainPlan, clips,
                 out_dir=None):
        require(len(clips) >= 1, "training needs at least one clip")
        for clip in clips:
            require(clip.dim() == 4 and clip.shape[0] >= 3 and clip.shape[1] == 3,
                    "clips must be (frames>=3, 3, H, W) tensors; phase 2 rolls "
                    "a reconstruction out of the frame before the reference")
            require(clip.shape[2] >= plan.crop_size and clip.shape[3] >= plan.crop_size,
                    f"clip {tuple(clip.shape)} smaller than crop {plan.crop_size}")
        self.model = model
        self.plan = plan
        self.clips = list(clips)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.records: list = []
        self.checkpoints: dict = {}
        self._iter = 0
        self._log_fh = None
        self._log_writer = None

    # ---------------------------------------------------------------- data

    def _crop(self, clip: torch.Tensor, rng) -> torch.Tensor:
        size = self.plan.crop_size
        top = int(rng.integers(0, clip.shape[2] - size + 1))
        left = int(rng.integers(0, clip.shape[3] - size + 1))
        return clip[:, :, top:top + size, left:left + size]

    def _gt_flows(self, frames: torch.Tensor, upto: int) -> list:
        """Flows between consecutive frames ending just before index ``upto``."""
        first = max(0, upto - MV_BUFFER_DEPTH)
        pairs = [(frames[i - 1:i], frames[i:i + 1])
                 for i in range(first + 1, upto + 1) if i >= 1]
        if not pairs:
            return []
        refs = torch.cat([p[0] for p in pairs])
        tgts = torch.cat([p[1] for p in pairs])
        with torch.no_grad():
            flows = self.model.flow(refs, tgts)
        return [flows[i:i + 1] for i in range(flows.shape[0])]

    def _buffer_from_flows(self, flows: list, height: int, width: int) -> torch.Tensor:
        buf = MvBuffer(height, width)
        for f in flows:
            buf = buf.pushed(MotionField.from_chw(f))
        return buf.stacked()

    def _make_batch(self, rng, phase: int, backward_ok: bool) -> TrainBatch:
        size = self.plan.crop_size
        xs, refs, buffers = [], [], []
        source = "ground-truth" if phase == 1 else "reconstruction"
        for _ in range(self.plan.batch_size):
            clip = self.clips[int(rng.integers(len(self.clips)))]
            window = self._crop(clip, rng)
            if backward_ok and rng.integers(2) == 1:
                window = torch.flip(window, dims=(0,))
            n = window.shape[0]
            t_min = 1 if phase == 1 else 2
            t = int(rng.integers(t_min, n))
            x = window[t:t + 1]
            if phase == 1:
                refs.append(window[t - 1:t])
                buffers.append(self._buffer_from_flows(
                    self._gt_flows(window, t - 1), size, size))
            else:
                prev_flows = self._gt_flows(window, t - 1)
                buf_prev = self._buffer_from_flows(prev_flows, size, size)
                with torch.no_grad():
                    fwd = p_frame_forward(
                        self.model, window[t - 2:t - 1], window[t - 1:t],
                        buf_prev, quant="infer",
                        features=(self.model.config.use_mv_prediction,
                                  self.model.config.use_mc_enhancement,
                                  self.model.config.use_quality_enhancement))
                refs.append(fwd["x_hat"].detach())
                buffers.append(self._buffer_from_flows(
                    prev_flows + [fwd["v_hat"].detach()], size, size))
            xs.append(x)
        return TrainBatch(torch.cat(xs), torch.cat(refs), torch.cat(buffers),
                          source)

    def _flow_batch(self, rng):
        size = self.plan.crop_size
        refs, tgts, fields = [], [], []
        for _ in range(self.plan.batch_size):
            ref, tgt, (dx, dy) = shift_pair(size, size, rng)
            refs.append(ref.chw())
            tgts.append(tgt.chw())
            field = torch.tensor([dx, dy], dtype=torch.float32)
            fields.append(field.view(1, 2, 1, 1).expand(1, 2, size, size))
        return torch.cat(refs), torch.cat(tgts), torch.cat(fields)

    def _intra_batch(self, rng) -> torch.Tensor:
        xs = []
        for _ in range(self.plan.batch_size):
            clip = self.clips[int(rng.integers(len(self.clips)))]
            window = self._crop(clip, rng)
            t = int(rng.integers(window.shape[0]))
            xs.append(window[t:t + 1])
        return torch.cat(xs)

    # --------------------------------------------------------------- steps

    def _record(self, stage: str, phase: int, loss: float, bits: float,
                dist: float, source: str) -> None:
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {self._iter} of stage {stage}",
                stage=stage, iteration=self._iter)
        rec = TrainRecord(self._iter, stage, phase, loss, bits, dist, source)
        self.records.append(rec)
        if self._log_writer is not None:
            self._log_writer.writerow([rec.iteration, rec.stage,
                                       repr(rec.loss), repr(rec.bits),
                                       repr(rec.distortion)])
            self._log_fh.flush()
        self._iter += 1

    def _pre_stage_step(self, stage: str, rng, opt, phase: int) -> None:
        plan = self.plan
        if stage == "flow":
            refs, tgts, fields = self._flow_batch(rng)
            pred = self.model.flow(refs, tgts)
            loss = torch.nn.functional.mse_loss(pred, fields)
            bits = 0.0
            dist = float(loss.detach())
        else:
            x = self._intra_batch(rng)
            y_q = quantize(self.model.intra_codec.analyze(x - 0.5), "train")
            x_hat = self.model.intra_codec.synthesize(y_q) + 0.5
            bits_t = rate_estimate(y_q, self.model.prior_intra)
            dist_t = torch.nn.functional.mse_loss(x_hat, x)
            loss = rd_objective(plan.lmbda, dist_t, bits_t)
            bits, dist = float(bits_t.detach()), float(dist_t.detach())
        opt.zero_grad()
        loss.backward()
        opt.step()
        self._record(stage, phase, float(loss.detach()), bits, dist,
                     "ground-truth")

    def _module_stage_step(self, stage: str, rng, opt, disc_opt, phase: int,
                           backward_ok: bool) -> None:
        plan = self.plan
        batch = self._make_batch(rng, phase, backward_ok)
        loss, parts = stage_loss(self.model, stage, batch, lmbda=plan.lmbda,
                                 gamma=plan.gamma, metric=plan.metric,
                                 path_anchor=plan.path_anchor)
        objective = loss
        if stage == "pqe":
            objective = plan.gamma * loss + _adversarial_g(
                batch.x, parts["generated"], self.model.disc_pqe)
        elif stage == "joint":
            objective = loss
            if self.model.config.use_mc_enhancement:
                objective = objective + _adversarial_g(
                    batch.x, parts["comp_m"], self.model.disc_mc)
            if self.model.config.use_quality_enhancement:
                objective = objective + _adversarial_g(
                    batch.x, parts["generated"], self.model.disc_pqe)
        opt.zero_grad()
        objective.backward()
        opt.step()
        if disc_opt is not None and "generated" in parts:
            disc_opt.zero_grad()
            d_losses = []
            if stage in ("mc",):
                d_losses.append(discriminator_loss(batch.x, parts["generated"],
                                                   self.model.disc_mc))
            if stage == "pqe":
                d_losses.append(discriminator_loss(batch.x, parts["generated"],
                                                   self.model.disc_pqe))
            if stage == "joint":
                if self.model.config.use_mc_enhancement:
                    d_losses.append(discriminator_loss(
                        batch.x, parts["comp_m"], self.model.disc_mc))
                if self.model.config.use_quality_enhancement:
                    d_losses.append(discriminator_loss(
                        batch.x, parts["generated"], self.model.disc_pqe))
            if d_losses:
                total = d_losses[0]
                for extra in d_losses[1:]:
                    total = total + extra
                total.backward()
                disc_opt.step()
        self._record(stage, phase, float(loss.detach()), parts["bits"],
                     parts["distortion"], batch.reference_source)

    def _run_stage(self, stage: str, iters: int, lr: float, rng, phase: int,
                   backward_ok: bool) -> None:
        opt = torch.optim.Adam(stage_parameters(self.model, stage), lr=lr)
        discs = _stage_discriminators(self.model, stage)
        disc_opt = None
        if discs:
            disc_params = []
            for dnet in discs:
                disc_params.extend(dnet.parameters())
            disc_opt = torch.optim.Adam(disc_params, lr=lr)
        for _ in range(iters):
            if stage in PRE_STAGES:
                self._pre_stage_step(stage, rng, opt, phase)
            else:
                self._module_stage_step(stage, rng, opt, disc_opt, phase,
                                        backward_ok)
        if self.out_dir is not None:
            path = self.out_dir / stage / f"{self._iter}.ckpt"
            self.model.save_checkpoint(path)
            self.checkpoints[stage] = path

    def default_schedule(self) -> list:
        """The standard two-phase run as (stage, phase) steps, honoring the
        model's feature switches."""
        config = self.model.config
        schedule = [(stage, 1) for stage in PRE_STAGES]
        for stage in MODULE_STAGES:
            if stage == "mvp" and not config.use_mv_prediction:
                continue
            if stage == "mc" and not config.use_mc_enhancement:
                continue
            if stage == "pqe" and not config.use_quality_enhancement:
                continue
            schedule.append((stage, 1))
        schedule.append(("joint", 2))
        return schedule

    def train(self, schedule=None) -> TrainResult:
        plan = self.plan
        torch.manual_seed(plan.seed)
        rng = np.random.default_rng(plan.seed)
        if schedule is None:
            schedule = self.default_schedule()
        log_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.out_dir / "train_log.csv"
            self._log_fh = open(log_path, "w", newline="", encoding="utf-8")
            self._log_writer = csv.writer(self._log_fh)
            self._log_writer.writerow(["iter", "stage", "loss", "bits",
                                       "distortion"])
        try:
            for stage, phase in schedule:
                require(phase in (1, 2), f"phase must be 1 or 2, got {phase}",
                        ConfigError)
                iters = plan.phase1_iters if phase == 1 else plan.phase2_iters
                lr = plan.phase1_lr if phase == 1 else plan.phase2_lr
                self._run_stage(stage, iters, lr, rng, phase=phase,
                                backward_ok=(stage == "joint"))
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
                self._log_writer = None
        return TrainResult(tuple(self.records), dict(self.checkpoints),
                           log_path)


def _adversarial_g(target: torch.Tensor, generated: torch.Tensor,
                   disc) -> torch.Tensor:
    """Generator-side adversarial terms alone (no distortion part)."""
    full = generator_loss(target, generated, disc, gamma=0.0)
    return full


def smoothed_stage_decrease(records, stage: str, tail: float = 0.2) -> float:
    """Fractional drop of the smoothed loss from the first to the last
    ``tail`` of a stage's iterations; 0.3 means a 30% decrease."""
    losses = [r.loss for r in records if r.stage == stage]
    require(len(losses) >= 5, f"stage {stage!r} has too few records")
    k = max(1, int(len(losses) * tail))
    head = sum(losses[:k]) / k
    tail_mean = sum(losses[-k:]) / k
    if head == 0:
        return 0.0
    return (head - tail_mean) / abs(head)
