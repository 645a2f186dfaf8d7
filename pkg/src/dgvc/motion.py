"""Optical flow estimation and differentiable warping.

The estimator is a coarse-to-fine pyramid: each level refines a 2x-upsampled
flow from the level below with a small convolutional stack. The convention
throughout the codec is ``warp(ref, estimate_flow(ref, tgt)) ~= tgt``, i.e.
flow vectors live in the target frame and point into the reference.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Frame, InvalidInputError, MotionField, require


def warp_tensor(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``x`` by ``flow`` (pixel units; channel 0 = dx, 1 = dy).

    Bilinear sampling with border clamping, written out explicitly so that a
    sampling position equal to the base grid reproduces the input bit-exactly
    (the interpolation weights collapse to exactly 1 and 0).
    """
    require(x.ndim == 4 and flow.ndim == 4 and flow.shape[1] == 2,
            "warp expects BxCxHxW input and Bx2xHxW flow")
    b, c, h, w = x.shape
    require(flow.shape == (b, 2, h, w),
            f"flow shape {tuple(flow.shape)} does not match input {tuple(x.shape)}")
    dtype, device = flow.dtype, x.device
    xs = torch.arange(w, dtype=dtype, device=device).view(1, 1, 1, w)
    ys = torch.arange(h, dtype=dtype, device=device).view(1, 1, h, 1)
    px = (xs + flow[:, 0:1]).clamp(0, w - 1)
    py = (ys + flow[:, 1:2]).clamp(0, h - 1)
    x0f = torch.floor(px)
    y0f = torch.floor(py)
    wx = px - x0f
    wy = py - y0f
    x0 = x0f.long()
    y0 = y0f.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = x.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)
    top = v00 * (1 - wx) + v01 * wx
    bottom = v10 * (1 - wx) + v11 * wx
    return top * (1 - wy) + bottom * wy


class FlowPyramidNet(nn.Module):
    """Pyramidal flow estimator with per-level refinement stacks."""

    LEVEL_WIDTH = 32
    LEVEL_KERNEL = 7

    def __init__(self, levels: int = 4):
        super().__init__()
        require(levels >= 2, "need at least two pyramid levels")
        self.levels = levels
        k, w = self.LEVEL_KERNEL, self.LEVEL_WIDTH
        pad = k // 2

        def stack():
            return nn.Sequential(
                nn.Conv2d(8, w, k, padding=pad), nn.ReLU(inplace=True),
                nn.Conv2d(w, w, k, padding=pad), nn.ReLU(inplace=True),
                nn.Conv2d(w, w, k, padding=pad), nn.ReLU(inplace=True),
                nn.Conv2d(w, w, k, padding=pad), nn.ReLU(inplace=True),
                nn.Conv2d(w, 2, k, padding=pad),
            )

        self.refiners = nn.ModuleList(stack() for _ in range(levels))

    def forward(self, ref: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
        require(ref.shape == tgt.shape and ref.ndim == 4 and ref.shape[1] == 3,
                "flow estimation expects matching Bx3xHxW tensors")
        factor = 2 ** (self.levels - 1)
        require(ref.shape[2] % factor == 0 and ref.shape[3] % factor == 0,
                f"dims must be divisible by {factor} for {self.levels} pyramid levels")
        refs, tgts = [ref], [tgt]
        for _ in range(self.levels - 1):
            refs.insert(0, F.avg_pool2d(refs[0], 2))
            tgts.insert(0, F.avg_pool2d(tgts[0], 2))
        b, _, h0, w0 = refs[0].shape
        flow = torch.zeros(b, 2, h0, w0, dtype=ref.dtype, device=ref.device)
        for level in range(self.levels):
            if level > 0:
                flow = 2.0 * F.interpolate(flow, scale_factor=2, mode="bilinear",
                                           align_corners=False)
            warped = warp_tensor(refs[level], flow)
            flow = flow + self.refiners[level](torch.cat([tgts[level], warped, flow], dim=1))
        return flow


def estimate_flow(net: FlowPyramidNet, ref: Frame, tgt: Frame) -> MotionField:
    """Flow mapping target coordinates into the reference frame."""
    require(ref.height == tgt.height and ref.width == tgt.width,
            "reference and target dims differ")
    return MotionField.from_chw(net(ref.chw(), tgt.chw()))


def warp(frame: Frame, field: MotionField) -> Frame:
    require(frame.height == field.height and frame.width == field.width,
            "frame and motion field dims differ")
    return Frame.from_chw(warp_tensor(frame.chw(), field.chw()), frame.display_index)


def align(net: FlowPyramidNet, prev_recon: Frame, target: Frame) -> Frame:
    """Warp ``prev_recon`` onto ``target`` using freshly estimated flow.

    The result stands in for the target, so it carries the target's
    display index rather than the reference's.
    """
    warped = warp(prev_recon, estimate_flow(net, prev_recon, target))
    return Frame(warped.pixels, target.display_index)
