"""Motion-vector prediction and transform auto-encoders.

The predictor extrapolates the current motion field from up to three
previously reconstructed fields; only the difference between the measured
flow and this prediction is compressed. The same 4-down/4-up auto-encoder
topology is reused for the motion difference, the texture residual, and the
intra substitute (different channel counts at the boundary).
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import InvalidInputError, MotionField, require
from .layers import ResidualBlock, conv, deconv

MV_BUFFER_DEPTH = 3


class MvBuffer:
    """Sliding window of up to three reconstructed motion fields, oldest first.

    Missing history is zero-filled, which doubles as the cold-start behaviour
    right after an intra frame. Instances are immutable; ``pushed`` returns a
    new buffer.
    """

    def __init__(self, height: int | None = None, width: int | None = None,
                 entries: tuple = ()):
        entries = tuple(entries)
        require(len(entries) <= MV_BUFFER_DEPTH,
                f"buffer holds at most {MV_BUFFER_DEPTH} fields")
        for e in entries:
            require(isinstance(e, MotionField), "buffer entries must be MotionField")
        if entries:
            h, w = entries[0].height, entries[0].width
            require(all(e.height == h and e.width == w for e in entries),
                    "buffer entries must share dimensions")
            require(height in (None, h) and width in (None, w),
                    "declared dims disagree with entries")
            height, width = h, w
        require(height is not None and width is not None,
                "an empty buffer needs declared height/width")
        self.height = int(height)
        self.width = int(width)
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    def pushed(self, field: MotionField) -> "MvBuffer":
        require(field.height == self.height and field.width == self.width,
                "pushed field dims disagree with buffer")
        kept = (self.entries + (field,))[-MV_BUFFER_DEPTH:]
        return MvBuffer(self.height, self.width, kept)

    def stacked(self) -> torch.Tensor:
        """1 x 6 x H x W tensor: three fields concatenated, zeros in front."""
        missing = MV_BUFFER_DEPTH - len(self.entries)
        planes = [torch.zeros(1, 2, self.height, self.width)] * missing
        planes += [e.chw() for e in self.entries]
        return torch.cat(planes, dim=1)


class MvPredictorNet(nn.Module):
    """Extrapolates the next motion field from the stacked buffer."""

    def __init__(self, width: int = 64):
        super().__init__()
        self.body = nn.Sequential(
            conv(2 * MV_BUFFER_DEPTH, width), nn.ReLU(inplace=True),
            ResidualBlock(width),
            ResidualBlock(width),
            conv(width, width), nn.ReLU(inplace=True),
            conv(width, 2),
        )

    def forward(self, stacked: torch.Tensor) -> torch.Tensor:
        require(stacked.ndim == 4 and stacked.shape[1] == 2 * MV_BUFFER_DEPTH,
                "predictor expects a Bx6xHxW stacked buffer")
        return self.body(stacked)


def predict_mv(net: MvPredictorNet, buffer: MvBuffer) -> MotionField:
    return MotionField.from_chw(net(buffer.stacked()))


class LatentAutoencoder(nn.Module):
    """Four stride-2 analysis convs down to a bottleneck, mirrored synthesis.

    Spatial contract: (B, in_ch, H, W) -> (B, latent, H/16, W/16) -> back.
    """

    DOWN_FACTOR = 16

    def __init__(self, in_channels: int, width: int = 128, latent_channels: int = 128):
        super().__init__()
        self.in_channels = in_channels
        self.latent_channels = latent_channels
        self.analysis = nn.Sequential(
            conv(in_channels, width, 3, stride=2), nn.ReLU(inplace=True),
            conv(width, width, 3, stride=2), nn.ReLU(inplace=True),
            conv(width, width, 3, stride=2), nn.ReLU(inplace=True),
            conv(width, latent_channels, 3, stride=2),
        )
        self.synthesis = nn.Sequential(
            deconv(latent_channels, width), nn.ReLU(inplace=True),
            deconv(width, width), nn.ReLU(inplace=True),
            deconv(width, width), nn.ReLU(inplace=True),
            deconv(width, in_channels),
        )

    def analyze(self, x: torch.Tensor) -> torch.Tensor:
        require(x.ndim == 4 and x.shape[1] == self.in_channels,
                f"analyze expects Bx{self.in_channels}xHxW input")
        require(x.shape[2] % self.DOWN_FACTOR == 0 and x.shape[3] % self.DOWN_FACTOR == 0,
                f"dims must be divisible by {self.DOWN_FACTOR}")
        return self.analysis(x)

    def synthesize(self, latent: torch.Tensor) -> torch.Tensor:
        require(latent.ndim == 4 and latent.shape[1] == self.latent_channels,
                f"synthesize expects Bx{self.latent_channels}xhxw latent")
        return self.synthesis(latent)
