"""Dual-path enhancement generator and its attention discriminator.

Two complementary branches refine a degraded frame: a downsampling
auto-encoder branch with a ConvLSTM bottleneck captures global structure and
temporal context, while a full-resolution branch built from residual
attention blocks restores local texture. A learned per-pixel weight blends
the two outputs convexly. Training is adversarial: the discriminator scores
frames in [0, 1] and also exposes its spatial attention maps, which the
generator loss pulls toward 1 on generated content.

Both branch heads are initialized near zero so an untrained enhancer is
approximately the identity map.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import EnhancerState, Frame, require
from .layers import (ConvLSTMCell, ResidualAttentionBlock, ResidualBlock, conv,
                     deconv, scale_module_)

_HEAD_INIT = 0.1


def fuse_weighted(weight: torch.Tensor, primary: torch.Tensor,
                  secondary: torch.Tensor) -> torch.Tensor:
    """Per-pixel convex blend ``w*primary + (1-w)*secondary``.

    The result is clamped to the per-pixel [min, max] envelope so float
    rounding can never leave the convex hull; for w identically 0 or 1 the
    arithmetic itself is exact and the clamp is a no-op.
    """
    lo = torch.minimum(primary, secondary)
    hi = torch.maximum(primary, secondary)
    blended = weight * primary + (1 - weight) * secondary
    return torch.clamp(blended, lo, hi)


class StructurePath(nn.Module):
    """Auto-encoder branch: 4x-downsampled ConvLSTM bottleneck, U-Net skips.

    Emits the three encoder features (full, half, quarter resolution) for the
    texture branch to fuse. The second downsampling conv doubles the channel
    count and the extra bottleneck conv stays at stride 1, keeping the
    recurrent state at exactly quarter resolution.
    """

    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.stem = conv(3, c)
        self.down1 = conv(c, c, 3, stride=2)
        self.down2 = conv(c, 2 * c, 3, stride=2)
        self.expand = conv(2 * c, 2 * c)
        self.enc_blocks = nn.Sequential(*(ResidualBlock(2 * c) for _ in range(3)))
        self.lstm = ConvLSTMCell(2 * c, 2 * c)
        self.bottleneck = conv(4 * c, 2 * c)
        self.up1 = deconv(2 * c, c)
        self.dec1 = conv(2 * c, c)
        self.up2 = deconv(c, c)
        self.dec2 = conv(2 * c, c)
        self.head = scale_module_(conv(c, 3), _HEAD_INIT)

    def forward(self, x, state: EnhancerState):
        f1 = F.relu(self.stem(x))
        f2 = F.relu(self.down1(f1))
        f3 = F.relu(self.down2(f2))
        z = self.enc_blocks(F.relu(self.expand(f3)))
        cell, hidden = self.lstm(z, (state.cell, state.hidden))
        d = F.relu(self.bottleneck(torch.cat([hidden, f3], dim=1)))
        d = F.relu(self.dec1(torch.cat([self.up1(d), f2], dim=1)))
        d = F.relu(self.dec2(torch.cat([self.up2(d), f1], dim=1)))
        out = x + self.head(d)
        return out, (f1, f2, f3), EnhancerState(cell, hidden)


class TexturePath(nn.Module):
    """Full-resolution branch: residual attention blocks, each followed by a
    1x1 fusion with one upsampled structure feature."""

    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.stem1 = conv(3, c)
        self.stem2 = conv(c, c)
        self.rab1 = ResidualAttentionBlock(c)
        self.fuse1 = nn.Conv2d(2 * c, c, 1)
        self.rab2 = ResidualAttentionBlock(c)
        self.fuse2 = nn.Conv2d(2 * c, c, 1)
        self.rab3 = ResidualAttentionBlock(c)
        self.fuse3 = nn.Conv2d(3 * c, c, 1)
        self.head = scale_module_(conv(c, 3), _HEAD_INIT)

    def forward(self, x, feats):
        f1, f2, f3 = feats
        size = x.shape[2:]
        y = F.relu(self.stem2(F.relu(self.stem1(x))))
        y = self.rab1(y)
        y = F.relu(self.fuse1(torch.cat([y, f1], dim=1)))
        y = self.rab2(y)
        up2 = F.interpolate(f2, size=size, mode="bilinear", align_corners=False)
        y = F.relu(self.fuse2(torch.cat([y, up2], dim=1)))
        y = self.rab3(y)
        up3 = F.interpolate(f3, size=size, mode="bilinear", align_corners=False)
        y = F.relu(self.fuse3(torch.cat([y, up3], dim=1)))
        return x + self.head(y)


class WeightGenerator(nn.Module):
    """Per-pixel sigmoid weight map from a stack of candidate frames."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        c = channels
        self.body = nn.Sequential(
            conv(in_channels, c), nn.ReLU(inplace=True),
            conv(c, c), nn.ReLU(inplace=True),
            conv(c, c), nn.ReLU(inplace=True),
            ResidualBlock(c),
            ResidualBlock(c),
            nn.Conv2d(c, 1, 1),
        )

    def forward(self, x):
        return torch.sigmoid(self.body(x))


class DualPathEnhancer(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.structure = StructurePath(channels)
        self.texture = TexturePath(channels)
        self.fusion_weight = WeightGenerator(6, channels)

    def initial_state(self, height: int, width: int, batch: int = 1) -> EnhancerState:
        return EnhancerState.zeros(height, width, self.channels, batch)

    def forward(self, x: torch.Tensor, state: EnhancerState,
                weight_override: float | None = None):
        """Returns (fused, structure_out, texture_out, weight, new_state)."""
        require(x.ndim == 4 and x.shape[1] == 3, "enhancer expects Bx3xHxW input")
        require(x.shape[2] % 4 == 0 and x.shape[3] % 4 == 0,
                "enhancer dims must be divisible by 4")
        require(state.cell.shape[0] == x.shape[0]
                and state.matches_frame(x.shape[2], x.shape[3]),
                "enhancer state does not match the input frame")
        s_out, feats, new_state = self.structure(x, state)
        t_out = self.texture(x, feats)
        if weight_override is None:
            w = self.fusion_weight(torch.cat([s_out, t_out], dim=1))
        else:
            w = torch.full_like(x[:, :1], float(weight_override))
        fused = fuse_weighted(w, s_out, t_out)
        return fused, s_out, t_out, w, new_state


class Discriminator(nn.Module):
    """Four stride-2 layers, then channel-pooled spatial attention.

    The average- and max-pooled (over channels) feature planes each pass a
    1x1 conv + sigmoid, giving two attention maps at 1/16 resolution that
    gate the features before the scoring head. The score is a sigmoid, one
    scalar per batch element.
    """

    def __init__(self, channels: tuple = (64, 128, 256, 512)):
        super().__init__()
        c0, c1, c2, c3 = channels
        self.downs = nn.Sequential(
            conv(3, c0, 3, stride=2), nn.LeakyReLU(0.2, inplace=True),
            conv(c0, c1, 3, stride=2), nn.LeakyReLU(0.2, inplace=True),
            conv(c1, c2, 3, stride=2), nn.LeakyReLU(0.2, inplace=True),
            conv(c2, c3, 3, stride=2), nn.LeakyReLU(0.2, inplace=True),
        )
        self.att_avg = nn.Conv2d(1, 1, 1)
        self.att_max = nn.Conv2d(1, 1, 1)
        self.post = conv(2 * c3, c3)
        self.head = conv(c3, 1)

    def forward(self, x):
        require(x.ndim == 4 and x.shape[1] == 3, "discriminator expects Bx3xHxW")
        require(x.shape[2] % 16 == 0 and x.shape[3] % 16 == 0,
                "discriminator dims must be divisible by 16")
        f = self.downs(x)
        m_avg = torch.sigmoid(self.att_avg(f.mean(dim=1, keepdim=True)))
        m_max = torch.sigmoid(self.att_max(f.amax(dim=1, keepdim=True)))
        gated = torch.cat([f * m_avg, f * m_max], dim=1)
        y = F.leaky_relu(self.post(gated), 0.2)
        score = torch.sigmoid(self.head(y).mean(dim=(1, 2, 3)))
        return score, m_avg, m_max


def attention_summary(m_avg: torch.Tensor, m_max: torch.Tensor) -> torch.Tensor:
    """Scalar attention response per sample: mean of both maps."""
    return 0.5 * (m_avg.mean(dim=(1, 2, 3)) + m_max.mean(dim=(1, 2, 3)))


def discriminate(disc: Discriminator, frame: Frame):
    """Score a single frame; returns (score, m_avg, m_max) with a float score."""
    with torch.no_grad():
        score, m_avg, m_max = disc(frame.chw())
    return float(score.squeeze(0)), m_avg.squeeze(0), m_max.squeeze(0)


def generator_loss(target: torch.Tensor, generated: torch.Tensor,
                   disc: Discriminator, gamma: float) -> torch.Tensor:
    """Reconstruction + adversarial + attention objective for the generator.

    gamma * MSE(target, generated) + E[1 - D(generated)^2]
                                   + E[1 - phi(generated)^2]
    where phi is the mean discriminator attention response. All three terms
    are non-negative and the loss is zero exactly for a perfect generator
    that the discriminator scores (and attends) at 1.
    """
    score, m_avg, m_max = disc(generated)
    phi = attention_summary(m_avg, m_max)
    mse = F.mse_loss(generated, target)
    return (gamma * mse
            + (1.0 - score.pow(2)).mean()
            + (1.0 - phi.pow(2)).mean())


def discriminator_loss(target: torch.Tensor, generated: torch.Tensor,
                       disc: Discriminator) -> torch.Tensor:
    """E[1 - D(target)^2] + E[D(generated)^2]; zero when real scores 1, fake 0.

    ``generated`` is detached: this objective only moves the discriminator.
    """
    score_real, _, _ = disc(target)
    score_fake, _, _ = disc(generated.detach())
    return (1.0 - score_real.pow(2)).mean() + score_fake.pow(2).mean()
