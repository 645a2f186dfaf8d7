"""Small reusable network blocks."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)


def deconv(in_ch: int, out_ch: int, kernel: int = 4, stride: int = 2) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(in_ch, out_ch, kernel, stride=stride, padding=(kernel - stride) // 2)


def scale_module_(module: nn.Module, factor: float) -> nn.Module:
    """Shrink a layer's parameters in place (near-identity residual heads)."""
    with torch.no_grad():
        for p in module.parameters():
            p.mul_(factor)
    return module


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        self.conv1 = conv(channels, channels, kernel)
        self.conv2 = conv(channels, channels, kernel)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM cell; all four gates come from one convolution."""

    def __init__(self, in_channels: int, hidden_channels: int, kernel: int = 3):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.gates = conv(in_channels + hidden_channels, 4 * hidden_channels, kernel)

    def forward(self, x, state):
        cell, hidden = state
        gates = self.gates(torch.cat([x, hidden], dim=1))
        in_gate, forget_gate, out_gate, candidate = gates.chunk(4, dim=1)
        in_gate = torch.sigmoid(in_gate)
        forget_gate = torch.sigmoid(forget_gate)
        out_gate = torch.sigmoid(out_gate)
        candidate = torch.tanh(candidate)
        cell = forget_gate * cell + in_gate * candidate
        hidden = out_gate * torch.tanh(cell)
        return cell, hidden


class ChannelAttention(nn.Module):
    """Squeeze-and-gate: global average pool -> bottleneck MLP -> sigmoid gates."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.squeeze = nn.Conv2d(channels, hidden, 1)
        self.expand = nn.Conv2d(hidden, channels, 1)

    def gates(self, x):
        pooled = F.adaptive_avg_pool2d(x, 1)
        return torch.sigmoid(self.expand(F.relu(self.squeeze(pooled))))

    def forward(self, x):
        return x * self.gates(x)


class ResidualAttentionBlock(nn.Module):
    """Two residual blocks followed by channel attention, with an outer skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.block1 = ResidualBlock(channels)
        self.block2 = ResidualBlock(channels)
        self.attention = ChannelAttention(channels)

    def forward(self, x):
        return x + self.attention(self.block2(self.block1(x)))
