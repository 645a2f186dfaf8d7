"""Shared domain types, configuration, and shape/alignment utilities.

Values of the domain types below are treated as immutable: operations return
new values instead of mutating tensors in place. Tensors are float32 unless a
caller explicitly promotes them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


class CodecError(Exception):
    """Base class for all codec failures."""


class InvalidInputError(CodecError, ValueError):
    """An operation received malformed tensors or arguments."""


class ConfigError(CodecError, ValueError):
    """A configuration value (or combination) is unusable."""


class CorruptStreamError(CodecError):
    """A bitstream could not be decoded.

    ``byte_offset``, ``display_index`` and ``decodable_frames`` carry whatever
    context the failing layer knows; all are optional.
    """

    def __init__(self, message, byte_offset=None, display_index=None,
                 decodable_frames=None):
        super().__init__(message)
        self.byte_offset = byte_offset
        self.display_index = display_index
        self.decodable_frames = decodable_frames


class CheckpointMismatchError(CodecError):
    """Stream and model checkpoint disagree (wrong prior tables or config)."""


class TrainingDivergedError(CodecError):
    """A training loss went non-finite."""

    def __init__(self, message, stage=None, iteration=None):
        super().__init__(message)
        self.stage = stage
        self.iteration = iteration


class MetricDomainError(CodecError, ValueError):
    """A metric was asked to operate outside its valid domain."""


def require(condition, message, exc=InvalidInputError):
    if not condition:
        raise exc(message)


def check_finite(tensor: torch.Tensor, what: str) -> None:
    if not torch.isfinite(tensor).all():
        raise InvalidInputError(f"{what} contains NaN or Inf entries")


@dataclass(frozen=True)
class Frame:
    """One video frame: H x W x 3 pixels in [0, 1] plus its display position."""

    pixels: torch.Tensor
    display_index: int = 0

    def __post_init__(self):
        require(isinstance(self.pixels, torch.Tensor), "pixels must be a tensor")
        require(self.pixels.ndim == 3 and self.pixels.shape[-1] == 3,
                f"frame pixels must be H x W x 3, got {tuple(self.pixels.shape)}")
        require(self.pixels.numel() > 0, "frame must be non-empty")
        check_finite(self.pixels, "frame pixels")
        require(int(self.display_index) >= 0, "display_index must be >= 0")
        object.__setattr__(self, "pixels", self.pixels.float())
        object.__setattr__(self, "display_index", int(self.display_index))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def chw(self) -> torch.Tensor:
        """Return a 1x3xHxW view for network consumption."""
        return self.pixels.permute(2, 0, 1).unsqueeze(0)

    @classmethod
    def from_chw(cls, tensor: torch.Tensor, display_index: int = 0) -> "Frame":
        require(tensor.ndim == 4 and tensor.shape[0] == 1 and tensor.shape[1] == 3,
                f"expected 1x3xHxW tensor, got {tuple(tensor.shape)}")
        return cls(tensor.squeeze(0).permute(1, 2, 0), display_index)

    def clamped(self) -> "Frame":
        return Frame(self.pixels.clamp(0.0, 1.0), self.display_index)


@dataclass(frozen=True)
class MotionField:
    """Dense displacement field, H x W x 2 in pixel units (dx, dy)."""

    flow: torch.Tensor

    def __post_init__(self):
        require(isinstance(self.flow, torch.Tensor), "flow must be a tensor")
        require(self.flow.ndim == 3 and self.flow.shape[-1] == 2,
                f"flow must be H x W x 2, got {tuple(self.flow.shape)}")
        check_finite(self.flow, "motion field")
        object.__setattr__(self, "flow", self.flow.float())

    @property
    def height(self) -> int:
        return self.flow.shape[0]

    @property
    def width(self) -> int:
        return self.flow.shape[1]

    def chw(self) -> torch.Tensor:
        return self.flow.permute(2, 0, 1).unsqueeze(0)

    @classmethod
    def from_chw(cls, tensor: torch.Tensor) -> "MotionField":
        require(tensor.ndim == 4 and tensor.shape[0] == 1 and tensor.shape[1] == 2,
                f"expected 1x2xHxW tensor, got {tuple(tensor.shape)}")
        return cls(tensor.squeeze(0).permute(1, 2, 0))

    @classmethod
    def zeros(cls, height: int, width: int) -> "MotionField":
        return cls(torch.zeros(height, width, 2))


VALID_METRICS = ("mse", "ms-ssim")


@dataclass
class CodecConfig:
    """Static knobs shared by encoder, decoder and trainer.

    ``channels`` is the width of the enhancement generators; ``latent_channels``
    is both the width and the bottleneck depth of the transform auto-encoders.
    The ``use_*`` switches exist for ablations; all default to on and are
    recorded in the bitstream header so the decoder mirrors them.
    """

    gop_size: int = 15
    lmbda: float = 1024.0
    distortion_metric: str = "mse"
    channels: int = 64
    latent_channels: int = 128
    gamma: float = 1000.0
    flow_levels: int = 4
    disc_channels: tuple = (64, 128, 256, 512)
    prior_support: int = 64
    use_mv_prediction: bool = True
    use_mc_enhancement: bool = True
    use_quality_enhancement: bool = True

    def __post_init__(self):
        require(int(self.gop_size) >= 2, "gop_size must be >= 2", ConfigError)
        require(self.lmbda > 0, "lambda must be positive", ConfigError)
        require(self.distortion_metric in VALID_METRICS,
                f"distortion_metric must be one of {VALID_METRICS}", ConfigError)
        require(self.channels > 0 and self.latent_channels > 0,
                "channel counts must be positive", ConfigError)
        require(self.gamma > 0, "gamma must be positive", ConfigError)
        require(2 <= self.flow_levels <= 6, "flow_levels out of range", ConfigError)
        require(len(self.disc_channels) == 4 and all(c > 0 for c in self.disc_channels),
                "disc_channels must be four positive widths", ConfigError)
        require(self.prior_support >= 1, "prior_support must be >= 1", ConfigError)
        self.gop_size = int(self.gop_size)
        self.disc_channels = tuple(int(c) for c in self.disc_channels)

    @property
    def lambda_id(self) -> int:
        """Integer identifier of the rate point, used in bundle names and headers."""
        return int(round(self.lmbda))


@dataclass(frozen=True)
class EnhancerState:
    """ConvLSTM carry (cell, hidden) for one enhancement generator.

    Kept at quarter resolution with 2*channels feature maps, batch-first.
    """

    cell: torch.Tensor
    hidden: torch.Tensor

    def __post_init__(self):
        require(isinstance(self.cell, torch.Tensor) and isinstance(self.hidden, torch.Tensor),
                "state must hold tensors")
        require(self.cell.ndim == 4 and self.hidden.shape == self.cell.shape,
                "state tensors must be B x 2C x H/4 x W/4 and congruent")
        check_finite(self.cell, "enhancer cell state")
        check_finite(self.hidden, "enhancer hidden state")

    @classmethod
    def zeros(cls, height: int, width: int, channels: int, batch: int = 1) -> "EnhancerState":
        require(height % 4 == 0 and width % 4 == 0,
                f"state requires dims divisible by 4, got {height}x{width}")
        shape = (batch, 2 * channels, height // 4, width // 4)
        return cls(torch.zeros(shape), torch.zeros(shape))

    def matches_frame(self, height: int, width: int) -> bool:
        return (self.cell.shape[2] * 4 == height) and (self.cell.shape[3] * 4 == width)


ALIGNMENT_CHOICES = (4, 16)


def pad_to_alignment(frame: Frame, multiple: int) -> tuple[Frame, tuple[int, int]]:
    """Edge-replicate pad a frame (bottom/right) to dimension multiples.

    Returns the padded frame and the original (height, width) so the caller
    can crop back after processing. Already-aligned frames round-trip
    bit-exactly.
    """
    require(multiple in ALIGNMENT_CHOICES,
            f"alignment multiple must be one of {ALIGNMENT_CHOICES}")
    h, w = frame.height, frame.width
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return frame, (h, w)
    padded = F.pad(frame.chw(), (0, pad_w, 0, pad_h), mode="replicate")
    return Frame.from_chw(padded, frame.display_index), (h, w)


def crop_to(frame: Frame, dims: tuple[int, int]) -> Frame:
    h, w = dims
    require(0 < h <= frame.height and 0 < w <= frame.width,
            f"crop {h}x{w} exceeds frame {frame.height}x{frame.width}")
    if (h, w) == (frame.height, frame.width):
        return frame
    return Frame(frame.pixels[:h, :w], frame.display_index)
