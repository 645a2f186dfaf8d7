"""Quantization, learned factorized priors, and lossless symbol coding.

The prior models each latent channel with an independent learned CDF: a stack
of monotone scalar layers (softplus-positive weights, bounded tanh gains)
whose sigmoid output is the cumulative distribution. The same CDF serves two
masters that must agree:

* ``rate_estimate`` integrates the continuous model (differentiable, used in
  training losses and bit accounting),
* ``tables()`` freezes it into 16-bit integer frequency tables for the range
  coder, with a dedicated escape slot capturing both tails.

Out-of-support symbols are escape-coded as zigzagged raw 32-bit values, so
coding is lossless for any integer input.
"""
from __future__ import annotations

import bisect
import hashlib
import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import CorruptStreamError, InvalidInputError, require
from .rangecoder import RangeDecoder, RangeEncoder

P_MIN = 2.0 ** -16
TABLE_TOTAL = 1 << 16
QUANTIZE_MODES = ("infer", "train")


def quantize(x: torch.Tensor, mode: str = "infer") -> torch.Tensor:
    """Round to integers ("infer") or add uniform dither ("train").

    Training mode keeps gradients alive; the perturbation is clamped a hair
    inside (-0.5, 0.5) because ``torch.rand`` can return exactly 0.
    """
    require(mode in QUANTIZE_MODES, f"quantize mode must be one of {QUANTIZE_MODES}")
    if mode == "infer":
        return torch.round(x)
    noise = torch.rand_like(x) - 0.5
    noise = noise.clamp_min(-0.5 + 2.0 ** -24)
    return x + noise


class ModelId(IntEnum):
    MV_DIFF = 0
    RESIDUAL = 1
    INTRA = 2


@dataclass(frozen=True)
class LatentCode:
    """Quantized latent plane: integer symbols (h, w, c) plus the prior id."""

    symbols: torch.Tensor
    model_id: ModelId

    def __post_init__(self):
        require(isinstance(self.symbols, torch.Tensor) and self.symbols.ndim == 3,
                "symbols must be an h x w x c tensor")
        require(not self.symbols.dtype.is_floating_point,
                "symbols must be an integer tensor")
        if self.symbols.numel():
            lo = int(self.symbols.min())
            hi = int(self.symbols.max())
            require(-(1 << 31) < lo and hi < (1 << 31),
                    "symbols must fit in 32 bits")
        object.__setattr__(self, "model_id", ModelId(self.model_id))

    @property
    def channels(self) -> int:
        return self.symbols.shape[2]

    @classmethod
    def from_nchw(cls, latent: torch.Tensor, model_id: ModelId) -> "LatentCode":
        require(latent.ndim == 4 and latent.shape[0] == 1,
                "expected a 1xCxhxw latent tensor")
        symbols = latent.squeeze(0).permute(1, 2, 0).round().long()
        return cls(symbols, model_id)

    def to_nchw(self) -> torch.Tensor:
        return self.symbols.permute(2, 0, 1).unsqueeze(0).float()


class _LowerBound(torch.autograd.Function):
    """clamp_min with gradients that can still push a clamped value upward."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        passthrough = (x >= ctx.bound) | (grad < 0)
        return grad * passthrough, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


@dataclass(frozen=True)
class SymbolTables:
    """Frozen per-channel frequency tables for the range coder.

    ``freqs[c]`` has ``2*support + 2`` slots: symbols -support..support plus a
    trailing escape slot; every slot is >= 1 and each row sums to ``total``.
    """

    offset: int
    support: int
    freqs: np.ndarray      # (C, K) int64
    cumfreqs: np.ndarray   # (C, K + 1) int64
    total: int = TABLE_TOTAL

    @property
    def channels(self) -> int:
        return self.freqs.shape[0]

    @property
    def escape_slot(self) -> int:
        return self.freqs.shape[1] - 1

    @classmethod
    def from_pmf(cls, pmf: np.ndarray, escape_mass: np.ndarray, support: int,
                 total: int = TABLE_TOTAL) -> "SymbolTables":
        require(pmf.ndim == 2 and pmf.shape[1] == 2 * support + 1,
                "pmf must be (channels, 2*support+1)")
        rows = np.concatenate([pmf, escape_mass.reshape(-1, 1)], axis=1)
        freqs = np.stack([_quantize_row(row, total) for row in rows])
        cumfreqs = np.zeros((freqs.shape[0], freqs.shape[1] + 1), dtype=np.int64)
        np.cumsum(freqs, axis=1, out=cumfreqs[:, 1:])
        return cls(offset=-support, support=support, freqs=freqs,
                   cumfreqs=cumfreqs, total=total)

    def digest(self) -> bytes:
        h = hashlib.sha256()
        h.update(b"dgvc-tables-v1")
        h.update(np.int64(self.support).tobytes())
        h.update(np.int64(self.total).tobytes())
        h.update(self.freqs.astype("<i8").tobytes())
        return h.digest()


def _quantize_row(p: np.ndarray, total: int) -> np.ndarray:
    """Scale a pmf row to integer frequencies summing exactly to ``total``."""
    k = p.size
    require(k <= total, "too many symbols for the frequency total")
    p = np.clip(p.astype(np.float64), 0.0, None)
    f = np.floor(p * total + 0.5).astype(np.int64)
    np.maximum(f, 1, out=f)
    diff = total - int(f.sum())
    if diff > 0:
        f[int(np.argmax(f))] += diff
    elif diff < 0:
        need = -diff
        for idx in np.argsort(-f, kind="stable"):
            give = min(int(f[idx]) - 1, need)
            f[idx] -= give
            need -= give
            if need == 0:
                break
        require(need == 0, "cannot renormalize frequency row", InvalidInputError)
    return f


class FactorizedPrior(nn.Module):
    """Independent learned CDF per latent channel.

    Layer weights are softplus-reparameterized and the gain factors are tanh
    bounded, which keeps each scalar map strictly increasing, hence the
    composed CDF monotone for any parameter values reached by training.
    """

    def __init__(self, channels: int, support: int = 64,
                 filters: tuple = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        require(channels > 0, "channels must be positive")
        require(support >= 1, "support must be >= 1")
        self.channels = channels
        self.support = support
        widths = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(widths) - 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for k in range(len(widths) - 1):
            init = math.log(math.expm1(1.0 / scale / widths[k + 1]))
            m = torch.full((channels, widths[k + 1], widths[k]), init)
            self._matrices.append(nn.Parameter(m))
            b = torch.empty(channels, widths[k + 1], 1).uniform_(-0.5, 0.5)
            self._biases.append(nn.Parameter(b))
            if k < len(widths) - 2:
                self._factors.append(nn.Parameter(torch.zeros(channels, widths[k + 1], 1)))

    def _logits(self, values: torch.Tensor) -> torch.Tensor:
        """values: (C, 1, N) -> logits (C, 1, N), computed in values' dtype."""
        v = values
        n_layers = len(self._matrices)
        for k in range(n_layers):
            m = F.softplus(self._matrices[k].to(v.dtype))
            v = torch.bmm(m, v) + self._biases[k].to(v.dtype)
            if k < n_layers - 1:
                v = v + torch.tanh(self._factors[k].to(v.dtype)) * torch.tanh(v)
        return v

    def cdf(self, values: torch.Tensor) -> torch.Tensor:
        """Per-channel CDF at ``values`` shaped (C, N)."""
        require(values.ndim == 2 and values.shape[0] == self.channels,
                "cdf expects (channels, N) values")
        return torch.sigmoid(self._logits(values.unsqueeze(1))).squeeze(1)

    def likelihood(self, latent: torch.Tensor) -> torch.Tensor:
        """P(symbol) evaluated at (possibly dithered) latent values.

        Accepts (C, h, w) or (B, C, h, w); returns the same shape, lower
        bounded at ``P_MIN``.
        """
        squeeze = latent.ndim == 3
        if squeeze:
            latent = latent.unsqueeze(0)
        require(latent.ndim == 4 and latent.shape[1] == self.channels,
                f"latent has {latent.shape[1] if latent.ndim == 4 else '?'} channels, "
                f"prior expects {self.channels}")
        b, c, h, w = latent.shape
        flat = latent.permute(1, 0, 2, 3).reshape(c, 1, -1)
        upper = torch.sigmoid(self._logits(flat + 0.5))
        lower = torch.sigmoid(self._logits(flat - 0.5))
        p = (upper - lower).reshape(c, b, h, w).permute(1, 0, 2, 3)
        p = lower_bound(p, P_MIN)
        return p.squeeze(0) if squeeze else p

    @torch.no_grad()
    def tables(self) -> SymbolTables:
        """Quantized coding tables for the current parameters (float64 pass)."""
        s = self.support
        edges = torch.arange(-s, s + 2, dtype=torch.float64) - 0.5
        grid = edges.view(1, 1, -1).expand(self.channels, 1, -1)
        cdf = torch.sigmoid(self._logits(grid)).squeeze(1).cpu().numpy()
        pmf = np.diff(cdf, axis=1)
        escape = np.clip(cdf[:, 0] + (1.0 - cdf[:, -1]), 0.0, None)
        return SymbolTables.from_pmf(pmf, escape, support=s)


def rate_estimate(latent: torch.Tensor, prior: FactorizedPrior) -> torch.Tensor:
    """Expected code length in bits under the continuous prior.

    For a (C, h, w) latent this is the total for the plane; for a batched
    (B, C, h, w) latent it is the per-sample total averaged over the batch.
    Differentiable with respect to both the latent and the prior parameters.
    """
    lik = prior.likelihood(latent)
    bits = -torch.log2(lik)
    if bits.ndim == 3:
        return bits.sum()
    return bits.sum(dim=(1, 2, 3)).mean()


def _zigzag(s: int) -> int:
    return (s << 1) if s >= 0 else ((-s) << 1) - 1


def _unzigzag(u: int) -> int:
    return (u >> 1) if (u & 1) == 0 else -((u + 1) >> 1)


def range_encode(code: LatentCode, prior) -> bytes:
    """Losslessly encode a latent plane; empty planes yield an empty payload."""
    tables = prior if isinstance(prior, SymbolTables) else prior.tables()
    syms = code.symbols.reshape(-1).cpu().numpy().astype(np.int64)
    n = syms.size
    if n == 0:
        return b""
    c = code.channels
    require(tables.channels == c,
            f"latent has {c} channels but tables cover {tables.channels}")
    slot = syms - tables.offset
    escape = tables.escape_slot
    in_support = (slot >= 0) & (slot < escape)
    enc = RangeEncoder()
    total = tables.total
    channel_of = np.tile(np.arange(c, dtype=np.int64), n // c)
    if bool(in_support.all()):
        cums = tables.cumfreqs[channel_of, slot].tolist()
        freqs = tables.freqs[channel_of, slot].tolist()
        encode = enc.encode
        for cum, freq in zip(cums, freqs):
            encode(cum, freq, total)
    else:
        cumrows = tables.cumfreqs
        freqrows = tables.freqs
        for i in range(n):
            ch = channel_of[i]
            if in_support[i]:
                k = slot[i]
                enc.encode(int(cumrows[ch, k]), int(freqrows[ch, k]), total)
            else:
                enc.encode(int(cumrows[ch, escape]), int(freqrows[ch, escape]), total)
                enc.encode_bits(_zigzag(int(syms[i])), 32)
    return enc.finish()


def range_decode(data: bytes, prior, shape: tuple[int, int, int],
                 model_id: ModelId) -> LatentCode:
    """Inverse of :func:`range_encode` for a known (h, w, c) shape."""
    h, w, c = shape
    n = h * w * c
    if n == 0:
        return LatentCode(torch.zeros(h, w, c, dtype=torch.long), model_id)
    tables = prior if isinstance(prior, SymbolTables) else prior.tables()
    require(tables.channels == c,
            f"shape asks for {c} channels but tables cover {tables.channels}")
    dec = RangeDecoder(data)
    rows = [row.tolist() for row in tables.cumfreqs]
    escape = tables.escape_slot
    offset = tables.offset
    support = tables.support
    total = tables.total
    out = np.empty(n, dtype=np.int64)
    search = bisect.bisect_right
    for i in range(n):
        row = rows[i % c]
        t = dec.decode_target(total)
        k = search(row, t) - 1
        dec.decode_update(row[k], row[k + 1] - row[k])
        if k == escape:
            value = _unzigzag(dec.decode_bits(32))
            if -support <= value <= support:
                raise CorruptStreamError(
                    "escape payload decodes to an in-support symbol",
                    byte_offset=dec.consumed)
            out[i] = value
        else:
            out[i] = k + offset
    symbols = torch.from_numpy(out.reshape(h, w, c))
    return LatentCode(symbols, model_id)
