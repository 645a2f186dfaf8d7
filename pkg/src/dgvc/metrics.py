"""Quality and rate metrics: PSNR, multi-scale SSIM, BD-rate, RD reports.

The MS-SSIM here follows the widely used TensorFlow conventions (11x11
Gaussian window with sigma 1.5, valid-mode convolution, relu before the
fractional powers, symmetric edge padding before each 2x downsample) so that
values can be cross-checked against that implementation. It is written in
torch and stays differentiable for use as a training distortion.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.interpolate import PchipInterpolator

from .core import ConfigError, Frame, MetricDomainError, require

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_CAP_DB = 99.0
_FILTER_SIZE = 11
_FILTER_SIGMA = 1.5
_BDBR_QUALITY_STEP = 1e-3


def mse(a: Frame, b: Frame) -> float:
    require(a.height == b.height and a.width == b.width,
            f"frame dims differ: {a.height}x{a.width} vs {b.height}x{b.width}")
    diff = a.pixels.double() - b.pixels.double()
    return float(diff.square().mean().item())


def psnr(a: Frame, b: Frame) -> float:
    """Peak signal-to-noise ratio in dB on the [0,1] scale, capped at 99."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / err), PSNR_CAP_DB)


def _gaussian_kernel(channels: int, dtype, device) -> torch.Tensor:
    coords = torch.arange(_FILTER_SIZE, dtype=dtype, device=device)
    coords = coords - (_FILTER_SIZE - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * _FILTER_SIGMA ** 2))
    kernel = torch.outer(g, g)
    kernel = kernel / kernel.sum()
    return kernel.expand(channels, 1, _FILTER_SIZE, _FILTER_SIZE).contiguous()


def _ssim_maps(x: torch.Tensor, y: torch.Tensor, kernel: torch.Tensor,
               c1: float, c2: float):
    channels = x.shape[1]

    def reduce(t):
        return F.conv2d(t, kernel, groups=channels)

    mean_x = reduce(x)
    mean_y = reduce(y)
    num0 = mean_x * mean_y * 2.0
    den0 = mean_x.square() + mean_y.square()
    luminance = (num0 + c1) / (den0 + c1)
    num1 = reduce(x * y) * 2.0
    den1 = reduce(x.square()) + reduce(y.square())
    cs = (num1 - num0 + c2) / (den1 - den0 + c2)
    return luminance, cs


def _downsample(x: torch.Tensor) -> torch.Tensor:
    pad_h = x.shape[2] % 2
    pad_w = x.shape[3] % 2
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    return F.avg_pool2d(x, kernel_size=2, stride=2)


def _auto_scales(height: int, width: int) -> int:
    n = 0
    h, w = height, width
    while n < len(MS_SSIM_WEIGHTS) and min(h, w) >= _FILTER_SIZE:
        n += 1
        h = (h + 1) // 2
        w = (w + 1) // 2
    return n


def ms_ssim_tensor(x: torch.Tensor, y: torch.Tensor, max_val: float = 1.0,
                   scales: int | None = None, k1: float = 0.01,
                   k2: float = 0.03) -> torch.Tensor:
    """Per-sample multi-scale structural similarity, shape (batch,).

    ``scales=None`` picks the largest usable depth (up to 5) for the input
    size; an explicit ``scales`` that does not fit raises MetricDomainError.
    At full depth the standard five exponents are used verbatim; at reduced
    depth they are renormalized to sum to one.
    """
    require(x.shape == y.shape, f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    require(x.dim() == 4, "expected NCHW tensors")
    height, width = x.shape[2], x.shape[3]
    fit = _auto_scales(height, width)
    if fit < 1:
        raise MetricDomainError(
            f"{height}x{width} is smaller than the {_FILTER_SIZE}x{_FILTER_SIZE} window")
    if scales is None:
        scales = fit
    elif scales < 1 or scales > len(MS_SSIM_WEIGHTS):
        raise MetricDomainError(f"scales must lie in 1..{len(MS_SSIM_WEIGHTS)}")
    elif scales > fit:
        raise MetricDomainError(
            f"{height}x{width} supports only {fit} scale(s), not {scales}")
    if scales == len(MS_SSIM_WEIGHTS):
        weights = MS_SSIM_WEIGHTS
    else:
        total = sum(MS_SSIM_WEIGHTS[:scales])
        weights = tuple(w / total for w in MS_SSIM_WEIGHTS[:scales])

    kernel = _gaussian_kernel(x.shape[1], x.dtype, x.device)
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2
    per_scale = []
    for level in range(scales):
        if level > 0:
            x = _downsample(x)
            y = _downsample(y)
        luminance, cs = _ssim_maps(x, y, kernel, c1, c2)
        if level < scales - 1:
            per_scale.append(F.relu(cs.mean(dim=(2, 3))))
        else:
            per_scale.append(F.relu((luminance * cs).mean(dim=(2, 3))))
    stacked = torch.stack(per_scale, dim=-1)
    exponents = torch.tensor(weights, dtype=x.dtype, device=x.device)
    score = torch.prod(stacked ** exponents, dim=-1)
    return score.mean(dim=1)


def ms_ssim(a: Frame, b: Frame, scales: int | None = None) -> float:
    require(a.height == b.height and a.width == b.width,
            f"frame dims differ: {a.height}x{a.width} vs {b.height}x{b.width}")
    with torch.no_grad():
        value = ms_ssim_tensor(a.chw(), b.chw(), scales=scales)
    return float(value.item())


DISTORTION_METRICS = ("mse", "ms-ssim")


def distortion(metric: str, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Training distortion: plain MSE, or one minus MS-SSIM."""
    if metric == "mse":
        return F.mse_loss(x, y)
    if metric == "ms-ssim":
        return 1.0 - ms_ssim_tensor(x, y).mean()
    raise ConfigError(f"unknown distortion metric {metric!r}; "
                      f"expected one of {DISTORTION_METRICS}")


@dataclass(frozen=True)
class RdCurve:
    """A rate-distortion curve: (bpp, quality) samples for one codec setting."""

    label: str
    metric: str
    points: tuple

    def __post_init__(self):
        require(self.metric in ("psnr", "ms-ssim"),
                f"unknown curve metric {self.metric!r}", ConfigError)
        pts = tuple(sorted((float(r), float(q)) for r, q in self.points))
        for (r0, q0), (r1, q1) in zip(pts, pts[1:]):
            if not (r1 > r0 and q1 > q0):
                raise MetricDomainError(
                    f"curve {self.label!r} must be strictly increasing in both "
                    f"rate and quality; got ({r0}, {q0}) then ({r1}, {q1})")
        object.__setattr__(self, "points", pts)

    @property
    def rates(self):
        return tuple(p[0] for p in self.points)

    @property
    def qualities(self):
        return tuple(p[1] for p in self.points)


def bdbr(anchor: RdCurve, test: RdCurve) -> float:
    """Average rate difference (percent) of ``test`` against ``anchor`` at
    equal quality over the overlapping quality range; negative = savings.
    """
    for curve in (anchor, test):
        if len(curve.points) < 4:
            raise MetricDomainError(
                f"curve {curve.label!r} has {len(curve.points)} points; "
                "rate-difference integration needs at least 4")
    require(anchor.metric == test.metric,
            f"metric mismatch: {anchor.metric} vs {test.metric}", ConfigError)
    q_lo = max(min(anchor.qualities), min(test.qualities))
    q_hi = min(max(anchor.qualities), max(test.qualities))
    if not q_hi > q_lo:
        raise MetricDomainError(
            f"quality ranges of {anchor.label!r} and {test.label!r} do not overlap")
    fit_anchor = PchipInterpolator(anchor.qualities, np.log(anchor.rates))
    fit_test = PchipInterpolator(test.qualities, np.log(test.rates))
    steps = max(int(round((q_hi - q_lo) / _BDBR_QUALITY_STEP)), 1)
    grid = np.linspace(q_lo, q_hi, steps + 1)
    gap = np.trapezoid(fit_test(grid) - fit_anchor(grid), grid) / (q_hi - q_lo)
    return float((math.exp(gap) - 1.0) * 100.0)


@dataclass(frozen=True)
class RdPoint:
    """One encode outcome: a sequence at one lambda."""

    sequence: str
    lmbda: float
    frames: int
    bpp: float
    psnr_db: float
    msssim: float


_POINTS_HEADER = ["sequence", "lambda", "frames", "bpp", "psnr_db", "msssim"]


def write_points_csv(path, points) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_POINTS_HEADER)
        for p in points:
            writer.writerow([p.sequence, repr(p.lmbda), p.frames,
                             repr(p.bpp), repr(p.psnr_db), repr(p.msssim)])


def read_points_csv(path):
    points = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        require(header == _POINTS_HEADER,
                f"{path}: expected header {','.join(_POINTS_HEADER)}")
        for row in reader:
            if not row:
                continue
            require(len(row) == len(_POINTS_HEADER),
                    f"{path}: malformed row {row!r}")
            points.append(RdPoint(row[0], float(row[1]), int(row[2]),
                                  float(row[3]), float(row[4]), float(row[5])))
    return points


def curve_from_points(label: str, points, metric: str) -> RdCurve | None:
    """Aggregate per-sequence points into one curve: mean bpp and mean quality
    per lambda. Returns None (with a warning) when fewer than 4 lambdas are
    present or the aggregate is not strictly monotone.
    """
    by_lambda: dict = {}
    for p in points:
        by_lambda.setdefault(p.lmbda, []).append(p)
    if len(by_lambda) < 4:
        warnings.warn(f"curve {label!r} has {len(by_lambda)} lambda point(s); "
                      "skipping (need 4)", stacklevel=2)
        return None
    quality_of = (lambda p: p.psnr_db) if metric == "psnr" else (lambda p: p.msssim)
    agg = []
    for lmbda in sorted(by_lambda):
        group = by_lambda[lmbda]
        agg.append((sum(p.bpp for p in group) / len(group),
                    sum(quality_of(p) for p in group) / len(group)))
    try:
        return RdCurve(label, metric, tuple(agg))
    except MetricDomainError as exc:
        warnings.warn(f"curve {label!r} skipped: {exc}", stacklevel=2)
        return None


def rd_report(runs: dict, anchor_label: str, out_dir) -> dict:
    """Write RD point CSVs, a plot-ready curves JSON, and a BD-rate table.

    ``runs`` maps a run label to its list of RdPoint. Returns the paths of
    everything written. Runs with too few lambda points are skipped with a
    warning; the anchor itself must survive aggregation.
    """
    require(anchor_label in runs, f"anchor {anchor_label!r} missing from runs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"points": {}, "curves": out / "curves.json",
             "bdbr": out / "bdbr_table.csv"}
    curves = []
    for label in sorted(runs):
        csv_path = out / f"points_{label}.csv"
        write_points_csv(csv_path, sorted(runs[label],
                                          key=lambda p: (p.sequence, p.lmbda)))
        paths["points"][label] = csv_path
        for metric in ("psnr", "ms-ssim"):
            curve = curve_from_points(label, runs[label], metric)
            if curve is not None:
                curves.append(curve)
    with open(paths["curves"], "w", encoding="utf-8") as fh:
        json.dump([{"label": c.label, "metric": c.metric,
                    "points": [[r, q] for r, q in c.points]}
                   for c in curves], fh, indent=2)
        fh.write("\n")
    anchors = {c.metric: c for c in curves if c.label == anchor_label}
    require(bool(anchors), f"anchor {anchor_label!r} produced no usable curve")
    with open(paths["bdbr"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "metric", "bdbr_percent_vs_anchor"])
        for curve in curves:
            if curve.label == anchor_label or curve.metric not in anchors:
                continue
            try:
                value = bdbr(anchors[curve.metric], curve)
            except MetricDomainError as exc:
                warnings.warn(f"bdbr skipped for {curve.label!r}/{curve.metric}: "
                              f"{exc}", stacklevel=2)
                continue
            writer.writerow([curve.label, curve.metric, f"{value:.4f}"])
    return paths
