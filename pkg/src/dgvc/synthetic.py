"""Procedural toy video: smooth moving textures with known ground truth.

Desk-scale training and the trend checks need content whose motion is
actually learnable in a few hundred iterations: band-limited textures
translating at a constant per-clip velocity, rendered by bilinear sampling
from one oversized texture so subpixel motion is exact, not resampled.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .core import Frame, require
from .data import save_sequence


def smooth_texture(height: int, width: int, rng: np.random.Generator,
                   components: int = 8, detail: int = 0) -> np.ndarray:
    """Sum of random low-frequency gratings, mapped to [0.05, 0.95].

    ``detail`` adds that many extra high-frequency gratings at a quarter of
    the base amplitude, giving the texture fine grain whose displacement or
    interpolation blur actually costs PSNR.
    """
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    canvas = np.zeros((height, width, 3))
    span = max(height, width)
    bands = [(components, 0.5, 3.0, 1.0), (detail, 8.0, 16.0, 0.25)]
    for count, lo_f, hi_f, amp in bands:
        for _ in range(count):
            freq = rng.uniform(lo_f, hi_f) * 2.0 * np.pi / span
            angle = rng.uniform(0.0, np.pi)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = np.sin(freq * (np.cos(angle) * xs + np.sin(angle) * ys)
                          + phase)
            canvas += wave[..., None] * (amp * rng.uniform(0.2, 1.0, size=3))
    lo, hi = canvas.min(), canvas.max()
    canvas = (canvas - lo) / max(hi - lo, 1e-9)
    return (0.05 + 0.9 * canvas).astype(np.float32)


def _bilinear_window(texture: np.ndarray, top: float, left: float,
                     height: int, width: int) -> np.ndarray:
    ys = top + np.arange(height, dtype=np.float64)
    xs = left + np.arange(width, dtype=np.float64)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[:, None, None].astype(np.float32)
    fx = (xs - x0)[None, :, None].astype(np.float32)
    require(y0.min() >= 0 and x0.min() >= 0
            and y0.max() + 1 < texture.shape[0] and x0.max() + 1 < texture.shape[1],
            "window leaves the texture")
    rows0, rows1 = texture[y0], texture[y0 + 1]
    blend_top = rows0[:, x0] * (1 - fx) + rows0[:, x0 + 1] * fx
    blend_bot = rows1[:, x0] * (1 - fx) + rows1[:, x0 + 1] * fx
    return blend_top * (1 - fy) + blend_bot * fy


def moving_clip(height: int, width: int, n_frames: int,
                rng: np.random.Generator, max_speed: float = 1.5,
                detail: int = 0):
    """A clip translating at constant velocity; returns (frames, (dx, dy)).

    The velocity is the exact dense flow that warps frame t-1 onto frame t.
    """
    require(n_frames >= 1, "need at least one frame")
    margin = int(np.ceil(n_frames * max_speed)) + 4
    texture = smooth_texture(height + 2 * margin, width + 2 * margin, rng,
                             detail=detail)
    velocity = rng.uniform(-max_speed, max_speed, size=2)  # (dx, dy)
    frames = []
    for t in range(n_frames):
        top = margin + t * velocity[1]
        left = margin + t * velocity[0]
        window = _bilinear_window(texture, top, left, height, width)
        frames.append(Frame(torch.from_numpy(window), t))
    return frames, (float(velocity[0]), float(velocity[1]))


def shift_pair(height: int, width: int, rng: np.random.Generator,
               max_shift: float = 3.0):
    """(reference, target, (dx, dy)) where warping the reference by the
    constant flow reproduces the target up to interpolation error."""
    margin = int(np.ceil(max_shift)) + 4
    texture = smooth_texture(height + 2 * margin, width + 2 * margin, rng)
    dx, dy = rng.uniform(-max_shift, max_shift, size=2)
    ref = Frame(torch.from_numpy(
        _bilinear_window(texture, margin, margin, height, width)), 0)
    tgt = Frame(torch.from_numpy(
        _bilinear_window(texture, margin + dy, margin + dx, height, width)), 1)
    return ref, tgt, (float(dx), float(dy))


def make_training_clips(count: int, n_frames: int, height: int, width: int,
                        seed: int, max_speed: float = 1.5,
                        detail: int = 0) -> list:
    """In-memory clip tensors, each (frames, 3, H, W), deterministic per seed."""
    rng = np.random.default_rng(seed)
    clips = []
    for _ in range(count):
        frames, _ = moving_clip(height, width, n_frames, rng, max_speed,
                                detail=detail)
        clips.append(torch.stack([f.chw().squeeze(0) for f in frames]))
    return clips


def write_toy_dataset(out_dir, clips: int, n_frames: int, height: int,
                      width: int, seed: int) -> Path:
    """Render clips as 8-bit PNG directories plus a manifest; returns its path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    for i in range(clips):
        frames, _ = moving_clip(height, width, n_frames, rng)
        name = f"clip_{i:03d}"
        save_sequence(frames, out / name)
        names.append(name)
    manifest = out / "manifest.txt"
    lines = ["# toy clips, one directory per line"] + names
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
