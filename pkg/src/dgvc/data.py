"""Dataset plumbing: clip discovery, frame loading, patch sampling.

Two on-disk layouts are understood: a directory of numbered 8-bit images
(the canonical test input) and a headerless raw file of 8-bit planar RGB
frames with declared geometry. Loading normalizes to [0,1] floats; writing
rounds back to 8 bits, so a load/save round trip is value-exact.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import Frame, InvalidInputError, require

IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg", ".ppm")


def frame_to_uint8(frame: Frame) -> np.ndarray:
    pixels = frame.pixels.detach().cpu().numpy()
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)


def _frame_from_array(data: np.ndarray, index: int) -> Frame:
    return Frame(torch.from_numpy(data.astype(np.float32) / 255.0), index)


def list_frame_images(directory) -> list:
    directory = Path(directory)
    require(directory.is_dir(), f"not a directory: {directory}")
    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    require(bool(paths), f"no frame images under {directory}")
    return paths


def _load_image(path, index: int) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"frame {index} ({path}) unreadable: {exc}") from exc


def load_image_directory(directory) -> list:
    frames = []
    dims = None
    for index, path in enumerate(list_frame_images(directory)):
        data = _load_image(path, index)
        if dims is None:
            dims = data.shape[:2]
        elif data.shape[:2] != dims:
            raise InvalidInputError(
                f"frame {index} ({path}) is {data.shape[0]}x{data.shape[1]}, "
                f"clip started at {dims[0]}x{dims[1]}")
        frames.append(_frame_from_array(data, index))
    return frames


def load_raw_planar(path, width: int, height: int, frame_count: int) -> list:
    """Read N frames of 8-bit planar RGB (all R rows, all G, all B per frame)."""
    require(width > 0 and height > 0 and frame_count > 0,
            "raw-planar input needs positive width, height and frame count")
    path = Path(path)
    require(path.is_file(), f"not a file: {path}")
    expected = frame_count * 3 * height * width
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != expected:
        raise InvalidInputError(
            f"{path}: expected {expected} bytes for {frame_count} frames of "
            f"{width}x{height} planar RGB, found {raw.size}")
    planes = raw.reshape(frame_count, 3, height, width)
    return [_frame_from_array(planes[i].transpose(1, 2, 0), i)
            for i in range(frame_count)]


def load_sequence(path, layout: str = "image-directory", *, width: int | None = None,
                  height: int | None = None, frame_count: int | None = None) -> list:
    if layout == "image-directory":
        return load_image_directory(path)
    if layout == "raw-planar":
        require(None not in (width, height, frame_count),
                "raw-planar input needs --width/--height/--frames")
        return load_raw_planar(path, width, height, frame_count)
    raise InvalidInputError(f"unknown sequence layout {layout!r}")


def save_sequence(frames, directory, prefix: str = "frame") -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, frame in enumerate(frames):
        out = directory / f"{prefix}_{i:04d}.png"
        Image.fromarray(frame_to_uint8(frame)).save(out)
        written.append(out)
    return written


@dataclass(frozen=True)
class ClipRecord:
    """One training/eval clip: ordered frame paths plus probed geometry."""

    frame_paths: tuple
    height: int
    width: int
    tag: str = ""

    def __post_init__(self):
        require(len(self.frame_paths) >= 2, "a clip needs at least 2 frames")
        require(self.height > 0 and self.width > 0, "clip dims must be positive")

    @classmethod
    def from_directory(cls, directory, tag: str = "") -> "ClipRecord":
        paths = list_frame_images(directory)
        require(len(paths) >= 2,
                f"{directory}: a clip needs at least 2 frames, found {len(paths)}")
        probe = _load_image(paths[0], 0)
        return cls(tuple(paths), probe.shape[0], probe.shape[1],
                   tag or Path(directory).name)

    def load(self) -> list:
        frames = []
        for index, path in enumerate(self.frame_paths):
            data = _load_image(path, index)
            if data.shape[:2] != (self.height, self.width):
                raise InvalidInputError(
                    f"frame {index} ({path}) is {data.shape[0]}x{data.shape[1]}, "
                    f"clip declares {self.height}x{self.width}")
            frames.append(_frame_from_array(data, index))
        return frames


def read_manifest(path) -> list:
    """One clip directory per line; blank lines and ``#`` comments ignored.
    Relative entries resolve against the manifest's own directory.
    """
    path = Path(path)
    require(path.is_file(), f"manifest not found: {path}")
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        entry = line.split("#", 1)[0].strip()
        if not entry:
            continue
        clip_dir = Path(entry)
        if not clip_dir.is_absolute():
            clip_dir = path.parent / clip_dir
        records.append(ClipRecord.from_directory(clip_dir))
    require(bool(records), f"manifest {path} lists no clips")
    return records


def sample_patches(clip, count: int, size: int, seed: int) -> torch.Tensor:
    """Draw ``count`` temporally aligned square crops from a clip.

    Every sample uses one spatial window across all of the clip's frames, so
    motion inside the crop stays coherent. Returns (count, frames, 3, size,
    size) in [0,1]. ``clip`` is a ClipRecord or a list of Frame.
    """
    frames = clip.load() if isinstance(clip, ClipRecord) else list(clip)
    require(len(frames) >= 2, "patch sampling needs a clip of at least 2 frames")
    require(count >= 1, "count must be >= 1")
    require(size >= 16 and size % 16 == 0, "patch size must be a multiple of 16")
    height, width = frames[0].height, frames[0].width
    require(size <= height and size <= width,
            f"{size}x{size} crop does not fit a {height}x{width} frame")
    stack = torch.stack([f.chw().squeeze(0) for f in frames])
    rng = np.random.default_rng(seed)
    tops = rng.integers(0, height - size + 1, count)
    lefts = rng.integers(0, width - size + 1, count)
    return torch.stack([stack[:, :, t:t + size, l:l + size]
                        for t, l in zip(tops.tolist(), lefts.tolist())])
