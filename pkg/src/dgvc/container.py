"""Bitstream container: header plus per-frame records in coding order.

Layout (all header integers little-endian u32 unless noted):

    magic   4 bytes  b"DGVC"
    version u32
    width, height, frame_count, gop_size, lambda_id, metric_flag,
    feature_flags               u32 each
    prior_hash                  32 bytes (sha256 of the coding tables)
    records frame_count times:
        frame_type   u32   (0 intra, 1 forward P, 2 backward P)
        display_index u32
        mvd chunk    [u32 length, big-endian][payload]
        residual chunk likewise (intra frames keep their payload here and
                                 carry an empty mvd chunk)

Reported rate counts *payload* bytes only — chunk bodies, not headers or
length prefixes — so ``bpp * W * H * N == 8 * payload_bytes`` holds exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from fractions import Fraction
from pathlib import Path

from .core import CorruptStreamError, require

MAGIC = b"DGVC"
CONTAINER_VERSION = 1
METRIC_FLAGS = {"mse": 0, "ms-ssim": 1}
METRIC_NAMES = {v: k for k, v in METRIC_FLAGS.items()}

FEATURE_MV_PREDICTION = 1 << 0
FEATURE_MC_ENHANCEMENT = 1 << 1
FEATURE_QUALITY_ENHANCEMENT = 1 << 2


class FrameType(IntEnum):
    INTRA = 0
    P_FORWARD = 1
    P_BACKWARD = 2


def write_chunk(payload: bytes) -> bytes:
    require(len(payload) < (1 << 32), "chunk payload too large")
    return struct.pack(">I", len(payload)) + payload


def read_chunk(data: bytes, pos: int) -> tuple[bytes, int]:
    if pos + 4 > len(data):
        raise CorruptStreamError("truncated chunk length", byte_offset=pos)
    (length,) = struct.unpack_from(">I", data, pos)
    pos += 4
    if pos + length > len(data):
        raise CorruptStreamError(
            f"chunk payload of {length} bytes exceeds container", byte_offset=pos)
    return data[pos:pos + length], pos + length


@dataclass(frozen=True)
class FrameRecord:
    frame_type: FrameType
    display_index: int
    mvd_payload: bytes
    res_payload: bytes

    def __post_init__(self):
        object.__setattr__(self, "frame_type", FrameType(self.frame_type))
        require(self.display_index >= 0, "display_index must be >= 0")
        if self.frame_type == FrameType.INTRA:
            require(self.mvd_payload == b"", "intra records carry no mvd payload")

    @property
    def payload_bytes(self) -> int:
        return len(self.mvd_payload) + len(self.res_payload)

    @property
    def bits(self) -> int:
        return 8 * self.payload_bytes


@dataclass(frozen=True)
class BitstreamContainer:
    width: int
    height: int
    frame_count: int
    gop_size: int
    lambda_id: int
    metric: str
    feature_flags: int
    prior_hash: bytes
    records: tuple

    def __post_init__(self):
        require(self.width > 0 and self.height > 0, "bad frame dimensions")
        require(self.frame_count == len(self.records),
                "frame_count disagrees with record count")
        require(self.metric in METRIC_FLAGS, f"unknown metric {self.metric!r}")
        require(len(self.prior_hash) == 32, "prior hash must be 32 bytes")
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def payload_bytes(self) -> int:
        return sum(r.payload_bytes for r in self.records)

    @property
    def bpp(self) -> Fraction:
        """Exact bits per pixel over the original (uncropped) frame area."""
        return Fraction(8 * self.payload_bytes,
                        self.width * self.height * self.frame_count)

    def serialize(self) -> bytes:
        out = bytearray()
        out += MAGIC
        out += struct.pack("<7I", CONTAINER_VERSION, self.width, self.height,
                           self.frame_count, self.gop_size, self.lambda_id,
                           METRIC_FLAGS[self.metric])
        out += struct.pack("<I", self.feature_flags)
        out += self.prior_hash
        for rec in self.records:
            out += struct.pack("<2I", int(rec.frame_type), rec.display_index)
            out += write_chunk(rec.mvd_payload)
            out += write_chunk(rec.res_payload)
        return bytes(out)

    @classmethod
    def parse(cls, data: bytes) -> "BitstreamContainer":
        if len(data) < 4 or data[:4] != MAGIC:
            raise CorruptStreamError("bad magic: not a DGVC container", byte_offset=0)
        pos = 4
        header_len = 4 * 8 + 32
        if len(data) < 4 + header_len:
            raise CorruptStreamError("truncated header", byte_offset=len(data),
                                     decodable_frames=0)
        version, width, height, frame_count, gop_size, lambda_id, metric_flag = \
            struct.unpack_from("<7I", data, pos)
        pos += 28
        (feature_flags,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if version != CONTAINER_VERSION:
            raise CorruptStreamError(f"container version {version} unsupported",
                                     byte_offset=4)
        if metric_flag not in METRIC_NAMES:
            raise CorruptStreamError(f"unknown metric flag {metric_flag}",
                                     byte_offset=4 + 24)
        prior_hash = data[pos:pos + 32]
        pos += 32
        records = []
        for i in range(frame_count):
            try:
                if pos + 8 > len(data):
                    raise CorruptStreamError("truncated record header", byte_offset=pos)
                ftype, display = struct.unpack_from("<2I", data, pos)
                pos += 8
                mvd, pos = read_chunk(data, pos)
                res, pos = read_chunk(data, pos)
                if ftype not in (0, 1, 2):
                    raise CorruptStreamError(f"unknown frame type {ftype}",
                                             byte_offset=pos, display_index=display)
                records.append(FrameRecord(FrameType(ftype), display, mvd, res))
            except CorruptStreamError as exc:
                raise CorruptStreamError(
                    f"container truncated in record {i}: {exc} "
                    f"(recoverable prefix: {len(records)} of {frame_count} frames)",
                    byte_offset=exc.byte_offset,
                    decodable_frames=len(records)) from exc
        try:
            return cls(width, height, frame_count, gop_size, lambda_id,
                       METRIC_NAMES[metric_flag], feature_flags, prior_hash,
                       tuple(records))
        except Exception as exc:
            raise CorruptStreamError(f"malformed container: {exc}") from exc

    def write_file(self, path) -> None:
        Path(path).write_bytes(self.serialize())

    @classmethod
    def read_file(cls, path) -> "BitstreamContainer":
        return cls.parse(Path(path).read_bytes())
